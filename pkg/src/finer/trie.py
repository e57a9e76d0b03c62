"""Learning pattern trie: suffix-linked, depth-truncated, with per-node FPT statistics.

Every window of ``ibar + zbar`` consecutive cells of the run-compressed corpus is
inserted from the root, so the trie holds every corpus substring up to that
depth. Node counts ``eta`` are occurrence counts; suffix links point to the
node one cell shorter; follow-up statistics are aggregated bottom-up from the
children. A streaming cursor walks suffix links to keep, for each student, the
longest recent suffix of length at most ``ibar`` that occurs in the corpus.
"""

from __future__ import annotations

import struct
from collections import deque
from dataclasses import dataclass, field
from typing import Iterable, Iterator, Sequence

from .dataset import Dataset, LearningCell

MAGIC = b"FPTRIE1"
FORMAT_VERSION = 1
ROOT = 0

Stats = dict[int, tuple[tuple[int, ...], tuple[int, ...]]]


class TrieFormatError(ValueError):
    """Base class for trie (de)serialization failures."""


class BadMagicError(TrieFormatError):
    pass


class VersionMismatchError(TrieFormatError):
    pass


class TruncatedTrieError(TrieFormatError):
    pass


def compress_runs(cells: Iterable[LearningCell], xi: int) -> list[LearningCell]:
    """Drop every cell that repeats the ``xi`` cells right before it.

    Runs of identical cells are therefore capped at ``xi``.
    """
    out: list[LearningCell] = []
    prev = None
    run = 0
    for cell in cells:
        run = run + 1 if cell == prev else 1
        prev = cell
        if run <= xi:
            out.append(cell)
    return out


@dataclass(frozen=True)
class TrieParams:
    xi: int
    zbar: int
    ibar: int
    question_count: int

    @property
    def depth_cap(self) -> int:
        return self.ibar + self.zbar


@dataclass(frozen=True)
class Fpt:
    """Follow-up statistics of one pattern for every question that follows it."""

    length: int
    stats: Stats
    zbar: int

    def totals(self, question: int) -> tuple[int, ...]:
        entry = self.stats.get(question)
        return entry[0] if entry else (0,) * self.zbar

    def corrects(self, question: int) -> tuple[int, ...]:
        entry = self.stats.get(question)
        return entry[1] if entry else (0,) * self.zbar

    def ratios(self, question: int) -> tuple[float, ...]:
        return _ratios(self.totals(question), self.corrects(question))


def _ratios(totals: Sequence[int], corrects: Sequence[int]) -> tuple[float, ...]:
    return tuple(c / t if t else 0.0 for t, c in zip(totals, corrects))


class TrieNode:
    __slots__ = ("edges", "eta", "suffix", "depth", "stats")

    def __init__(self, depth: int) -> None:
        self.edges: dict[LearningCell, int] = {}
        self.eta = 0
        self.suffix = ROOT
        self.depth = depth
        self.stats: Stats = {}

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, TrieNode):
            return NotImplemented
        return (
            self.edges == other.edges
            and self.eta == other.eta
            and self.suffix == other.suffix
            and self.depth == other.depth
            and self.stats == other.stats
        )

    def __repr__(self) -> str:
        return f"TrieNode(depth={self.depth}, eta={self.eta}, suffix={self.suffix}, edges={len(self.edges)})"


@dataclass(frozen=True)
class FptQuery:
    """The ``ibar x zbar`` FPT matrices fetched for one target question.

    Row ``i`` (0-based) describes the length-``i+1`` suffix of the student's
    stream, or the empty pattern (length 0) when that suffix never occurs.
    """

    target: int
    lengths: tuple[int, ...]
    F: tuple[tuple[int, ...], ...]
    C: tuple[tuple[int, ...], ...]

    @property
    def P(self) -> tuple[tuple[float, ...], ...]:
        return tuple(_ratios(f, c) for f, c in zip(self.F, self.C))

    def to_json(self) -> dict:
        return {
            "target": self.target,
            "lengths": list(self.lengths),
            "F": [list(r) for r in self.F],
            "P": [list(r) for r in self.P],
            "C": [list(r) for r in self.C],
        }


@dataclass(frozen=True)
class FetchState:
    """Per-stream cursor. ``hops`` accumulates suffix-link traversals."""

    node: int = ROOT
    run_cell: LearningCell | None = None
    run_len: int = 0
    history_len: int = 0
    hops: int = 0


@dataclass
class Trie:
    params: TrieParams
    nodes: list[TrieNode] = field(default_factory=lambda: [TrieNode(0)])
    question_ids: tuple[int, ...] = ()  # source identifier of each dense question index

    def dense_question(self, qid: int) -> int:
        """Dense index of source question ``qid`` (identity when no mapping is stored)."""
        if not self.question_ids:
            if not 0 <= qid < self.params.question_count:
                raise ValueError(f"question {qid} outside [0, {self.params.question_count})")
            return qid
        try:
            return self.question_ids.index(qid)
        except ValueError:
            raise ValueError(f"question {qid} was never seen when the trie was built") from None

    root = ROOT

    @property
    def edge_count(self) -> int:
        return sum(len(n.edges) for n in self.nodes)

    def counters(self) -> dict:
        return {
            "nodes": len(self.nodes),
            "edges": self.edge_count,
            "max_depth": max(n.depth for n in self.nodes),
            "xi": self.params.xi,
            "zbar": self.params.zbar,
            "ibar": self.params.ibar,
            "question_count": self.params.question_count,
        }

    def fpt(self, node: int) -> Fpt:
        n = self.nodes[node]
        return Fpt(n.depth, n.stats, self.params.zbar)

    def find(self, pattern: Sequence[tuple[int, int]]) -> int | None:
        """Node id of ``pattern`` or ``None`` when it is not stored."""
        a = ROOT
        for cell in pattern:
            a = self.nodes[a].edges.get(LearningCell(*cell))
            if a is None:
                return None
        return a

    def patterns(self) -> Iterator[tuple[tuple[LearningCell, ...], int]]:
        """Yield ``(pattern, node_id)`` for every node, depth first in canonical order."""
        stack: list[tuple[tuple[LearningCell, ...], int]] = [((), ROOT)]
        while stack:
            pat, a = stack.pop()
            yield pat, a
            for cell in sorted(self.nodes[a].edges, reverse=True):
                stack.append((pat + (cell,), self.nodes[a].edges[cell]))

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, Trie):
            return NotImplemented
        return self.params == other.params and self.nodes == other.nodes and self.question_ids == other.question_ids


# ---------------------------------------------------------------------------
# construction


def build(ds: Dataset, xi: int = 3, zbar: int = 2, ibar: int = 2) -> Trie:
    """Build the trie over all windows of the run-compressed sequences of ``ds``."""
    if xi < 1 or zbar < 1 or ibar < 1:
        raise ValueError(f"xi, zbar and ibar must be >= 1 (got {xi}, {zbar}, {ibar})")
    trie = Trie(TrieParams(xi, zbar, ibar, ds.question_count), question_ids=tuple(ds.question_ids))
    nodes = trie.nodes
    cap = trie.params.depth_cap
    root = nodes[ROOT]
    for seq in ds.sequences:
        stream = compress_runs(seq.cells, xi)
        n = len(stream)
        for start in range(n):
            root.eta += 1
            node = root
            for k in range(start, min(n, start + cap)):
                cell = stream[k]
                child = node.edges.get(cell)
                if child is None:
                    child = len(nodes)
                    node.edges[cell] = child
                    nodes.append(TrieNode(node.depth + 1))
                node = nodes[child]
                node.eta += 1
    _link_suffixes(trie)
    compute_fpts(trie)
    return trie


def _link_suffixes(trie: Trie) -> None:
    """Breadth-first failure-link pass (classic Aho-Corasick)."""
    nodes = trie.nodes
    queue = deque([ROOT])
    while queue:
        a = queue.popleft()
        for cell in sorted(nodes[a].edges):
            child = nodes[a].edges[cell]
            if a == ROOT:
                nodes[child].suffix = ROOT
            else:
                f = nodes[a].suffix
                while f != ROOT and cell not in nodes[f].edges:
                    f = nodes[f].suffix
                nodes[child].suffix = nodes[f].edges.get(cell, ROOT)
            queue.append(child)


def compute_fpts(trie: Trie) -> None:
    """Fill every node's follow-up statistics from its subtree.

    For node ``a`` with child ``a'`` on cell ``(o, r)``: the count of ``(o, r)``
    one step after ``a`` is ``eta(a')``, and whatever follows ``a'`` at step
    ``z - 1`` follows ``a`` at step ``z``. The per-(question, response) scratch
    counts live only for the duration of the pass.
    """
    nodes = trie.nodes
    zbar = trie.params.zbar

    def g(a: int) -> dict[LearningCell, list[int]]:
        node = nodes[a]
        # omega[(o, r)][z-1]; its keys with a nonzero entry at z-1 form the reachable set at z
        omega: dict[LearningCell, list[int]] = {}
        for cell in sorted(node.edges):
            child = node.edges[cell]
            omega.setdefault(cell, [0] * zbar)[0] = nodes[child].eta
            below = g(child)
            for key, vec in below.items():
                acc = None
                for z in range(1, zbar):
                    if vec[z - 1]:
                        if acc is None:
                            acc = omega.setdefault(key, [0] * zbar)
                        acc[z] += vec[z - 1]
        stats: Stats = {}
        for (o, r), vec in omega.items():
            tot, cor = stats.get(o, ((0,) * zbar, (0,) * zbar))
            tot = tuple(t + v for t, v in zip(tot, vec))
            if r == 1:
                cor = tuple(c + v for c, v in zip(cor, vec))
            stats[o] = (tot, cor)
        node.stats = {o: stats[o] for o in sorted(stats)}
        return omega

    g(ROOT)


# ---------------------------------------------------------------------------
# streaming fetch


def new_state(trie: Trie | None = None) -> FetchState:
    return FetchState()


def advance(trie: Trie, state: FetchState, cell: LearningCell) -> FetchState:
    """Append ``cell`` to the stream and move the cursor (no FPT collection)."""
    cell = LearningCell(*cell)
    p = trie.params
    if not 0 <= cell.question < p.question_count or cell.response not in (0, 1):
        raise ValueError(f"cell {tuple(cell)} outside question range [0, {p.question_count}) or bad response")
    run_len = state.run_len + 1 if cell == state.run_cell else 1
    if run_len > p.xi:
        return FetchState(state.node, cell, run_len, state.history_len + 1, state.hops)
    nodes = trie.nodes
    ibar = p.ibar
    a = state.node
    hops = 0
    while a != ROOT:
        node = nodes[a]
        if node.depth < ibar and cell in node.edges:
            break
        a = node.suffix
        hops += 1
    a = nodes[a].edges.get(cell, ROOT)
    return FetchState(a, cell, run_len, state.history_len + 1, state.hops + hops)


def query(trie: Trie, state: FetchState, target: int) -> FptQuery:
    """Collect the ``ibar`` FPT rows for ``target`` at the current cursor."""
    p = trie.params
    if not 0 <= target < p.question_count:
        raise ValueError(f"target {target} outside question range [0, {p.question_count})")
    nodes = trie.nodes
    chain = []
    a = state.node
    while a != ROOT:
        chain.append(a)
        a = nodes[a].suffix
    chain.reverse()
    zeros = (0,) * p.zbar
    lengths, F, C = [], [], []
    for i in range(p.ibar):
        a = chain[i] if i < len(chain) else ROOT
        entry = nodes[a].stats.get(target)
        lengths.append(nodes[a].depth)
        F.append(entry[0] if entry else zeros)
        C.append(entry[1] if entry else zeros)
    return FptQuery(target, tuple(lengths), tuple(F), tuple(C))


def query_excluding(trie: Trie, own: Trie, recent: Sequence[LearningCell], target: int) -> FptQuery:
    """Rows for ``target`` as if the sequence behind ``own`` had never been inserted.

    ``own`` is a trie built with the same parameters over that one sequence;
    ``recent`` is the run-compressed history (only its last ``ibar`` cells
    matter). Counts are additive over sequences, so subtracting ``own`` is
    exact, and a pattern left with no occurrence falls back to the root row
    just as an unseen pattern would.
    """
    p = trie.params
    if not 0 <= target < p.question_count:
        raise ValueError(f"target {target} outside question range [0, {p.question_count})")
    zeros = (0,) * p.zbar
    lengths, F, C = [], [], []
    matched = True
    for i in range(1, p.ibar + 1):
        a = b = None
        if matched and len(recent) >= i:
            pattern = recent[len(recent) - i:]
            a = trie.find(pattern)
            b = own.find(pattern)
            if a is not None and trie.nodes[a].eta - (own.nodes[b].eta if b is not None else 0) <= 0:
                a = None
        if a is None:
            matched = False
            a, b = ROOT, ROOT
        tot, cor = trie.nodes[a].stats.get(target, (zeros, zeros))
        if b is not None:
            otot, ocor = own.nodes[b].stats.get(target, (zeros, zeros))
            tot = tuple(x - y for x, y in zip(tot, otot))
            cor = tuple(x - y for x, y in zip(cor, ocor))
        lengths.append(i if a != ROOT else 0)
        F.append(tot)
        C.append(cor)
    return FptQuery(target, tuple(lengths), tuple(F), tuple(C))


def fetch(trie: Trie, state: FetchState, new_cell: LearningCell, target: int) -> tuple[FptQuery, FetchState]:
    """Append ``new_cell`` to the stream, then fetch FPT rows for ``target``.

    A cell that would extend an identical run past ``xi`` leaves the cursor in
    place; the rows are then those of the unchanged cursor.
    """
    state = advance(trie, state, new_cell)
    return query(trie, state, target), state


def replay(trie: Trie, cells: Sequence[LearningCell], targets: Sequence[int] | None = None) -> list[FptQuery]:
    """Queries for each prediction point ``k``: history ``cells[:k]``, target ``targets[k]``.

    ``targets`` defaults to each cell's own question, i.e. the next-answer
    prediction setting.
    """
    if targets is None:
        targets = [c.question for c in cells]
    out = []
    state = FetchState()
    for cell, target in zip(cells, targets):
        out.append(query(trie, state, target))
        state = advance(trie, state, cell)
    return out


# ---------------------------------------------------------------------------
# binary format

_PARAMS = struct.Struct("<IIIII")
_NODE_HEAD = struct.Struct("<IQII")
_EDGE = struct.Struct("<IBI")
_COUNT = struct.Struct("<I")


def serialize(trie: Trie) -> bytes:
    p = trie.params
    params = _PARAMS.pack(p.xi, p.zbar, p.ibar, p.question_count, len(trie.nodes))
    vec = struct.Struct(f"<I{2 * p.zbar}Q")
    parts = []
    for node in trie.nodes:
        parts.append(_NODE_HEAD.pack(node.depth, node.eta, node.suffix, len(node.edges)))
        for cell in sorted(node.edges):
            parts.append(_EDGE.pack(cell.question, cell.response, node.edges[cell]))
        parts.append(_COUNT.pack(len(node.stats)))
        for q in sorted(node.stats):
            tot, cor = node.stats[q]
            parts.append(vec.pack(q, *tot, *cor))
    body = b"".join(parts)
    ids = struct.pack(f"<I{len(trie.question_ids)}q", len(trie.question_ids), *trie.question_ids)
    return b"".join([
        MAGIC,
        struct.pack("<H", FORMAT_VERSION),
        struct.pack("<I", len(params)), params,
        struct.pack("<Q", len(body)), body,
        ids,
    ])


class _Reader:
    def __init__(self, data: bytes) -> None:
        self.data = memoryview(data)
        self.pos = 0

    def take(self, s: struct.Struct) -> tuple:
        end = self.pos + s.size
        if end > len(self.data):
            raise TruncatedTrieError(f"trie data truncated at byte {self.pos} (need {s.size} more)")
        out = s.unpack_from(self.data, self.pos)
        self.pos = end
        return out


def deserialize(data: bytes) -> Trie:
    if len(data) < len(MAGIC) or bytes(data[:len(MAGIC)]) != MAGIC:
        raise BadMagicError("not a trie file (bad magic)")
    rd = _Reader(data)
    rd.pos = len(MAGIC)
    (version,) = rd.take(struct.Struct("<H"))
    if version != FORMAT_VERSION:
        raise VersionMismatchError(f"trie format version {version}, expected {FORMAT_VERSION}")
    (plen,) = rd.take(_COUNT)
    if plen != _PARAMS.size:
        raise TrieFormatError(f"unexpected params block size {plen}")
    xi, zbar, ibar, qcount, n_nodes = rd.take(_PARAMS)
    (blen,) = rd.take(struct.Struct("<Q"))
    if rd.pos + blen > len(data):
        raise TruncatedTrieError(f"node section declares {blen} bytes, only {len(data) - rd.pos} present")
    body_end = rd.pos + blen
    vec = struct.Struct(f"<I{2 * zbar}Q")
    nodes = []
    for _ in range(n_nodes):
        depth, eta, suffix, n_edges = rd.take(_NODE_HEAD)
        node = TrieNode(depth)
        node.eta = eta
        node.suffix = suffix
        for _ in range(n_edges):
            q, r, child = rd.take(_EDGE)
            node.edges[LearningCell(q, r)] = child
        (n_stats,) = rd.take(_COUNT)
        for _ in range(n_stats):
            q, *rest = rd.take(vec)
            node.stats[q] = (tuple(rest[:zbar]), tuple(rest[zbar:]))
        nodes.append(node)
    if rd.pos != body_end:
        raise TrieFormatError(f"node section is {rd.pos - body_end + blen} bytes, header says {blen}")
    (n_ids,) = rd.take(_COUNT)
    if n_ids not in (0, qcount):
        raise TrieFormatError(f"question id table has {n_ids} entries for {qcount} questions")
    ids = rd.take(struct.Struct(f"<{n_ids}q"))
    if rd.pos != len(data):
        raise TrieFormatError(f"{len(data) - rd.pos} trailing bytes after question id table")
    return Trie(TrieParams(xi, zbar, ibar, qcount), nodes, tuple(ids))
