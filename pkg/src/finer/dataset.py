"""Learning-sequence data: CSV ingestion, splitting and a synthetic generator."""

from __future__ import annotations

import csv
import io
import math
import random
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple, Sequence

HEADER = ("student_id", "question_id", "correct")


class DatasetError(ValueError):
    """Raised for malformed or unusable input data."""


class LearningCell(NamedTuple):
    question: int
    response: int


@dataclass(frozen=True)
class LearningSequence:
    student: str
    cells: tuple[LearningCell, ...]

    def __len__(self) -> int:
        return len(self.cells)


@dataclass(frozen=True)
class Dataset:
    """A set of chronological learning sequences over ``question_count`` questions.

    ``question_ids`` maps a dense question index back to the identifier used in
    the source file; it is empty when questions were never densified (synthetic
    data), in which case the index is the identifier.
    """

    question_count: int
    sequences: tuple[LearningSequence, ...]
    question_ids: tuple[int, ...] = field(default=())

    def __post_init__(self) -> None:
        for seq in self.sequences:
            for cell in seq.cells:
                if not 0 <= cell.question < self.question_count:
                    raise DatasetError(
                        f"student {seq.student}: question {cell.question} outside "
                        f"[0, {self.question_count})"
                    )
                if cell.response not in (0, 1):
                    raise DatasetError(f"student {seq.student}: response {cell.response} not in {{0,1}}")

    @property
    def cell_count(self) -> int:
        return sum(len(s) for s in self.sequences)

    def original_question(self, index: int) -> int:
        return self.question_ids[index] if self.question_ids else index

    def by_student(self) -> dict[str, LearningSequence]:
        return {s.student: s for s in self.sequences}


def make_dataset(
    sequences: Sequence[Sequence[tuple[int, int]]],
    question_count: int | None = None,
    students: Sequence[str] | None = None,
) -> Dataset:
    """Convenience constructor from nested ``(question, response)`` lists."""
    if students is None:
        students = [f"s{i}" for i in range(len(sequences))]
    seqs = tuple(
        LearningSequence(str(sid), tuple(LearningCell(int(q), int(r)) for q, r in cells))
        for sid, cells in zip(students, sequences)
    )
    if question_count is None:
        question_count = 1 + max((c.question for s in seqs for c in s.cells), default=-1)
    return Dataset(question_count, seqs)


def _parse_lines(lines: io.TextIOBase, source: str, question_ids: Sequence[int] | None = None) -> Dataset:
    reader = csv.reader(lines)
    try:
        header = next(reader)
    except StopIteration:
        raise DatasetError(f"{source}: empty file") from None
    if tuple(h.strip() for h in header) != HEADER:
        raise DatasetError(f"{source}: line 1: expected header {','.join(HEADER)!r}, got {','.join(header)!r}")

    fixed = question_ids is not None
    index_of: dict[int, int] = {q: i for i, q in enumerate(question_ids or ())}
    order: list[str] = []
    cells: dict[str, list[LearningCell]] = {}
    for lineno, row in enumerate(reader, start=2):
        if not row or (len(row) == 1 and not row[0].strip()):
            continue
        if len(row) != 3:
            raise DatasetError(f"{source}: line {lineno}: expected 3 fields, got {len(row)}")
        sid, qraw, rraw = (f.strip() for f in row)
        try:
            qid = int(qraw)
            resp = int(rraw)
        except ValueError:
            raise DatasetError(f"{source}: line {lineno}: non-integer field in {row!r}") from None
        if resp not in (0, 1):
            raise DatasetError(f"{source}: line {lineno}: correct must be 0 or 1, got {resp}")
        if not sid:
            raise DatasetError(f"{source}: line {lineno}: empty student_id")
        if fixed and qid not in index_of:
            raise DatasetError(f"{source}: line {lineno}: question {qid} is not in the known question set")
        q = index_of.setdefault(qid, len(index_of))
        if sid not in cells:
            cells[sid] = []
            order.append(sid)
        cells[sid].append(LearningCell(q, resp))

    if not order:
        raise DatasetError(f"{source}: no data rows")
    seqs = tuple(LearningSequence(sid, tuple(cells[sid])) for sid in order)
    return Dataset(len(index_of), seqs, tuple(index_of))


def parse_csv(path: str | Path, question_ids: Sequence[int] | None = None) -> Dataset:
    """Read ``student_id,question_id,correct`` rows into a :class:`Dataset`.

    Question identifiers are densified to ``[0, |O|)`` in first-seen order;
    rows of one student are kept in file order. Passing ``question_ids`` (for
    instance those of a training set) fixes the dense order instead, and any
    other identifier becomes an error.
    """
    path = Path(path)
    if not path.is_file():
        raise DatasetError(f"{path}: no such file")
    with path.open(newline="", encoding="utf-8") as fh:
        return _parse_lines(fh, str(path), question_ids)


def parse_csv_text(text: str, source: str = "<string>", question_ids: Sequence[int] | None = None) -> Dataset:
    return _parse_lines(io.StringIO(text, newline=""), source, question_ids)


def to_csv_text(ds: Dataset) -> str:
    buf = io.StringIO(newline="")
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(HEADER)
    for seq in ds.sequences:
        for cell in seq.cells:
            writer.writerow((seq.student, ds.original_question(cell.question), cell.response))
    return buf.getvalue()


def write_csv(ds: Dataset, path: str | Path) -> None:
    Path(path).write_text(to_csv_text(ds), encoding="utf-8")


def split_long_sequences(ds: Dataset, max_len: int = 200) -> Dataset:
    """Cut every sequence into consecutive chunks of at most ``max_len`` cells.

    A sequence that needs several chunks yields students ``<id>#0``, ``<id>#1``, ...;
    sequences already short enough keep their identifier.
    """
    if max_len < 1:
        raise DatasetError(f"max_len must be >= 1, got {max_len}")
    out: list[LearningSequence] = []
    for seq in ds.sequences:
        n = len(seq.cells)
        if n <= max_len:
            out.append(seq)
            continue
        for j in range(math.ceil(n / max_len)):
            out.append(LearningSequence(f"{seq.student}#{j}", seq.cells[j * max_len:(j + 1) * max_len]))
    return Dataset(ds.question_count, tuple(out), ds.question_ids)


def train_val_test_split(
    ds: Dataset, ratios: tuple[float, float, float] = (0.6, 0.2, 0.2), seed: int = 0
) -> tuple[Dataset, Dataset, Dataset]:
    """Partition whole sequences into train/validation/test sets.

    Validation and test get ``floor(r * N)`` sequences each; the remainder goes
    to training.
    """
    if len(ratios) != 3 or abs(sum(ratios) - 1.0) > 1e-9 or min(ratios) < 0:
        raise DatasetError(f"ratios must be three non-negative values summing to 1, got {ratios}")
    n = len(ds.sequences)
    if n < 3:
        raise DatasetError(f"need at least 3 sequences to split, got {n}")
    order = list(range(n))
    random.Random(seed).shuffle(order)
    n_val = math.floor(ratios[1] * n + 1e-9)
    n_test = math.floor(ratios[2] * n + 1e-9)
    n_train = n - n_val - n_test

    def subset(idx: list[int]) -> Dataset:
        return Dataset(ds.question_count, tuple(ds.sequences[i] for i in sorted(idx)), ds.question_ids)

    return (
        subset(order[:n_train]),
        subset(order[n_train:n_train + n_val]),
        subset(order[n_train + n_val:]),
    )


# ---------------------------------------------------------------------------
# synthetic correlation-conflict data


@dataclass(frozen=True)
class SynthConfig:
    """Knobs for :func:`synth_generate`.

    The question space is carved into three pools: ``signals`` strategy
    questions, ``targets`` block questions, and the remaining filler questions.
    """

    students: int = 400
    questions: int = 60
    seq_len: int = 24
    scenario2_fraction: float = 0.5
    seed: int = 0
    signals: int = 4
    targets: int = 24
    follow_prob: float = 0.95
    filler_correct: float = 0.75
    blocks: int = 2  # conflict blocks per scenario-I student; scenario-II students get one


@dataclass(frozen=True)
class SynthLayout:
    """Per-question roles chosen by the generator (kept for analysis and tests)."""

    signal_questions: tuple[int, ...]
    target_questions: tuple[int, ...]
    filler_questions: tuple[int, ...]
    # target question -> (signal cell preceding scenario I, signal cell preceding scenario II)
    signal_of: dict[int, tuple[LearningCell, LearningCell]]


def synth_layout(cfg: SynthConfig) -> SynthLayout:
    if cfg.students <= 0 or cfg.questions <= 0:
        raise DatasetError("students and questions must be positive")
    if not 0.0 <= cfg.scenario2_fraction <= 1.0:
        raise DatasetError(f"scenario2_fraction must lie in [0,1], got {cfg.scenario2_fraction}")
    if cfg.signals < 2 or cfg.targets < 1:
        raise DatasetError("need at least 2 signal questions and 1 target question")
    n_filler = cfg.questions - cfg.signals - cfg.targets
    if n_filler < 1:
        raise DatasetError(
            f"questions={cfg.questions} too small for {cfg.signals} signal and {cfg.targets} target questions"
        )
    if cfg.blocks < 1 or cfg.blocks > cfg.targets:
        raise DatasetError(f"blocks must lie in [1, targets={cfg.targets}], got {cfg.blocks}")
    if cfg.seq_len < 4 * cfg.blocks + 1:
        raise DatasetError(f"seq_len must be at least {4 * cfg.blocks + 1} ({cfg.blocks} blocks plus a filler cell)")
    rng = random.Random(cfg.seed)
    perm = list(range(cfg.questions))
    rng.shuffle(perm)
    sig = tuple(perm[:cfg.signals])
    tgt = tuple(perm[cfg.signals:cfg.signals + cfg.targets])
    fil = tuple(perm[cfg.signals + cfg.targets:])
    signal_of = {}
    for q in tgt:
        a, b = rng.sample(sig, 2)
        signal_of[q] = (LearningCell(a, 1), LearningCell(b, 1))
    return SynthLayout(sig, tgt, fil, signal_of)


def synth_generate(cfg: SynthConfig) -> Dataset:
    """Generate students whose identical recent patterns diverge by scenario.

    A conflict block on a target question ``q`` reads
    ``(q,1), (q,1), w, (q, r)``. The prefix ``(q,1),(q,1)`` is shared by
    everyone; the strategy cell ``w`` depends on the student's scenario and on
    ``q`` (the same ``w`` can mean scenario I for one question and scenario II
    for another). Scenario I answers ``r = 1`` with ``follow_prob``, scenario
    II answers ``r = 0`` with ``follow_prob``. Scenario-I students carry
    ``blocks`` blocks on distinct targets, scenario-II students carry one, so
    with an even mix "11 -> 1" is the common outcome, as in real logs.
    Scenario-II students also get ``blocks - 1`` decoys ``(q,1), (q,1), w``
    with no third attempt, so both scenarios show the same number of block
    openings. Filler cells surround the blocks; a filler question is never
    attempted more than twice per student, so blocks hold every "11"
    follow-up.
    """
    layout = synth_layout(cfg)
    rng = random.Random(cfg.seed * 1_000_003 + 17)
    seqs = []
    for s in range(cfg.students):
        scenario2 = rng.random() < cfg.scenario2_fraction
        n_blocks = 1 if scenario2 else cfg.blocks
        n_decoys = cfg.blocks - 1 if scenario2 else 0
        n_fill = cfg.seq_len - 4 * n_blocks - 3 * n_decoys
        if n_fill > 2 * len(layout.filler_questions):
            raise DatasetError(
                f"seq_len={cfg.seq_len} needs at least {(n_fill + 1) // 2} filler questions, "
                f"have {len(layout.filler_questions)}"
            )
        blocks = []
        for k, q in enumerate(rng.sample(layout.target_questions, n_blocks + n_decoys)):
            signal = layout.signal_of[q][1 if scenario2 else 0]
            block = [LearningCell(q, 1), LearningCell(q, 1), signal]
            if k < n_blocks:
                follow = rng.random() < cfg.follow_prob
                r = (0 if follow else 1) if scenario2 else (1 if follow else 0)
                block.append(LearningCell(q, r))
            blocks.append(block)
        rng.shuffle(blocks)

        used: dict[int, int] = {}
        filler = []
        for _ in range(n_fill):
            while True:
                fq = rng.choice(layout.filler_questions)
                if used.get(fq, 0) < 2:
                    break
            used[fq] = used.get(fq, 0) + 1
            filler.append(LearningCell(fq, int(rng.random() < cfg.filler_correct)))
        cuts = sorted(rng.randint(0, n_fill) for _ in blocks)
        cells, prev = [], 0
        for cut, block in zip(cuts, blocks):
            cells += filler[prev:cut] + block
            prev = cut
        cells += filler[prev:]
        seqs.append(LearningSequence(f"u{s}", tuple(cells)))
    return Dataset(cfg.questions, tuple(seqs))
