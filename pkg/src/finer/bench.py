"""Fetch latency of the trie cursor against the brute-force rescan."""

from __future__ import annotations

import gc
import random
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass

from .dataset import Dataset, LearningCell
from .oracle import oracle_fetch
from .trie import Trie, advance, build, new_state, query


@dataclass
class BenchResult:
    mode: str
    corpus_cells: int
    queries: int
    seconds: float
    seconds_per_query: float
    mean_hops: float | None
    max_hops: int | None
    threads: int
    build_seconds: float

    def to_json(self) -> dict:
        return asdict(self)


def query_stream(ds: Dataset, n: int, seed: int = 0) -> list[tuple[LearningCell, int]]:
    """``n`` (cell, next target) pairs replayed from randomly chosen students.

    Students are concatenated end to end, which is harmless for timing: the
    cursor only looks ``ibar`` cells back.
    """
    rng = random.Random(seed)
    seqs = [s for s in ds.sequences if len(s) >= 2]
    if not seqs:
        raise ValueError("no sequence with at least 2 cells to replay")
    out: list[tuple[LearningCell, int]] = []
    while len(out) < n:
        cells = rng.choice(seqs).cells
        out.extend((cells[k], cells[k + 1].question) for k in range(len(cells) - 1))
    return out[:n]


class _NoGC:
    """Pause the cyclic collector while timing, as ``timeit`` does.

    Otherwise a collection triggered inside the loop scans every live object,
    and the measurement depends on whatever else the process holds.
    """

    def __enter__(self):
        self.was_enabled = gc.isenabled()
        gc.disable()

    def __exit__(self, *exc):
        if self.was_enabled:
            gc.enable()


def _run_trie(trie: Trie, stream: list[tuple[LearningCell, int]]) -> tuple[float, int, int]:
    state = new_state(trie)
    worst = 0
    t0 = time.perf_counter()
    for cell, target in stream:
        before = state.hops
        state = advance(trie, state, cell)
        query(trie, state, target)
        worst = max(worst, state.hops - before)
    return time.perf_counter() - t0, state.hops, worst


def bench_trie(ds: Dataset, queries: int, trie: Trie | None = None, seed: int = 0, threads: int = 1,
               xi: int = 3, zbar: int = 2, ibar: int = 2, repeats: int = 3) -> BenchResult:
    """Stream ``queries`` fetches through the trie.

    With several threads each one replays its own share of the stream against
    the same (read-only) trie. The reported time is the fastest of ``repeats``
    runs.
    """
    t0 = time.perf_counter()
    if trie is None:
        trie = build(ds, xi, zbar, ibar)
    build_s = time.perf_counter() - t0
    stream = query_stream(ds, queries, seed)
    chunks = [stream[i::threads] for i in range(threads)]
    _run_trie(trie, stream[:1000])  # warm caches before timing
    best = None
    for _ in range(max(1, repeats)):
        with _NoGC():
            t0 = time.perf_counter()
            if threads == 1:
                results = [_run_trie(trie, stream)]
            else:
                with ThreadPoolExecutor(threads) as pool:
                    results = list(pool.map(lambda c: _run_trie(trie, c), chunks))
            elapsed = time.perf_counter() - t0
        if best is None or elapsed < best[0]:
            best = (elapsed, results)
    elapsed, results = best
    hops = sum(r[1] for r in results)
    return BenchResult("trie", ds.cell_count, queries, elapsed, elapsed / queries,
                       hops / queries, max(r[2] for r in results), threads, build_s)


def bench_oracle(ds: Dataset, queries: int, seed: int = 0, xi: int = 3, zbar: int = 2, ibar: int = 2) -> BenchResult:
    """Answer the same kind of stream by rescanning the corpus for every query."""
    stream = query_stream(ds, queries, seed)
    oracle_fetch(ds, stream[0][:1], stream[0][1], ibar, zbar, xi)  # warm-up
    window: list[LearningCell] = []
    tail = ibar * (xi + 1)  # enough raw cells to fix the last ibar compressed ones
    with _NoGC():
        t0 = time.perf_counter()
        for cell, target in stream:
            window = (window + [cell])[-tail:]
            oracle_fetch(ds, window, target, ibar, zbar, xi)
        elapsed = time.perf_counter() - t0
    return BenchResult("oracle", ds.cell_count, queries, elapsed, elapsed / queries, None, None, 1, 0.0)
