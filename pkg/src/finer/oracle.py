"""Brute-force FPT extraction straight from the raw sequences.

This is the slow reference path: every query rescans the whole corpus with a
plain sliding window. It shares nothing with the trie except the run
compression rule and the result types.
"""

from __future__ import annotations

from typing import Sequence

from .dataset import Dataset, LearningCell
from .trie import FptQuery, compress_runs


def _corpus(ds: Dataset, xi: int) -> list[list[LearningCell]]:
    return [compress_runs(seq.cells, xi) for seq in ds.sequences]


def _matches(stream: Sequence[LearningCell], pattern: Sequence[LearningCell]) -> list[int]:
    """Start offsets of every contiguous occurrence (all offsets for the empty pattern)."""
    m = len(pattern)
    return [p for p in range(len(stream) - m + 1) if list(stream[p:p + m]) == list(pattern)]


def oracle_fpt(
    ds: Dataset,
    pattern: Sequence[tuple[int, int]],
    target: int,
    zbar: int,
    xi: int,
) -> tuple[int, tuple[int, ...], tuple[int, ...]]:
    """Return ``(len(pattern), totals, corrects)`` for ``target`` after ``pattern``."""
    pattern = [LearningCell(*c) for c in pattern]
    m = len(pattern)
    totals = [0] * zbar
    corrects = [0] * zbar
    for stream in _corpus(ds, xi):
        for p in _matches(stream, pattern):
            for z in range(1, zbar + 1):
                idx = p + m - 1 + z
                if idx < len(stream) and stream[idx].question == target:
                    totals[z - 1] += 1
                    corrects[z - 1] += stream[idx].response
    return m, tuple(totals), tuple(corrects)


def occurs(ds: Dataset, pattern: Sequence[tuple[int, int]], xi: int) -> bool:
    pattern = [LearningCell(*c) for c in pattern]
    return any(_matches(stream, pattern) for stream in _corpus(ds, xi))


def oracle_fetch(
    ds: Dataset,
    stream: Sequence[tuple[int, int]],
    target: int,
    ibar: int,
    zbar: int,
    xi: int,
) -> FptQuery:
    """FPT rows for the compressed ``stream``: row ``i`` is its length-``i+1`` suffix.

    Suffixes that never occur in the corpus (or are longer than the stream) are
    replaced by the empty pattern, reported with length 0.
    """
    comp = compress_runs([LearningCell(*c) for c in stream], xi)
    lengths, F, C = [], [], []
    for i in range(1, ibar + 1):
        suffix = comp[len(comp) - i:] if i <= len(comp) else None
        if suffix is None or not occurs(ds, suffix, xi):
            suffix = []
        length, tot, cor = oracle_fpt(ds, suffix, target, zbar, xi)
        lengths.append(length)
        F.append(tot)
        C.append(cor)
    return FptQuery(target, tuple(lengths), tuple(F), tuple(C))
