"""AUC, ACC, relative gain, early stopping and correlation-conflict statistics."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np
from scipy.stats import rankdata

from .dataset import Dataset


class MetricError(ValueError):
    pass


def auc(pairs: Sequence[tuple[float, int]]) -> float:
    """Mann-Whitney AUC: P(score of a positive > score of a negative), ties count 1/2."""
    if len(pairs) == 0:
        raise MetricError("auc of an empty set")
    scores = np.array([p[0] for p in pairs], dtype=np.float64)
    labels = np.array([p[1] for p in pairs], dtype=np.int64)
    n_pos = int(labels.sum())
    n_neg = len(labels) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise MetricError("auc needs both positive and negative labels")
    ranks = rankdata(scores)  # average ranks for ties
    u = ranks[labels == 1].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def acc(pairs: Sequence[tuple[float, int]], threshold: float = 0.5) -> float:
    """Share of samples with ``(score >= threshold) == label``."""
    if len(pairs) == 0:
        raise MetricError("acc of an empty set")
    return sum(int(s >= threshold) == int(r) for s, r in pairs) / len(pairs)


def gain(score_new: float, score_base: float) -> float:
    """Relative error reduction, in percent."""
    if score_base >= 1.0:
        raise MetricError(f"baseline score must be < 1, got {score_base}")
    return 100.0 * (score_new - score_base) / (1.0 - score_base)


@dataclass
class EarlyStopper:
    """Tracks a validation series; ``update`` returns True once training should stop."""

    patience: int = 5
    mode: str = "max"
    best: float | None = None
    best_epoch: int = -1
    epoch: int = -1
    stale: int = 0

    def __post_init__(self) -> None:
        if self.patience < 1:
            raise ValueError("patience must be >= 1")
        if self.mode not in ("max", "min"):
            raise ValueError(f"mode must be 'max' or 'min', got {self.mode!r}")

    def improved(self, score: float) -> bool:
        if self.best is None:
            return True
        return score > self.best if self.mode == "max" else score < self.best

    def update(self, score: float) -> bool:
        self.epoch += 1
        if self.improved(score):
            self.best, self.best_epoch, self.stale = score, self.epoch, 0
        else:
            self.stale += 1
        return self.stale >= self.patience


@dataclass(frozen=True)
class StopDecision:
    stop_epoch: int | None  # 0-based epoch after which training stops, None if never
    best_epoch: int


def early_stop(history: Sequence[float], patience: int, mode: str = "max") -> StopDecision:
    stopper = EarlyStopper(patience, mode)
    for score in history:
        if stopper.update(score):
            return StopDecision(stopper.epoch, stopper.best_epoch)
    return StopDecision(None, stopper.best_epoch)


# ---------------------------------------------------------------------------
# correlation conflicts


@dataclass(frozen=True)
class ConflictInstance:
    student: str
    position: int
    question: int
    response: int


def conflict_triples(ds: Dataset, adjacent: bool = False) -> list[ConflictInstance]:
    """Attempts whose two previous attempts on the same question were both correct.

    With ``adjacent=True`` the two correct answers must be the two cells right
    before the attempt in the global sequence.
    """
    out = []
    for seq in ds.sequences:
        cells = seq.cells
        if adjacent:
            for k in range(2, len(cells)):
                q = cells[k].question
                if cells[k - 1] == (q, 1) and cells[k - 2] == (q, 1):
                    out.append(ConflictInstance(seq.student, k, q, cells[k].response))
            continue
        last: dict[int, list[int]] = {}
        for k, (q, r) in enumerate(cells):
            prev = last.get(q, [])
            if len(prev) >= 2 and prev[-1] == 1 and prev[-2] == 1:
                out.append(ConflictInstance(seq.student, k, q, r))
            last.setdefault(q, []).append(r)
    return out


@dataclass
class ConflictStats:
    n_triples: int
    n_110: int
    n_111: int
    n_interactions: int
    p_110: float
    p_111: float
    p_110_of_all: float
    p_111_of_all: float
    acc_110: float | None = None
    acc_111: float | None = None
    n_scored_110: int = 0
    n_scored_111: int = 0
    instances: list[ConflictInstance] = field(default_factory=list, repr=False)

    def to_json(self) -> dict:
        d = {k: v for k, v in self.__dict__.items() if k != "instances"}
        return d


def conflict_analysis(
    ds: Dataset,
    predictions: Mapping[tuple[str, int], float] | None = None,
    adjacent: bool = False,
    threshold: float = 0.5,
) -> ConflictStats:
    """Count ``11 -> 0`` and ``11 -> 1`` follow-ups; score them if predictions are given.

    ``predictions`` maps ``(student, position)`` to the predicted probability.
    Proportions are reported over conflict triples and over all interactions.
    """
    inst = conflict_triples(ds, adjacent)
    n110 = sum(1 for i in inst if i.response == 0)
    n111 = len(inst) - n110
    total = ds.cell_count
    stats = ConflictStats(
        n_triples=len(inst),
        n_110=n110,
        n_111=n111,
        n_interactions=total,
        p_110=n110 / len(inst) if inst else 0.0,
        p_111=n111 / len(inst) if inst else 0.0,
        p_110_of_all=n110 / total if total else 0.0,
        p_111_of_all=n111 / total if total else 0.0,
        instances=inst,
    )
    if predictions is not None:
        for label in (0, 1):
            scored = [(predictions[(i.student, i.position)], i.response)
                      for i in inst if i.response == label and (i.student, i.position) in predictions]
            value = acc(scored, threshold) if scored else None
            if label == 0:
                stats.acc_110, stats.n_scored_110 = value, len(scored)
            else:
                stats.acc_111, stats.n_scored_111 = value, len(scored)
    return stats
