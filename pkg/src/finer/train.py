"""Training loop with validation early stopping, plus batch evaluation."""

from __future__ import annotations

import logging
import random
from dataclasses import asdict, dataclass, field
from typing import Callable

import numpy as np

from . import neural as nn
from .dataset import Dataset
from .fusion import Batch, ModelConfig, forward, init_model, loss, make_batch
from .metrics import EarlyStopper, MetricError, acc, auc
from .neural import AdamState, ParamStore
from .trie import Trie, build

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    ibar: int = 2
    zbar: int = 2
    xi: int = 3
    lam: int = 1
    d: int = 16
    d_prime: int = 8
    lr: float = 1e-3
    weight_decay: float = 1e-5
    buckets: int = 32
    max_seq_len: int = 200
    seed: int = 0
    epochs: int = 60
    patience: int = 10
    batch_size: int = 16
    monitor: str = "auc"  # or "loss"
    similarity: bool = True
    use_fpt: bool = True

    def model_config(self, question_count: int) -> ModelConfig:
        return ModelConfig(question_count, self.ibar, self.zbar, self.d, self.d_prime, self.lam,
                           self.buckets, similarity=self.similarity, use_fpt=self.use_fpt)

    def validate(self) -> None:
        for key in ("ibar", "zbar", "xi", "d", "d_prime", "buckets", "max_seq_len", "epochs",
                    "patience", "batch_size"):
            if getattr(self, key) < 1:
                raise ValueError(f"{key} must be positive, got {getattr(self, key)}")
        for key in ("ibar", "zbar"):
            if not 1 <= getattr(self, key) <= 16:
                raise ValueError(f"{key} must lie in [1, 16], got {getattr(self, key)}")
        if self.lam < 0 or self.lr <= 0 or self.weight_decay < 0:
            raise ValueError("lam, lr and weight_decay must be non-negative (lr positive)")
        if self.monitor not in ("auc", "loss"):
            raise ValueError(f"monitor must be 'auc' or 'loss', got {self.monitor!r}")


@dataclass
class EvalResult:
    auc: float | None
    acc: float
    loss: float  # mean per-sample cross-entropy
    n_samples: int
    alpha: np.ndarray = field(repr=False)
    batch: Batch = field(repr=False)

    def predictions(self) -> dict[tuple[str, int], float]:
        return {(s, int(k)): float(a) for s, k, a in zip(self.batch.students, self.batch.sample_pos, self.alpha)}

    def to_json(self) -> dict:
        return {"auc": self.auc, "acc": self.acc, "loss": self.loss, "n_samples": self.n_samples}


@dataclass
class TrainResult:
    store: ParamStore
    model_config: ModelConfig
    trie: Trie
    curve: list[dict]
    best_epoch: int
    initial_loss: float


def _batches(ds: Dataset, trie: Trie, batch_size: int, exclude_self: bool = False) -> list[Batch]:
    seqs = [s for s in ds.sequences if len(s) >= 2]
    return [make_batch(seqs[i:i + batch_size], trie, ds.question_count, exclude_self=exclude_self)
            for i in range(0, len(seqs), batch_size)]


def evaluate(store: ParamStore, cfg: ModelConfig, ds: Dataset, trie: Trie, batch_size: int = 64) -> EvalResult:
    alphas, labels, merged = [], [], []
    for b in _batches(ds, trie, batch_size):
        alphas.append(forward(store, cfg, b).alpha.data)
        labels.append(b.labels)
        merged.append(b)
    if not alphas:
        raise ValueError("nothing to evaluate: every sequence has fewer than 2 cells")
    alpha = np.concatenate(alphas)
    y = np.concatenate(labels)
    a = np.clip(alpha, 1e-7, 1 - 1e-7)
    ce = float(-np.mean(y * np.log(a) + (1 - y) * np.log(1 - a)))
    pairs = list(zip(alpha.tolist(), y.astype(int).tolist()))
    try:
        auc_v = auc(pairs)
    except MetricError:
        auc_v = None
    batch = Batch(
        cells=np.zeros((0, 1), dtype=np.int64), seq_len=np.zeros(0, dtype=np.int64),
        sample_seq=np.concatenate([b.sample_seq for b in merged]),
        sample_pos=np.concatenate([b.sample_pos for b in merged]),
        targets=np.concatenate([b.targets for b in merged]), labels=y,
        lengths=np.concatenate([b.lengths for b in merged]),
        F=np.concatenate([b.F for b in merged]), P=np.concatenate([b.P for b in merged]),
        students=[s for b in merged for s in b.students],
    )
    return EvalResult(auc_v, acc(pairs), ce, len(y), alpha, batch)


def train(
    train_ds: Dataset,
    val_ds: Dataset | None,
    cfg: TrainConfig,
    trie: Trie | None = None,
    on_epoch: Callable[[int, ParamStore, ModelConfig], None] | None = None,
) -> TrainResult:
    """Fit the model on ``train_ds``; FPTs come from a trie over ``train_ds`` only.

    ``on_epoch(epoch, store, model_config)`` is called after every epoch with
    the live (not the best) parameters.
    """
    cfg.validate()
    if trie is None:
        trie = build(train_ds, cfg.xi, cfg.zbar, cfg.ibar)
    mcfg = cfg.model_config(train_ds.question_count)
    store = init_model(mcfg, cfg.seed)
    adam = AdamState(lr=cfg.lr)
    # training FPTs leave the sample's own sequence out, as they would be at test time
    batches = _batches(train_ds, trie, cfg.batch_size, exclude_self=True)
    if not batches:
        raise ValueError("training set has no sequence with at least 2 cells")
    n_samples = sum(len(b) for b in batches)
    rng = random.Random(cfg.seed)
    stopper = EarlyStopper(cfg.patience, "max" if cfg.monitor == "auc" else "min")
    best_state = store.state_dict()
    curve: list[dict] = []

    initial = sum(loss(forward(store, mcfg, b).alpha, b.labels).item() for b in batches) / n_samples
    for epoch in range(cfg.epochs):
        order = list(range(len(batches)))
        rng.shuffle(order)
        total = 0.0
        for i in order:
            b = batches[i]
            out = forward(store, mcfg, b)
            ce = loss(out.alpha, b.labels)
            objective = nn.add(ce, nn.mul(store.squared_norm(), cfg.weight_decay)) if cfg.weight_decay else ce
            objective.backward()
            nn.adam_step(store, adam)
            total += ce.item()
        row = {"epoch": epoch + 1, "train_loss": total / n_samples}
        if val_ds is not None and val_ds.sequences:
            ev = evaluate(store, mcfg, val_ds, trie)
            row.update(val_auc=ev.auc, val_acc=ev.acc, val_loss=ev.loss)
            score = ev.loss if cfg.monitor == "loss" or ev.auc is None else ev.auc
            stop = stopper.update(score)
            if stopper.best_epoch == stopper.epoch:
                best_state = store.state_dict()
        else:
            stop = False
            best_state = store.state_dict()
        curve.append(row)
        if on_epoch is not None:
            on_epoch(epoch + 1, store, mcfg)
        log.info("epoch %d %s", epoch + 1, {k: round(v, 5) for k, v in row.items() if isinstance(v, float)})
        if stop:
            break
    store.load_state_dict(best_state)
    best = stopper.best_epoch + 1 if val_ds is not None and val_ds.sequences else len(curve)
    return TrainResult(store, mcfg, trie, curve, best, initial)


def config_dict(cfg: TrainConfig) -> dict:
    return asdict(cfg)
