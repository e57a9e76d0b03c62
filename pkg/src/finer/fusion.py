"""History encoding, tensor fusion with aggregated FPTs, prediction and loss.

The forward pass is batched over prediction points. A :class:`Batch` holds a
padded block of sequences (for the history LSTM, run once per sequence) and a
flat list of samples ``(sequence, position, target, label)`` whose history is
the first ``position`` cells of their sequence.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from . import neural as nn
from .aggregation import AggregationConfig, AggregationOutput, aggregate_fpts, init_aggregation, query_arrays
from .dataset import Dataset, LearningCell, LearningSequence
from .neural import ParamStore, Tensor
from .trie import FptQuery, Trie, advance, build, new_state, query, query_excluding

ALPHA_EPS = 1e-7


@dataclass(frozen=True)
class ModelConfig:
    question_count: int
    ibar: int = 2
    zbar: int = 2
    d: int = 16
    d_prime: int = 8
    lam: int = 1
    buckets: int = 32
    d_omega: int = 8
    conf_hidden: int = 8
    pred_hidden: int = 16
    similarity: bool = True
    use_fpt: bool = True

    @property
    def aggregation(self) -> AggregationConfig:
        return AggregationConfig(self.ibar, self.zbar, self.d, self.lam, self.buckets,
                                 self.d_omega, self.conf_hidden, self.similarity)

    def to_dict(self) -> dict:
        return asdict(self)


def init_model(cfg: ModelConfig, seed: int = 0) -> ParamStore:
    store = ParamStore(seed=seed)
    d, nq = cfg.d, cfg.question_count
    store.add("cell_emb", (2 * nq, d), fan_in=2 * nq)
    store.add("q_emb", (nq, d), fan_in=nq)
    nn.init_lstm(store, "hist", d, d)
    store.add("W_k", (d, d + 1, d + 1), fan_in=(d + 1) ** 2)
    store.add("b_k", (d,), init="zeros")
    nn.init_lstm(store, "temp", d, d)
    nn.init_mlp(store, "reduce", [d, cfg.d_prime])
    nn.init_mlp(store, "pred", [cfg.d_prime + d, cfg.pred_hidden, 1])
    init_aggregation(store, cfg.aggregation)
    return store


def cell_index(cell: LearningCell) -> int:
    return 2 * cell.question + cell.response


@dataclass
class Batch:
    cells: np.ndarray          # (S, L) padded cell indices
    seq_len: np.ndarray        # (S,)
    sample_seq: np.ndarray     # (N,)
    sample_pos: np.ndarray     # (N,) history length of each sample
    targets: np.ndarray        # (N,)
    labels: np.ndarray         # (N,) float, NaN when unknown
    lengths: np.ndarray        # (N, ibar)
    F: np.ndarray              # (N, ibar, zbar)
    P: np.ndarray              # (N, ibar, zbar)
    students: list[str] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.targets)


def _pad(histories: Sequence[Sequence[LearningCell]], question_count: int) -> tuple[np.ndarray, np.ndarray]:
    L = max((len(h) for h in histories), default=0)
    cells = np.zeros((len(histories), max(L, 1)), dtype=np.int64)
    for s, h in enumerate(histories):
        for k, c in enumerate(h):
            if not 0 <= c.question < question_count:
                raise IndexError(f"question {c.question} outside [0, {question_count})")
            cells[s, k] = cell_index(c)
    return cells, np.array([len(h) for h in histories], dtype=np.int64)


def make_batch(
    sequences: Sequence[LearningSequence],
    trie: Trie,
    question_count: int,
    skip_first: bool = True,
    exclude_self: bool = False,
) -> Batch:
    """Every position of every sequence becomes a next-answer sample.

    FPT rows are produced by replaying each sequence through the trie's
    streaming cursor, exactly as they would arrive online. With
    ``exclude_self`` the sequences are assumed to be inside ``trie`` and their
    own counts are removed first, so a training sample never sees its own
    future answers.
    """
    cells, seq_len = _pad([s.cells for s in sequences], question_count)
    sseq, spos, tg, lab, queries, students = [], [], [], [], [], []
    p = trie.params
    for s, seq in enumerate(sequences):
        state = new_state(trie)
        if exclude_self:
            own = build(Dataset(trie.params.question_count, (seq,)), p.xi, p.zbar, p.ibar)
            recent: list[LearningCell] = []
            prev, run = None, 0
        for k, cell in enumerate(seq.cells):
            if k >= 1 or not skip_first:
                sseq.append(s)
                spos.append(k)
                tg.append(cell.question)
                lab.append(float(cell.response))
                if exclude_self:
                    queries.append(query_excluding(trie, own, recent, cell.question))
                else:
                    queries.append(query(trie, state, cell.question))
                students.append(seq.student)
            if exclude_self:
                run = run + 1 if cell == prev else 1
                prev = cell
                if run <= p.xi:
                    recent = (recent + [cell])[-p.ibar:]
            else:
                state = advance(trie, state, cell)
    lengths, F, P = _query_block(queries, trie.params.ibar, trie.params.zbar)
    return Batch(cells, seq_len, np.array(sseq, dtype=np.int64), np.array(spos, dtype=np.int64),
                 np.array(tg, dtype=np.int64), np.array(lab), lengths, F, P, students)


def _query_block(queries: Sequence[FptQuery], ibar: int, zbar: int):
    if not queries:
        return (np.zeros((0, ibar), dtype=np.int64), np.zeros((0, ibar, zbar)), np.zeros((0, ibar, zbar)))
    return query_arrays(queries)


def single_batch(
    history: Sequence[LearningCell], q: FptQuery, target: int, question_count: int, label: float = float("nan")
) -> Batch:
    cells, seq_len = _pad([history], question_count)
    lengths, F, P = query_arrays([q])
    return Batch(cells, seq_len, np.array([0]), np.array([len(history)]), np.array([target]),
                 np.array([label]), lengths, F, P, ["?"])


# ---------------------------------------------------------------------------
# forward pieces


def encode_history(store: ParamStore, batch: Batch) -> Tensor:
    """History vector ``H`` for each sample: the LSTM state after its prefix.

    The LSTM is run once over each padded sequence; a sample with history
    length ``k`` takes hidden state ``k`` (state 0 is the zero vector).
    """
    S, L = batch.cells.shape
    d = store["cell_emb"].shape[1]
    upto = int(batch.sample_pos.max()) if len(batch) else 0
    inputs = [nn.take(store["cell_emb"], batch.cells[:, t]) for t in range(min(upto, L))]
    _, hiddens = nn.lstm_forward(store, "hist", inputs, batch=(S,))
    states = nn.stack([Tensor(np.zeros((S, d)))] + hiddens, axis=1)      # (S, upto+1, d)
    flat = nn.reshape(states, (S * (len(hiddens) + 1), d))
    return nn.take(flat, batch.sample_seq * (len(hiddens) + 1) + batch.sample_pos)


def augment(x: Tensor) -> Tensor:
    return nn.concat([x, Tensor(np.ones(x.shape[:-1] + (1,)))], axis=-1)


def tensor_fuse(H: Tensor, T_z: Tensor, store: ParamStore) -> Tensor:
    """``K_z = ReLU(W_k . ([H,1] outer [T_z,1]) + b_k)`` for a batch of rows."""
    W = store["W_k"]
    d = W.shape[0]
    K_hat = nn.outer_product(augment(H), augment(T_z))                    # (N, d+1, d+1)
    n = K_hat.shape[0]
    W_flat = nn.transpose(nn.reshape(W, (d, (d + 1) ** 2)))               # ((d+1)^2, d)
    return nn.relu(nn.add(nn.matmul(nn.reshape(K_hat, (n, (d + 1) ** 2)), W_flat), store["b_k"]))


@dataclass
class ForwardOutput:
    alpha: Tensor
    aggregation: AggregationOutput
    H: Tensor
    K: list[Tensor]


def forward(store: ParamStore, cfg: ModelConfig, batch: Batch) -> ForwardOutput:
    lengths, F, P = batch.lengths, batch.F, batch.P
    if not cfg.use_fpt:
        lengths, F, P = np.zeros_like(lengths), np.zeros_like(F), np.zeros_like(P)
    agg = aggregate_fpts(lengths, F, P, store, cfg.aggregation)
    H = encode_history(store, batch)
    K = [tensor_fuse(H, agg.T[:, z, :], store) for z in range(cfg.zbar)]
    h, _ = nn.lstm_forward(store, "temp", K)
    e_k = nn.mlp_forward(store, "reduce", h)
    e_q = nn.take(store["q_emb"], batch.targets)
    logit = nn.mlp_forward(store, "pred", nn.concat([e_k, e_q], axis=-1))
    alpha = nn.sigmoid(nn.reshape(logit, (len(batch),)))
    return ForwardOutput(alpha, agg, H, K)


def predict(
    store: ParamStore,
    cfg: ModelConfig,
    history: Sequence[LearningCell],
    q: FptQuery,
    target: int,
) -> float:
    """Probability of a correct answer to ``target`` after ``history``."""
    if not 0 <= target < cfg.question_count:
        raise IndexError(f"target {target} outside [0, {cfg.question_count})")
    return forward(store, cfg, single_batch(history, q, target, cfg.question_count)).alpha.item()


def loss(alpha: Tensor, labels: np.ndarray, store: ParamStore | None = None, weight_decay: float = 0.0) -> Tensor:
    """Summed binary cross-entropy plus ``weight_decay * |theta|^2``."""
    labels = np.asarray(labels, dtype=np.float64)
    if labels.size == 0:
        raise ValueError("loss of an empty batch")
    a = nn.clip(alpha, ALPHA_EPS, 1.0 - ALPHA_EPS)
    ce = nn.add(nn.mul(nn.log(a), labels), nn.mul(nn.log(nn.sub(1.0, a)), 1.0 - labels))
    total = nn.mul(nn.sum(ce), -1.0)
    if store is not None and weight_decay:
        total = nn.add(total, nn.mul(store.squared_norm(), weight_decay))
    return total
