"""Embed the fetched FPT rows and pool them with similarity-aware attention.

All functions work on a leading batch axis ``N`` (one entry per prediction
point): ``lengths`` is ``(N, ibar)``, ``F`` and ``P`` are ``(N, ibar, zbar)``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import neural as nn
from .neural import ParamStore, Tensor
from .trie import FptQuery


@dataclass(frozen=True)
class AggregationConfig:
    ibar: int = 2
    zbar: int = 2
    d: int = 16
    lam: int = 1
    buckets: int = 32
    d_omega: int = 8
    conf_hidden: int = 8
    similarity: bool = True  # False drops the DTW term (frequency-only attention)


@dataclass
class AggregationOutput:
    T: Tensor        # (N, zbar, d)
    att: Tensor      # (N, ibar, zbar)
    D: Tensor | None  # (N, ibar, ibar, zbar, zbar)
    e_omega: Tensor  # (N, ibar, zbar)
    T_hat: Tensor    # (N, ibar, zbar, d)


def init_aggregation(store: ParamStore, cfg: AggregationConfig, prefix: str = "agg") -> None:
    store.add(f"{prefix}.W_l", (cfg.ibar + 1, cfg.d), fan_in=cfg.ibar + 1)
    store.add(f"{prefix}.W_omega", (cfg.buckets, cfg.d_omega), fan_in=cfg.buckets)
    nn.init_mlp(store, f"{prefix}.conf", [cfg.d_omega, cfg.conf_hidden, 1])


def query_arrays(queries: Sequence[FptQuery]) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Stack queries into ``(lengths, F, P)`` arrays."""
    lengths = np.array([q.lengths for q in queries], dtype=np.int64)
    F = np.array([q.F for q in queries], dtype=np.float64)
    P = np.array([q.P for q in queries], dtype=np.float64)
    return lengths, F, P


def embed_fpts(lengths: np.ndarray, P: np.ndarray, store: ParamStore, prefix: str = "agg") -> Tensor:
    """``T_hat[n, i, z, :] = P[n, i, z] * W_l[lengths[n, i]]``."""
    e_l = nn.take(store[f"{prefix}.W_l"], lengths)            # (N, ibar, d)
    n, ibar, d = e_l.shape
    zbar = P.shape[-1]
    return nn.mul(Tensor(P.reshape(n, ibar, zbar, 1)), nn.reshape(e_l, (n, ibar, 1, d)))


def cosine_matrix(T_hat: Tensor) -> Tensor:
    """Pairwise cosines ``C[n, i, i', z, z'] = cos(T_hat[n,i,z], T_hat[n,i',z'])``."""
    n, ibar, zbar, d = T_hat.shape
    U = nn.reshape(nn.safe_normalize(T_hat), (n, ibar * zbar, d))
    G = nn.matmul(U, nn.transpose(U, (0, 2, 1)))              # (N, ibar*zbar, ibar*zbar)
    G = nn.reshape(G, (n, ibar, zbar, ibar, zbar))
    return nn.transpose(G, (0, 1, 3, 2, 4))


def dtw_from_cosines(C: Tensor) -> Tensor:
    """Maximising DTW over the last two axes of a cosine grid.

    ``D(z, z') = C(z, z') + max(D(z-1, z'-1), D(z, z'-1), D(z-1, z'))`` with
    ``D(0, 0) = 0`` and minus infinity on the other borders. Ties send the
    gradient to the first candidate in that order.
    """
    Z1, Z2 = C.shape[-2], C.shape[-1]
    cells: list[list[Tensor]] = [[None] * Z2 for _ in range(Z1)]  # type: ignore[list-item]
    for z in range(Z1):
        for w in range(Z2):
            c = C[..., z, w]
            if z == 0 and w == 0:
                cells[z][w] = c
            elif z == 0:
                cells[z][w] = nn.add(c, cells[z][w - 1])
            elif w == 0:
                cells[z][w] = nn.add(c, cells[z - 1][w])
            else:
                best = nn.maximum(nn.maximum(cells[z - 1][w - 1], cells[z][w - 1]), cells[z - 1][w])
                cells[z][w] = nn.add(c, best)
    rows = [nn.stack(row, axis=-1) for row in cells]
    return nn.stack(rows, axis=-2)


def dtw_similarity(A: Tensor, B: Tensor) -> Tensor:
    """DTW similarity matrix between two ``(zbar, d)`` trend embeddings."""
    A, B = nn.as_tensor(A), nn.as_tensor(B)
    C = nn.matmul(nn.safe_normalize(A), nn.transpose(nn.safe_normalize(B)))
    return dtw_from_cosines(C)


def similarity_tensor(T_hat: Tensor) -> Tensor:
    return dtw_from_cosines(cosine_matrix(T_hat))


def frequency_buckets(F: np.ndarray, buckets: int = 32) -> np.ndarray:
    """``clamp(floor(log2(10 F)), 0, buckets - 1)``, with ``F = 0`` in bucket 0."""
    F = np.asarray(F, dtype=np.float64)
    scaled = 10.0 * F
    _, exp = np.frexp(np.where(scaled > 0, scaled, 1.0))
    b = np.where(scaled >= 1.0, exp - 1, 0)
    return np.clip(b, 0, buckets - 1).astype(np.int64)


def confidence(F: np.ndarray, store: ParamStore, buckets: int = 32, prefix: str = "agg") -> Tensor:
    """Per-row, per-attempt confidence in (0, 1) from log-bucketed frequencies."""
    b = frequency_buckets(F, buckets)
    emb = nn.take(store[f"{prefix}.W_omega"], b)               # (N, ibar, zbar, d_omega)
    score = nn.mlp_forward(store, f"{prefix}.conf", emb)       # (N, ibar, zbar, 1)
    return nn.sigmoid(nn.reshape(score, b.shape))


def neighbourhood(ibar: int, lam: int) -> np.ndarray:
    idx = np.arange(ibar)
    return (np.abs(idx[:, None] - idx[None, :]) <= lam).astype(np.float64)


def attention(D: Tensor, e_omega: Tensor, lam: int) -> Tensor:
    """``att_i = 1/(2 lam + 1) * sum_{|i'-i| <= lam} e_omega[i'] @ D[i, i']``.

    Neighbours outside ``[0, ibar)`` are simply absent; the normaliser stays
    ``2 lam + 1``.
    """
    if lam < 0:
        raise ValueError(f"lam must be >= 0, got {lam}")
    n, ibar, zbar = e_omega.shape
    weighted = nn.mul(nn.reshape(e_omega, (n, 1, ibar, zbar, 1)), D)   # (N, i, i', z, z')
    per_pair = nn.sum(weighted, axis=3)                                  # (N, i, i', z')
    mask = neighbourhood(ibar, lam).reshape(1, ibar, ibar, 1)
    return nn.mul(nn.sum(nn.mul(per_pair, mask), axis=2), 1.0 / (2 * lam + 1))


def aggregate(T_hat: Tensor, att: Tensor) -> Tensor:
    """``T[z] = (1/ibar) * sum_i att[i, z] * T_hat[i, z]``."""
    n, ibar, zbar, d = T_hat.shape
    return nn.mul(nn.sum(nn.mul(nn.reshape(att, (n, ibar, zbar, 1)), T_hat), axis=1), 1.0 / ibar)


def aggregate_fpts(
    lengths: np.ndarray,
    F: np.ndarray,
    P: np.ndarray,
    store: ParamStore,
    cfg: AggregationConfig,
    prefix: str = "agg",
) -> AggregationOutput:
    T_hat = embed_fpts(lengths, P, store, prefix)
    e_omega = confidence(F, store, cfg.buckets, prefix)
    if cfg.similarity:
        D = similarity_tensor(T_hat)
        att = attention(D, e_omega, cfg.lam)
    else:
        D, att = None, e_omega
    return AggregationOutput(aggregate(T_hat, att), att, D, e_omega, T_hat)
