import numpy as np
import pytest

from finer import neural as nn
from finer.aggregation import (
    AggregationConfig,
    aggregate,
    aggregate_fpts,
    attention,
    confidence,
    dtw_similarity,
    embed_fpts,
    frequency_buckets,
    init_aggregation,
    similarity_tensor,
)
from finer.neural import ParamStore, Tensor


def _cos(u, v):
    nu, nv = np.linalg.norm(u), np.linalg.norm(v)
    return 0.0 if nu < 1e-12 or nv < 1e-12 else float(u @ v / (nu * nv))


def best_path(C):
    """Best monotone warping path sum, enumerated path by path."""
    Z1, Z2 = C.shape
    best = -np.inf
    stack = [(0, 0, C[0, 0])]
    while stack:
        z, w, acc = stack.pop()
        if (z, w) == (Z1 - 1, Z2 - 1):
            best = max(best, acc)
            continue
        for dz, dw in ((1, 1), (0, 1), (1, 0)):
            if z + dz < Z1 and w + dw < Z2:
                stack.append((z + dz, w + dw, acc + C[z + dz, w + dw]))
    return best


def _store(cfg, seed=0):
    store = ParamStore(seed=seed)
    init_aggregation(store, cfg)
    return store


def test_dtw_matches_path_enumeration():
    rng = np.random.default_rng(0)
    for _ in range(50):
        z = rng.integers(1, 5)
        A, B = rng.normal(size=(z, 3)), rng.normal(size=(z, 3))
        A[rng.random(z) < 0.2] = 0.0
        C = np.array([[_cos(a, b) for b in B] for a in A])
        D = dtw_similarity(Tensor(A), Tensor(B)).data
        assert D[-1, -1] == pytest.approx(best_path(C), abs=1e-12)


def test_dtw_identical_and_zero_inputs():
    rng = np.random.default_rng(1)
    # mutually orthogonal rows: no detour can beat the diagonal
    A = np.diag(rng.uniform(0.5, 2.0, size=4))
    D = dtw_similarity(Tensor(A), Tensor(A)).data
    np.testing.assert_allclose(np.diag(D), [1, 2, 3, 4], atol=1e-12)
    # otherwise a warp through positively correlated cells may collect more than the diagonal
    A = rng.normal(size=(4, 5))
    D = dtw_similarity(Tensor(A), Tensor(A)).data
    assert np.all(np.diag(D) >= np.arange(1, 5) - 1e-12)
    assert dtw_similarity(Tensor(np.zeros((3, 2))), Tensor(A[:3, :2])).data[-1, -1] == 0.0


def test_similarity_tensor_is_symmetric():
    T_hat = Tensor(np.random.default_rng(2).normal(size=(3, 3, 4, 5)))
    D = similarity_tensor(T_hat).data
    np.testing.assert_allclose(D, np.transpose(D, (0, 2, 1, 4, 3)), atol=1e-12)


def test_embedding_rows():
    cfg = AggregationConfig(ibar=3, zbar=2, d=4)
    store = _store(cfg)
    W_l = store["agg.W_l"].data
    rng = np.random.default_rng(3)
    lengths = np.array([[0, 2, 3], [1, 1, 0]])
    P = rng.random((2, 3, 2))
    P[0, 0] = 0.0
    P[1, 2, 1] = 1.0
    T_hat = embed_fpts(lengths, P, store).data
    for n in range(2):
        for i in range(3):
            for z in range(2):
                np.testing.assert_array_equal(T_hat[n, i, z], P[n, i, z] * W_l[lengths[n, i]])
    assert np.all(T_hat[0, 0] == 0.0)
    assert np.array_equal(T_hat[1, 2, 1], W_l[0])


@pytest.mark.parametrize("F, bucket", [(0, 0), (0.05, 0), (0.1, 0), (1, 3), (984, 13), (10**12, 31)])
def test_frequency_buckets(F, bucket):
    assert frequency_buckets(np.array([F]))[0] == bucket


def test_confidence_range_and_ties():
    cfg = AggregationConfig()
    store = _store(cfg)
    F = np.array([[[0, 984], [984, 3]], [[10**9, 0], [5, 5]]], dtype=float)
    e = confidence(F, store).data
    assert np.all((e > 0) & (e < 1))
    assert e[0, 0, 1] == e[0, 1, 0]
    assert e[1, 1, 0] == e[1, 1, 1]
    assert e[0, 0, 0] == e[1, 0, 1]


def _attention_loop(D, e, lam):
    n, ibar, zbar = e.shape
    out = np.zeros((n, ibar, zbar))
    for b in range(n):
        for i in range(ibar):
            for j in range(max(0, i - lam), min(ibar, i + lam + 1)):
                for w in range(zbar):
                    out[b, i, w] += sum(e[b, j, z] * D[b, i, j, z, w] for z in range(zbar))
    return out / (2 * lam + 1)


@pytest.mark.parametrize("ibar, lam", [(2, 1), (3, 1), (4, 0), (4, 2)])
def test_attention_matches_loop(ibar, lam):
    rng = np.random.default_rng(ibar * 10 + lam)
    D = rng.normal(size=(2, ibar, ibar, 3, 3))
    e = rng.random((2, ibar, 3))
    np.testing.assert_allclose(attention(Tensor(D), Tensor(e), lam).data, _attention_loop(D, e, lam), atol=1e-12)
    with pytest.raises(ValueError):
        attention(Tensor(D), Tensor(e), -1)


def test_attention_without_window():
    rng = np.random.default_rng(4)
    D = rng.normal(size=(1, 2, 2, 2, 2))
    e = rng.random((1, 2, 2))
    att = attention(Tensor(D), Tensor(e), 0).data
    for i in range(2):
        np.testing.assert_allclose(att[0, i], e[0, i] @ D[0, i, i], atol=1e-12)


def test_aggregate_values():
    rng = np.random.default_rng(5)
    T_hat = rng.normal(size=(2, 3, 2, 4))
    att = rng.random((2, 3, 2))
    expect = np.einsum("niz,nizd->nzd", att, T_hat) / 3
    np.testing.assert_allclose(aggregate(Tensor(T_hat), Tensor(att)).data, expect, atol=1e-12)
    assert np.all(aggregate(Tensor(T_hat), Tensor(np.zeros((2, 3, 2)))).data == 0.0)
    one = T_hat[:, :1]
    np.testing.assert_array_equal(aggregate(Tensor(one), Tensor(np.ones((2, 1, 2)))).data, one[:, 0])


def test_identical_rows_get_identical_attention():
    cfg = AggregationConfig(ibar=2, zbar=3, d=6, lam=1)
    store = _store(cfg, seed=9)
    lengths = np.array([[2, 2]])
    P = np.array([[[0.25, 0.41, 0.9]] * 2])
    F = np.array([[[984, 984, 3], [1, 40, 7000]]], dtype=float)
    out = aggregate_fpts(lengths, F, P, store, cfg)
    assert not np.allclose(out.e_omega.data[0, 0], out.e_omega.data[0, 1])
    np.testing.assert_allclose(out.att.data[0, 0], out.att.data[0, 1], atol=1e-12, rtol=0)


def test_frequency_only_attention():
    cfg = AggregationConfig(ibar=2, zbar=2, d=4, similarity=False)
    store = _store(cfg)
    rng = np.random.default_rng(6)
    out = aggregate_fpts(np.array([[1, 2]]), rng.integers(0, 50, (1, 2, 2)).astype(float),
                         rng.random((1, 2, 2)), store, cfg)
    assert out.D is None
    assert np.array_equal(out.att.data, out.e_omega.data)


def test_aggregation_gradients():
    cfg = AggregationConfig(ibar=2, zbar=3, d=4, d_omega=3, conf_hidden=3, buckets=8)
    store = _store(cfg, seed=1)
    rng = np.random.default_rng(7)
    lengths = rng.integers(0, 3, (4, 2))
    P = rng.random((4, 2, 3))
    F = rng.integers(0, 100, (4, 2, 3)).astype(float)
    w = Tensor(rng.normal(size=(4, 3, 4)))

    def f():
        return nn.sum(nn.mul(aggregate_fpts(lengths, F, P, store, cfg).T, w))
    report = nn.grad_check(f, store)
    assert report.passed, report
