"""A small reverse-mode autodiff core on numpy float64 arrays.

Tensors record the op that produced them; ``Tensor.backward`` walks the graph
in reverse topological order and accumulates gradients into every tensor that
requires them. On top of that: a named parameter store, LSTM and MLP blocks,
Adam, a finite-difference gradient checker and the ``FINERW1`` checkpoint
format.
"""

from __future__ import annotations

import json
import os
import struct
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

DEBUG = bool(os.environ.get("FINER_DEBUG"))


class ShapeError(ValueError):
    pass


class CheckpointError(ValueError):
    pass


def set_debug(flag: bool) -> None:
    """Toggle the finite-value assertion run after every op."""
    global DEBUG
    DEBUG = flag


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad: bool = False, _parents: tuple = (), op: str = "") -> None:
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad = np.zeros_like(self.data) if requires_grad else None
        self._parents = _parents
        self._backward: Callable[[np.ndarray], None] | None = None
        self.op = op

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op or 'leaf'})"

    def item(self) -> float:
        return float(self.data.item())

    def numpy(self) -> np.ndarray:
        return self.data

    def backward(self, grad: np.ndarray | None = None) -> None:
        """Accumulate d(self)/d(x) into ``x.grad`` for every upstream ``x``."""
        if grad is None:
            if self.data.size != 1:
                raise ShapeError(f"backward: implicit gradient needs a scalar, got shape {self.shape}")
            grad = np.ones_like(self.data)
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
        grads: dict[int, np.ndarray] = {id(self): grad}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad += g
                continue
            for parent, pg in node._backward(g):
                if parent.requires_grad:
                    if id(parent) in grads:
                        grads[id(parent)] = grads[id(parent)] + pg
                    else:
                        grads[id(parent)] = pg

    # operator sugar
    def __add__(self, other): return add(self, other)
    def __radd__(self, other): return add(other, self)
    def __sub__(self, other): return sub(self, other)
    def __rsub__(self, other): return sub(other, self)
    def __mul__(self, other): return mul(self, other)
    def __rmul__(self, other): return mul(other, self)
    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("division by a Tensor is not supported; divide by a constant")
        return mul(self, 1.0 / np.asarray(other, dtype=np.float64))
    def __neg__(self): return mul(self, -1.0)
    def __matmul__(self, other): return matmul(self, other)
    def __getitem__(self, idx): return getitem(self, idx)


def _raw(x) -> np.ndarray:
    return x.data if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: Sequence[Tensor], backward, op: str) -> Tensor:
    if DEBUG and not np.all(np.isfinite(data)):
        raise FloatingPointError(f"{op}: non-finite values in output")
    needs = any(p.requires_grad for p in parents)
    out = Tensor(data, requires_grad=False, _parents=tuple(parents) if needs else (), op=op)
    if needs:
        out.requires_grad = True
        out._backward = backward
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _bshape(op: str, a: Tensor, b: Tensor) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: incompatible shapes {a.shape} and {b.shape}") from None


# ---------------------------------------------------------------------------
# elementwise


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _bshape("add", a, b)
    return _make(a.data + b.data, (a, b),
                 lambda g: ((a, _unbroadcast(g, a.shape)), (b, _unbroadcast(g, b.shape))), "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _bshape("sub", a, b)
    return _make(a.data - b.data, (a, b),
                 lambda g: ((a, _unbroadcast(g, a.shape)), (b, _unbroadcast(-g, b.shape))), "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _bshape("mul", a, b)
    return _make(a.data * b.data, (a, b),
                 lambda g: ((a, _unbroadcast(g * b.data, a.shape)), (b, _unbroadcast(g * a.data, b.shape))),
                 "mul")


def maximum(a, b) -> Tensor:
    """Elementwise max; the gradient follows ``a`` on ties."""
    a, b = as_tensor(a), as_tensor(b)
    _bshape("maximum", a, b)
    pick_a = a.data >= b.data
    return _make(np.where(pick_a, a.data, b.data), (a, b),
                 lambda g: ((a, _unbroadcast(np.where(pick_a, g, 0.0), a.shape)),
                            (b, _unbroadcast(np.where(pick_a, 0.0, g), b.shape))),
                 "maximum")


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _make(np.where(mask, x.data, 0.0), (x,), lambda g: ((x, g * mask),), "relu")


def _sigmoid(z: np.ndarray) -> np.ndarray:
    e = np.exp(-np.abs(z))
    return np.where(z >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def _sigmoid_backward(out: np.ndarray, g: np.ndarray) -> np.ndarray:
    return g * out * (1.0 - out)


def sigmoid(x: Tensor) -> Tensor:
    out = _sigmoid(x.data)
    return _make(out, (x,), lambda g: ((x, _sigmoid_backward(out, g)),), "sigmoid")


def tanh(x: Tensor) -> Tensor:
    out = np.tanh(x.data)
    return _make(out, (x,), lambda g: ((x, g * (1.0 - out * out)),), "tanh")


def log(x: Tensor) -> Tensor:
    if np.any(x.data <= 0):
        raise FloatingPointError("log: non-positive input")
    return _make(np.log(x.data), (x,), lambda g: ((x, g / x.data),), "log")


def clip(x: Tensor, lo: float, hi: float) -> Tensor:
    inside = (x.data >= lo) & (x.data <= hi)
    return _make(np.clip(x.data, lo, hi), (x,), lambda g: ((x, g * inside),), "clip")


# ---------------------------------------------------------------------------
# reductions and structure


def sum(x: Tensor, axis: int | tuple[int, ...] | None = None) -> Tensor:  # noqa: A001
    out = x.data.sum(axis=axis)

    def back(g):
        if axis is None:
            return ((x, np.broadcast_to(g, x.shape).copy()),)
        return ((x, np.broadcast_to(np.expand_dims(g, axis), x.shape).copy()),)

    return _make(out, (x,), back, "sum")


def mean(x: Tensor, axis: int | None = None) -> Tensor:
    n = x.data.size if axis is None else x.shape[axis]
    return mul(sum(x, axis), 1.0 / n)


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim < 1 or b.data.ndim < 1:
        raise ShapeError(f"matmul: scalar operand, shapes {a.shape} and {b.shape}")
    k_a = a.shape[-1]
    k_b = b.shape[-2] if b.data.ndim >= 2 else b.shape[0]
    if k_a != k_b:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    out = a.data @ b.data

    def back(g):
        ad, bd = a.data, b.data
        if bd.ndim == 1:
            ga = np.expand_dims(g, -1) * bd
            gb = (ad * np.expand_dims(g, -1)).reshape(-1, bd.shape[0]).sum(axis=0)
            return ((a, ga), (b, gb))
        if ad.ndim == 1:
            ga = g @ np.swapaxes(bd, -1, -2)
            gb = np.expand_dims(ad, -1) * np.expand_dims(g, -2)
            return ((a, _unbroadcast(ga, a.shape)), (b, _unbroadcast(gb, b.shape)))
        ga = g @ np.swapaxes(bd, -1, -2)
        gb = np.swapaxes(ad, -1, -2) @ g
        return ((a, _unbroadcast(ga, a.shape)), (b, _unbroadcast(gb, b.shape)))

    return _make(out, (a, b), back, "matmul")


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot view shape {x.shape} as {tuple(shape)}") from None
    return _make(out, (x,), lambda g: ((x, g.reshape(x.shape)),), "reshape")


def transpose(x: Tensor, axes: Sequence[int] | None = None) -> Tensor:
    out = np.transpose(x.data, axes)
    inv = None if axes is None else np.argsort(axes)
    return _make(out, (x,), lambda g: ((x, np.transpose(g, inv)),), "transpose")


def concat(xs: Sequence[Tensor], axis: int = -1) -> Tensor:
    xs = [as_tensor(x) for x in xs]
    try:
        out = np.concatenate([x.data for x in xs], axis=axis)
    except ValueError:
        raise ShapeError(f"concat: incompatible shapes {[x.shape for x in xs]} on axis {axis}") from None
    sizes = np.cumsum([x.shape[axis] for x in xs])[:-1]

    def back(g):
        return tuple(zip(xs, np.split(g, sizes, axis=axis)))

    return _make(out, xs, back, "concat")


def stack(xs: Sequence[Tensor], axis: int = 0) -> Tensor:
    xs = [as_tensor(x) for x in xs]
    try:
        out = np.stack([x.data for x in xs], axis=axis)
    except ValueError:
        raise ShapeError(f"stack: incompatible shapes {[x.shape for x in xs]}") from None

    def back(g):
        return tuple((x, np.take(g, i, axis=axis)) for i, x in enumerate(xs))

    return _make(out, xs, back, "stack")


def _is_basic(idx) -> bool:
    parts = idx if isinstance(idx, tuple) else (idx,)
    return all(isinstance(p, (int, slice, type(None))) or p is Ellipsis for p in parts)


def getitem(x: Tensor, idx) -> Tensor:
    out = x.data[idx]
    basic = _is_basic(idx)

    def back(g):
        full = np.zeros_like(x.data)
        if basic:
            full[idx] = g
        else:
            np.add.at(full, idx, g)
        return ((x, full),)

    return _make(np.array(out, copy=True), (x,), back, "getitem")


def take(table: Tensor, index) -> Tensor:
    """Rows of ``table`` selected by an integer array (embedding lookup)."""
    index = np.asarray(index, dtype=np.int64)
    if index.size and (index.min() < 0 or index.max() >= table.shape[0]):
        raise IndexError(f"take: index outside [0, {table.shape[0]})")
    out = table.data[index]

    def back(g):
        full = np.zeros_like(table.data)
        np.add.at(full, index, g)
        return ((table, full),)

    return _make(out, (table,), back, "take")


def outer_product(a: Tensor, b: Tensor) -> Tensor:
    """Batched outer product: ``(..., m) x (..., n) -> (..., m, n)``."""
    if a.shape[:-1] != b.shape[:-1]:
        raise ShapeError(f"outer_product: batch shapes differ, {a.shape} and {b.shape}")
    return mul(reshape(a, a.shape + (1,)), reshape(b, b.shape[:-1] + (1, b.shape[-1])))


def safe_normalize(x: Tensor, tiny: float = 1e-12) -> Tensor:
    """``x / |x|`` along the last axis, and exactly 0 where ``|x| < tiny``."""
    norm = np.sqrt((x.data * x.data).sum(axis=-1, keepdims=True))
    ok = norm >= tiny
    safe = np.where(ok, norm, 1.0)
    u = np.where(ok, x.data / safe, 0.0)

    def back(g):
        proj = (u * g).sum(axis=-1, keepdims=True)
        return ((x, np.where(ok, (g - u * proj) / safe, 0.0)),)

    return _make(u, (x,), back, "normalize")


# ---------------------------------------------------------------------------
# parameters


@dataclass
class ParamStore:
    """Named trainable tensors with gradient slots and a seeded initializer."""

    seed: int = 0
    params: dict[str, Tensor] = field(default_factory=dict)

    def __post_init__(self) -> None:
        self.rng = np.random.default_rng(self.seed)

    def __getitem__(self, name: str) -> Tensor:
        return self.params[name]

    def __contains__(self, name: str) -> bool:
        return name in self.params

    def __iter__(self):
        return iter(self.params.items())

    def add(self, name: str, shape: Sequence[int], init: str = "uniform", fan_in: int | None = None) -> Tensor:
        if name in self.params:
            raise KeyError(f"duplicate parameter {name!r}")
        shape = tuple(shape)
        if init == "zeros":
            data = np.zeros(shape)
        elif init == "uniform":
            bound = 1.0 / np.sqrt(fan_in if fan_in else shape[0])
            data = self.rng.uniform(-bound, bound, size=shape)
        else:
            raise ValueError(f"unknown init {init!r}")
        t = Tensor(data, requires_grad=True, op=name)
        self.params[name] = t
        return t

    def zero_grad(self) -> None:
        for t in self.params.values():
            t.grad[...] = 0.0

    def squared_norm(self) -> Tensor:
        return add_all([sum(mul(p, p)) for p in self.params.values()])

    def size(self) -> int:
        return int(np.sum([p.data.size for p in self.params.values()]))

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.params.items()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        for k, v in state.items():
            if k not in self.params:
                raise KeyError(f"unexpected parameter {k!r}")
            if self.params[k].shape != v.shape:
                raise ShapeError(f"parameter {k!r}: shape {v.shape} vs {self.params[k].shape}")
            self.params[k].data[...] = v


def add_all(xs: Iterable[Tensor]) -> Tensor:
    xs = list(xs)
    out = xs[0]
    for x in xs[1:]:
        out = add(out, x)
    return out


# ---------------------------------------------------------------------------
# blocks


def init_lstm(store: ParamStore, prefix: str, d_in: int, d_hidden: int) -> None:
    store.add(f"{prefix}.W", (d_in + d_hidden, 4 * d_hidden), fan_in=d_in + d_hidden)
    b = store.add(f"{prefix}.b", (4 * d_hidden,), init="zeros")
    b.data[d_hidden:2 * d_hidden] = 1.0  # forget gate


def lstm_forward(store: ParamStore, prefix: str, inputs: Sequence[Tensor], batch: tuple[int, ...] = ()) -> tuple[Tensor, list[Tensor]]:
    """Run an LSTM over ``inputs`` (each ``(*batch, d_in)``).

    Gates are laid out as input, forget, candidate, output. Returns the final
    hidden state and the list of per-step hidden states; an empty input gives
    a zero hidden state.
    """
    W, b = store[f"{prefix}.W"], store[f"{prefix}.b"]
    hdim = b.shape[0] // 4
    if inputs:
        batch = inputs[0].shape[:-1]
    h = Tensor(np.zeros(batch + (hdim,)))
    c = Tensor(np.zeros(batch + (hdim,)))
    hiddens = []
    for x in inputs:
        z = add(matmul(concat([x, h], axis=-1), W), b)
        i = sigmoid(z[..., :hdim])
        f = sigmoid(z[..., hdim:2 * hdim])
        g = tanh(z[..., 2 * hdim:3 * hdim])
        o = sigmoid(z[..., 3 * hdim:])
        c = add(mul(f, c), mul(i, g))
        h = mul(o, tanh(c))
        hiddens.append(h)
    return h, hiddens


def init_mlp(store: ParamStore, prefix: str, sizes: Sequence[int]) -> None:
    for k, (m, n) in enumerate(zip(sizes[:-1], sizes[1:])):
        store.add(f"{prefix}.W{k}", (m, n), fan_in=m)
        store.add(f"{prefix}.b{k}", (n,), init="zeros")


def mlp_forward(store: ParamStore, prefix: str, x: Tensor) -> Tensor:
    """Affine layers with ReLU between them and no activation on the output."""
    k = 0
    while f"{prefix}.W{k}" in store:
        if k:
            x = relu(x)
        x = add(matmul(x, store[f"{prefix}.W{k}"]), store[f"{prefix}.b{k}"])
        k += 1
    if k == 0:
        raise KeyError(f"no MLP parameters under {prefix!r}")
    return x


# ---------------------------------------------------------------------------
# optimisation


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(store: ParamStore, state: AdamState) -> None:
    """One bias-corrected Adam update from the stored gradients, then zero them."""
    state.step += 1
    bc1 = 1.0 - state.beta1 ** state.step
    bc2 = 1.0 - state.beta2 ** state.step
    for name, p in store.params.items():
        g = p.grad
        if name not in state.m:
            state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        m, v = state.m[name], state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        p.data -= state.lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)
    store.zero_grad()


@dataclass
class GradCheckReport:
    passed: bool
    max_rel_err: float
    checked: int
    worst: tuple[str, tuple[int, ...]] | None
    message: str = ""
    refined: int = 0  # entries that only agreed at a smaller step


def rel_err(a: float, b: float) -> float:
    return abs(a - b) / max(abs(a), abs(b), 1e-8)


def grad_check(
    f: Callable[[], Tensor],
    store: ParamStore,
    eps: float = 1e-3,
    tol: float = 1e-4,
    max_entries: int | None = None,
    seed: int = 0,
    refine: int = 0,
) -> GradCheckReport:
    """Compare backprop gradients of scalar ``f()`` with central differences.

    Checks every parameter entry, or a random subsample of ``max_entries``.
    With ``refine > 0`` an entry that disagrees is retried with steps
    ``eps/10, eps/100, ...``: a ReLU or max input lying within ``eps`` of its
    kink makes the wide central difference meaningless, while a wrong
    analytic gradient disagrees at every step.
    """
    store.zero_grad()
    out = f()
    if not np.all(np.isfinite(out.data)):
        return GradCheckReport(False, float("inf"), 0, None, "non-finite loss")
    out.backward()
    analytic = {k: p.grad.copy() for k, p in store}
    store.zero_grad()

    entries = [(k, idx) for k, p in store for idx in np.ndindex(p.shape)]
    if max_entries is not None and len(entries) > max_entries:
        rng = np.random.default_rng(seed)
        pick = rng.choice(len(entries), size=max_entries, replace=False)
        entries = [entries[i] for i in sorted(pick)]

    worst, worst_err, refined = None, 0.0, 0
    for name, idx in entries:
        p = store[name].data
        orig = p[idx]
        err = float("inf")
        for k in range(refine + 1):
            step = eps / 10 ** k
            p[idx] = orig + step
            up = f().item()
            p[idx] = orig - step
            down = f().item()
            p[idx] = orig
            if not (np.isfinite(up) and np.isfinite(down)):
                return GradCheckReport(False, float("inf"), len(entries), (name, idx),
                                       "non-finite loss under perturbation")
            err = min(err, rel_err(float(analytic[name][idx]), (up - down) / (2 * step)))
            if err < tol:
                refined += k > 0
                break
        if err > worst_err or worst is None:
            worst, worst_err = (name, idx), err
    return GradCheckReport(worst_err < tol, worst_err, len(entries), worst, refined=refined)


# ---------------------------------------------------------------------------
# checkpoints

CKPT_MAGIC = b"FINERW1"
CKPT_VERSION = 1


def save_checkpoint(store: ParamStore, config: dict | None = None) -> bytes:
    """Serialize parameters to the ``FINERW1`` container.

    Layout: magic, u16 version, u32 header length, UTF-8 JSON header (seed,
    config, tensor names and shapes in order), then little-endian float64 data.
    """
    names = list(store.params)
    header = {
        "seed": store.seed,
        "config": config or {},
        "tensors": [{"name": n, "shape": list(store[n].shape)} for n in names],
    }
    hbytes = json.dumps(header, sort_keys=True).encode("utf-8")
    body = b"".join(store[n].data.astype("<f8").tobytes() for n in names)
    return CKPT_MAGIC + struct.pack("<HI", CKPT_VERSION, len(hbytes)) + hbytes + body


def load_checkpoint(data: bytes) -> tuple[ParamStore, dict]:
    """Inverse of :func:`save_checkpoint`; returns the store and the config echo."""
    if data[:len(CKPT_MAGIC)] != CKPT_MAGIC:
        raise CheckpointError("not a model checkpoint (bad magic)")
    pos = len(CKPT_MAGIC)
    if len(data) < pos + 6:
        raise CheckpointError("checkpoint truncated in header")
    version, hlen = struct.unpack_from("<HI", data, pos)
    if version != CKPT_VERSION:
        raise CheckpointError(f"checkpoint version {version}, expected {CKPT_VERSION}")
    pos += 6
    if len(data) < pos + hlen:
        raise CheckpointError("checkpoint truncated in header")
    header = json.loads(data[pos:pos + hlen].decode("utf-8"))
    pos += hlen
    store = ParamStore(seed=header["seed"])
    for spec in header["tensors"]:
        shape = tuple(spec["shape"])
        n = int(np.prod(shape)) if shape else 1
        if len(data) < pos + 8 * n:
            raise CheckpointError(f"checkpoint truncated in tensor {spec['name']!r}")
        arr = np.frombuffer(data, dtype="<f8", count=n, offset=pos).reshape(shape).astype(np.float64)
        pos += 8 * n
        store.params[spec["name"]] = Tensor(arr, requires_grad=True, op=spec["name"])
    if pos != len(data):
        raise CheckpointError(f"{len(data) - pos} trailing bytes in checkpoint")
    return store, header["config"]
