"""Minimal dense reverse-mode automatic differentiation on numpy arrays.

Every op returns a :class:`Tensor` that remembers its parents and a closure
mapping the output gradient to parent gradients.  :meth:`Tensor.backward`
walks the recorded graph once in reverse topological order.
"""

from __future__ import annotations

import json
from pathlib import Path
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np
import scipy.sparse as sp

_DTYPE = np.float64


def set_default_dtype(dtype) -> None:
    """Switch the dtype for newly created tensors (float64 or float32)."""
    global _DTYPE
    if np.dtype(dtype) not in (np.dtype(np.float64), np.dtype(np.float32)):
        raise ValueError("only float64 and float32 are supported")
    _DTYPE = np.dtype(dtype).type


def get_default_dtype():
    return _DTYPE


class DimensionError(ValueError):
    pass


def _check(cond: bool, op: str, msg: str) -> None:
    if not cond:
        raise DimensionError(f"{op}: {msg}")


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.array(data, dtype=_DTYPE) if not isinstance(data, np.ndarray) else data.astype(_DTYPE, copy=False)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.name = name
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        tag = f" name={self.name}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag}, requires_grad={self.requires_grad})"

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self, grad: np.ndarray | None = None) -> None:
        if grad is None:
            if self.data.size != 1:
                raise ValueError(f"backward() needs a scalar loss, got shape {self.shape}")
            grad = np.ones_like(self.data)
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, done = stack.pop()
            if done:
                order.append(node)
                continue
            if id(node) in seen or not node.requires_grad:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen and p.requires_grad:
                    stack.append((p, False))
        grads: dict[int, np.ndarray] = {id(self): np.asarray(grad, dtype=self.data.dtype)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            node.grad = g.copy() if node.grad is None else node.grad + g
            if node._backward is None:
                continue
            for p, pg in zip(node._parents, node._backward(g)):
                if pg is None or not p.requires_grad:
                    continue
                if id(p) in grads:
                    grads[id(p)] = grads[id(p)] + pg
                else:
                    grads[id(p)] = pg

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def parameter(data, name: str | None = None) -> Tensor:
    return Tensor(np.array(data, dtype=_DTYPE), requires_grad=True, name=name)


def _make(data: np.ndarray, parents: Sequence[Tensor], backward: Callable) -> Tensor:
    out = Tensor(data)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# ---------------------------------------------------------------- elementwise


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    try:
        out = a.data + b.data
    except ValueError:
        raise DimensionError(f"add: cannot broadcast {a.shape} with {b.shape}") from None
    return _make(out, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    try:
        out = a.data - b.data
    except ValueError:
        raise DimensionError(f"sub: cannot broadcast {a.shape} with {b.shape}") from None
    return _make(out, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    """Hadamard product with numpy broadcasting."""
    a, b = as_tensor(a), as_tensor(b)
    try:
        out = a.data * b.data
    except ValueError:
        raise DimensionError(f"mul: cannot broadcast {a.shape} with {b.shape}") from None
    return _make(
        out,
        (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
    )


hadamard = mul


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check(a.ndim == 2 and b.ndim == 2, "matmul", f"expects 2-D operands, got {a.shape} @ {b.shape}")
    _check(a.shape[1] == b.shape[0], "matmul", f"inner dimensions differ: {a.shape} @ {b.shape}")
    return _make(a.data @ b.data, (a, b), lambda g: (g @ b.data.T, a.data.T @ g))


def spmm(s, x) -> Tensor:
    """Product of a constant (dense or scipy sparse) operator with a tensor."""
    x = as_tensor(x)
    _check(x.ndim == 2 and s.shape[1] == x.shape[0], "spmm", f"operator {s.shape} vs {x.shape}")
    st = s.T.tocsr() if sp.issparse(s) else s.T
    return _make(np.asarray(s @ x.data), (x,), lambda g: (np.asarray(st @ g),))


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    try:
        out = np.concatenate([t.data for t in ts], axis=axis)
    except ValueError as exc:
        raise DimensionError(f"concat: {exc}") from None
    sizes = np.cumsum([t.shape[axis] for t in ts])[:-1]

    def backward(g):
        return tuple(np.split(g, sizes, axis=axis))

    return _make(out, ts, backward)


def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    return _make(x.data.reshape(shape), (x,), lambda g: (g.reshape(x.shape),))


def transpose(x) -> Tensor:
    x = as_tensor(x)
    return _make(x.data.T, (x,), lambda g: (g.T,))


def relu(x) -> Tensor:
    x = as_tensor(x)
    mask = x.data > 0
    return _make(x.data * mask, (x,), lambda g: (g * mask,))


LEAKY_SLOPE = 0.01


def leaky_relu(x, slope: float = LEAKY_SLOPE) -> Tensor:
    x = as_tensor(x)
    factor = np.where(x.data > 0, 1.0, slope)
    return _make(x.data * factor, (x,), lambda g: (g * factor,))


def sigmoid(x) -> Tensor:
    x = as_tensor(x)
    z = x.data
    e = np.exp(-np.abs(z))
    s = np.where(z >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    return _make(s, (x,), lambda g: (g * s * (1.0 - s),))


def tanh(x) -> Tensor:
    x = as_tensor(x)
    t = np.tanh(x.data)
    return _make(t, (x,), lambda g: (g * (1.0 - t * t),))


def absolute(x) -> Tensor:
    x = as_tensor(x)
    return _make(np.abs(x.data), (x,), lambda g: (g * np.sign(x.data),))


def l1_norm(x) -> Tensor:
    """Row-wise L1 norm, shape (n, 1)."""
    x = as_tensor(x)
    _check(x.ndim == 2, "l1_norm", f"expects a matrix, got {x.shape}")
    sign = np.sign(x.data)
    return _make(np.abs(x.data).sum(axis=1, keepdims=True), (x,), lambda g: (g * sign,))


def sum(x, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    x = as_tensor(x)
    out = x.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _make(np.asarray(out), (x,), backward)


def mean(x) -> Tensor:
    x = as_tensor(x)
    return mul(sum(x), 1.0 / x.data.size)


# ------------------------------------------------------------------- indexing


def row_gather(x, idx) -> Tensor:
    x = as_tensor(x)
    idx = np.asarray(idx, dtype=np.int64)
    if idx.size:
        _check(idx.min() >= 0 and idx.max() < x.shape[0], "row_gather", "index out of range")

    def backward(g):
        gx = np.zeros_like(x.data)
        np.add.at(gx, idx, g)
        return (gx,)

    return _make(x.data[idx], (x,), backward)


def segment_sum(x, seg, num_segments: int) -> Tensor:
    """Sum rows of ``x`` into ``num_segments`` buckets given by ``seg``."""
    x = as_tensor(x)
    seg = np.asarray(seg, dtype=np.int64)
    _check(seg.shape[0] == x.shape[0], "segment_sum", f"{seg.shape[0]} ids for {x.shape[0]} rows")
    out = np.zeros((num_segments,) + x.shape[1:], dtype=x.data.dtype)
    np.add.at(out, seg, x.data)
    return _make(out, (x,), lambda g: (g[seg],))


def segment_mean(x, seg, num_segments: int) -> Tensor:
    seg = np.asarray(seg, dtype=np.int64)
    counts = np.bincount(seg, minlength=num_segments).astype(_DTYPE)
    inv = np.where(counts > 0, 1.0 / np.maximum(counts, 1), 0.0)
    return mul(segment_sum(x, seg, num_segments), inv.reshape(-1, *([1] * (as_tensor(x).ndim - 1))))


def segment_max(x, seg, num_segments: int) -> Tensor:
    """Column-wise max per segment; empty segments give 0.

    The gradient goes to one row per (segment, column): the lowest row index
    among tied maxima.
    """
    x = as_tensor(x)
    seg = np.asarray(seg, dtype=np.int64)
    _check(x.ndim == 2, "segment_max", f"expects a matrix, got {x.shape}")
    _check(seg.shape[0] == x.shape[0], "segment_max", f"{seg.shape[0]} ids for {x.shape[0]} rows")
    out = np.zeros((num_segments, x.shape[1]), dtype=x.data.dtype)
    if x.shape[0] == 0:
        return _make(out, (x,), lambda g: (np.zeros_like(x.data),))
    order = np.argsort(seg, kind="stable")
    ss = seg[order]
    xs = x.data[order]
    starts = np.flatnonzero(np.r_[True, ss[1:] != ss[:-1]])
    present = ss[starts]
    best = np.maximum.reduceat(xs, starts, axis=0)
    out[present] = best
    group = np.repeat(np.arange(len(starts)), np.diff(np.r_[starts, len(ss)]))
    rows = np.where(xs == best[group], order[:, None], np.iinfo(np.int64).max)
    argrow = np.minimum.reduceat(rows, starts, axis=0)
    cols = np.broadcast_to(np.arange(x.shape[1]), argrow.shape)

    def backward(g):
        gx = np.zeros_like(x.data)
        gx[argrow, cols] = g[present]
        return (gx,)

    return _make(out, (x,), backward)


def mean_rows(x) -> Tensor:
    x = as_tensor(x)
    return segment_mean(x, np.zeros(x.shape[0], dtype=np.int64), 1)


def max_rows(x) -> Tensor:
    x = as_tensor(x)
    return segment_max(x, np.zeros(x.shape[0], dtype=np.int64), 1)


# -------------------------------------------------------------- normalisation


def layer_norm(x, eps: float = 1e-5) -> Tensor:
    """Normalise each row to zero mean and unit variance (no affine part)."""
    x = as_tensor(x)
    _check(x.ndim == 2, "layer_norm", f"expects a matrix, got {x.shape}")
    mu = x.data.mean(axis=1, keepdims=True)
    xc = x.data - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=1, keepdims=True) + eps)
    xhat = xc * inv

    def backward(g):
        gm = g.mean(axis=1, keepdims=True)
        gx = g * xhat
        return (inv * (g - gm - xhat * gx.mean(axis=1, keepdims=True)),)

    return _make(xhat, (x,), backward)


def dropout(x, rate: float, training: bool, rng: np.random.Generator | None = None) -> Tensor:
    x = as_tensor(x)
    if not training or rate <= 0.0:
        return x
    if not 0.0 <= rate < 1.0:
        raise ValueError("dropout rate must be in [0, 1)")
    rng = rng or np.random.default_rng()
    keep = (rng.random(x.shape) >= rate) / (1.0 - rate)
    return _make(x.data * keep, (x,), lambda g: (g * keep,))


# --------------------------------------------------------------------- losses


def softmax_cross_entropy(logits, labels) -> Tensor:
    """Mean categorical cross-entropy of (B, C) logits against int labels."""
    logits = as_tensor(logits)
    labels = np.asarray(labels, dtype=np.int64)
    _check(logits.ndim == 2 and logits.shape[0] == labels.shape[0], "softmax_cross_entropy",
           f"logits {logits.shape} vs labels {labels.shape}")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    b = labels.shape[0]
    loss = -logp[np.arange(b), labels].mean()

    def backward(g):
        p = np.exp(logp)
        p[np.arange(b), labels] -= 1.0
        return (g * p / b,)

    return _make(np.asarray(loss), (logits,), backward)


def binary_cross_entropy_with_logits(logits, targets, mask=None) -> Tensor:
    """Mean BCE over entries where ``mask`` is true (default: non-NaN targets)."""
    logits = as_tensor(logits)
    y = np.asarray(targets, dtype=_DTYPE)
    _check(y.shape == logits.shape, "binary_cross_entropy_with_logits", f"logits {logits.shape} vs targets {y.shape}")
    if mask is None:
        mask = ~np.isnan(y)
    mask = np.asarray(mask, dtype=bool)
    y = np.where(mask, y, 0.0)
    z = logits.data
    count = max(int(mask.sum()), 1)
    per = np.maximum(z, 0) - z * y + np.log1p(np.exp(-np.abs(z)))
    loss = (per * mask).sum() / count

    def backward(g):
        s = 1.0 / (1.0 + np.exp(-z))
        return (g * (s - y) * mask / count,)

    return _make(np.asarray(loss), (logits,), backward)


# ------------------------------------------------------------------ optimiser


class Adam:
    """Adam with an L2 penalty ``weight_decay * param`` added to the gradient."""

    def __init__(self, params: Iterable[Tensor], lr: float = 1e-3, weight_decay: float = 0.0,
                 betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8):
        self.params = list(params)
        self.lr = lr
        self.weight_decay = weight_decay
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]
        self.t = 0

    def step(self) -> None:
        for p in self.params:
            if p.grad is None:
                raise ValueError(f"parameter {p.name or p.shape} has no gradient")
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for p, m, v in zip(self.params, self.m, self.v):
            g = p.grad + self.weight_decay * p.data if self.weight_decay else p.grad
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p.data -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
            p.grad = np.zeros_like(p.data)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None


def adam_step(opt: Adam, params: Iterable[Tensor] | None = None) -> None:
    if params is not None and [id(p) for p in params] != [id(p) for p in opt.params]:
        raise ValueError("params do not match the optimiser's parameter list")
    opt.step()


# ----------------------------------------------------------------- checkpoint

CHECKPOINT_MAGIC = "SPGP-CHECKPOINT"
CHECKPOINT_VERSION = 1


def save_checkpoint(path: str | Path, params: Mapping[str, Tensor], meta: Mapping | None = None) -> None:
    """Text checkpoint: header, one ``meta`` JSON line, then ``name shape values...``.

    Shapes are written as ``d0xd1`` (``scalar`` for 0-d); values use repr so a
    load/save round trip is bit-exact.
    """
    lines = [f"{CHECKPOINT_MAGIC} {CHECKPOINT_VERSION}", "meta " + json.dumps(dict(meta or {}), sort_keys=True)]
    for name, t in params.items():
        if " " in name:
            raise ValueError(f"parameter name {name!r} contains whitespace")
        shape = "x".join(map(str, t.shape)) if t.ndim else "scalar"
        vals = " ".join(repr(float(v)) for v in np.asarray(t.data, dtype=np.float64).ravel())
        lines.append(f"{name} {shape} {vals}".rstrip())
    Path(path).write_text("\n".join(lines) + "\n")


def load_checkpoint(path: str | Path) -> tuple[dict[str, np.ndarray], dict]:
    with Path(path).open() as fh:
        header = fh.readline().split()
        if len(header) != 2 or header[0] != CHECKPOINT_MAGIC:
            raise ValueError(f"{path}: not an SPGP checkpoint")
        if int(header[1]) != CHECKPOINT_VERSION:
            raise ValueError(f"{path}: unsupported checkpoint version {header[1]}")
        meta_line = fh.readline()
        if not meta_line.startswith("meta "):
            raise ValueError(f"{path}: missing meta line")
        meta = json.loads(meta_line[5:])
        params: dict[str, np.ndarray] = {}
        for lineno, line in enumerate(fh, 3):
            parts = line.split()
            if not parts:
                continue
            name, shape_tok = parts[0], parts[1]
            shape = () if shape_tok == "scalar" else tuple(int(d) for d in shape_tok.split("x"))
            vals = np.array([float(v) for v in parts[2:]], dtype=np.float64)
            if vals.size != int(np.prod(shape)):
                raise ValueError(f"{path}:{lineno}: {name} has {vals.size} values for shape {shape}")
            params[name] = vals.reshape(shape)
    return params, meta


# ------------------------------------------------------------ gradient checks


def numerical_gradient(f: Callable[[], Tensor], x: Tensor, h: float = 1e-5) -> np.ndarray:
    """Central differences of scalar ``f()`` with respect to ``x.data`` (in place)."""
    g = np.zeros_like(x.data)
    flat = x.data.reshape(-1)
    gf = g.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        fp = f().item()
        flat[i] = old - h
        fm = f().item()
        flat[i] = old
        gf[i] = (fp - fm) / (2 * h)
    return g


def relative_error(a: np.ndarray, b: np.ndarray, floor: float = 1e-6) -> float:
    """max |a-b| / max(|a|, |b|, floor), elementwise."""
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    if a.size == 0:
        return 0.0
    return float(np.max(np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)))


def gradient_check(f: Callable[[], Tensor], params: Sequence[Tensor], h: float = 1e-5) -> float:
    """Max relative error between backprop and central differences over ``params``."""
    for p in params:
        p.grad = None
    f().backward()
    worst = 0.0
    for p in params:
        analytic = np.zeros_like(p.data) if p.grad is None else p.grad.copy()
        numeric = numerical_gradient(f, p, h)
        worst = max(worst, relative_error(analytic, numeric))
    return worst
