"""Reverse-mode automatic differentiation over dense numpy arrays.

Every op builds a fresh node holding its parents and a closure that maps the
upstream gradient to one gradient per parent. Graphs are dynamic: they are
rebuilt on every forward pass and discarded after ``backward``.
"""

from __future__ import annotations

import contextlib
import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

DEFAULT_DTYPE = np.float64

_grad_enabled = True


class NumericError(ArithmeticError):
    """Raised when a value that must be finite is not."""


@contextlib.contextmanager
def no_grad():
    """Disable graph construction inside the block."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def is_grad_enabled() -> bool:
    return _grad_enabled


GradFn = Callable[[np.ndarray], Sequence["np.ndarray | None"]]


class Tensor:
    """A dense array node in the compute graph."""

    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_grad_fn", "op")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None, dtype=None):
        if dtype is None:
            keep = isinstance(data, np.ndarray) and data.dtype in (np.float32, np.float64)
            dtype = data.dtype if keep else DEFAULT_DTYPE
        arr = np.asarray(data, dtype=dtype)
        if arr.ndim > 0 and 0 in arr.shape:
            raise ValueError(f"tensor dimensions must be positive, got shape {arr.shape}")
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.name = name
        self._parents: tuple[Tensor, ...] = ()
        self._grad_fn: GradFn | None = None
        self.op = "leaf"

    @classmethod
    def from_op(cls, data: np.ndarray, parents: Sequence[Tensor], grad_fn: GradFn, op: str) -> Tensor:
        out = cls.__new__(cls)
        out.data = data
        out.grad = None
        out.name = None
        out.op = op
        needs = _grad_enabled and any(p.requires_grad for p in parents)
        out.requires_grad = needs
        if needs:
            out._parents = tuple(parents)
            out._grad_fn = grad_fn
        else:
            out._parents = ()
            out._grad_fn = None
        return out

    # -- basic properties -------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> Tensor:
        return Tensor(self.data, requires_grad=False, dtype=self.data.dtype)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        tag = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, op={self.op}{tag})"

    def backward(self) -> None:
        backward(self)

    # -- operator sugar ---------------------------------------------------
    def __add__(self, other): return add(self, other)
    def __radd__(self, other): return add(other, self)
    def __sub__(self, other): return sub(self, other)
    def __rsub__(self, other): return sub(other, self)
    def __mul__(self, other): return mul(self, other)
    def __rmul__(self, other): return mul(other, self)
    def __truediv__(self, other): return div(self, other)
    def __rtruediv__(self, other): return div(other, self)
    def __neg__(self): return neg(self)
    def __matmul__(self, other): return matmul(self, other)
    def __pow__(self, p: float): return power(self, p)
    def __getitem__(self, idx): return index(self, idx)

    def sum(self, axis=None, keepdims: bool = False): return tsum(self, axis, keepdims)
    def mean(self, axis=None, keepdims: bool = False): return mean(self, axis, keepdims)
    def reshape(self, *shape): return reshape(self, shape[0] if len(shape) == 1 else shape)
    def transpose(self, *axes): return transpose(self, axes or None)
    def exp(self): return exp(self)
    def log(self): return log(self)


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype or DEFAULT_DTYPE))


def _pair(a, b) -> tuple[Tensor, Tensor]:
    if isinstance(a, Tensor) and not isinstance(b, Tensor):
        b = Tensor(np.asarray(b, dtype=a.dtype))
    elif isinstance(b, Tensor) and not isinstance(a, Tensor):
        a = Tensor(np.asarray(a, dtype=b.dtype))
    return a, b


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, size in enumerate(shape):
        if size == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# -- elementwise ---------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _pair(a, b)
    sa, sb = a.shape, b.shape
    return Tensor.from_op(a.data + b.data, (a, b),
                          lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)), "add")


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)
    sa, sb = a.shape, b.shape
    return Tensor.from_op(a.data - b.data, (a, b),
                          lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)), "sub")


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)
    ad, bd = a.data, b.data
    return Tensor.from_op(ad * bd, (a, b),
                          lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)),
                          "mul")


def div(a, b) -> Tensor:
    a, b = _pair(a, b)
    ad, bd = a.data, b.data
    return Tensor.from_op(ad / bd, (a, b),
                          lambda g: (_unbroadcast(g / bd, ad.shape),
                                     _unbroadcast(-g * ad / (bd * bd), bd.shape)),
                          "div")


def neg(a: Tensor) -> Tensor:
    return Tensor.from_op(-a.data, (a,), lambda g: (-g,), "neg")


def power(a: Tensor, p: float) -> Tensor:
    ad = a.data
    return Tensor.from_op(ad ** p, (a,), lambda g: (g * p * ad ** (p - 1),), "pow")


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return Tensor.from_op(out, (a,), lambda g: (g * out,), "exp")


def log(a: Tensor) -> Tensor:
    ad = a.data
    return Tensor.from_op(np.log(ad), (a,), lambda g: (g / ad,), "log")


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)
    return Tensor.from_op(out, (a,), lambda g: (g * (1.0 - out * out),), "tanh")


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return Tensor.from_op(a.data * mask, (a,), lambda g: (g * mask,), "relu")


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu_array(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """tanh-approximate GELU and its derivative."""
    x2 = x * x
    t = np.tanh(_GELU_C * x * (1.0 + 0.044715 * x2))
    half_1pt = 0.5 * (1.0 + t)
    y = x * half_1pt
    dy = half_1pt + (0.5 * _GELU_C) * x * (1.0 - t * t) * (1.0 + 0.134145 * x2)
    return y, dy


def gelu(a: Tensor) -> Tensor:
    y, dy = gelu_array(a.data)
    return Tensor.from_op(y, (a,), lambda g: (g * dy,), "gelu")


# -- reductions & shape ----------------------------------------------------

def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    shape = a.shape

    def grad_fn(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return Tensor.from_op(np.asarray(a.data.sum(axis=axis, keepdims=keepdims)), (a,), grad_fn, "sum")


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    count = a.data.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return tsum(a, axis, keepdims) * (1.0 / float(count))


def reshape(a: Tensor, shape) -> Tensor:
    old = a.shape
    return Tensor.from_op(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),), "reshape")


def transpose(a: Tensor, axes=None) -> Tensor:
    axes = tuple(axes) if axes is not None else tuple(reversed(range(a.ndim)))
    inv = tuple(np.argsort(axes))
    return Tensor.from_op(a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),), "transpose")


def index(a: Tensor, idx) -> Tensor:
    shape = a.shape

    def grad_fn(g):
        out = np.zeros(shape, dtype=g.dtype)
        np.add.at(out, idx, g)
        return (out,)

    return Tensor.from_op(np.asarray(a.data[idx]), (a,), grad_fn, "index")


def embedding(weight: Tensor, ids: np.ndarray) -> Tensor:
    """Row lookup ``weight[ids]`` with scatter-add backward."""
    ids = np.asarray(ids)
    shape = weight.shape

    def grad_fn(g):
        out = np.zeros(shape, dtype=g.dtype)
        np.add.at(out, ids.reshape(-1), g.reshape(-1, shape[-1]))
        return (out,)

    return Tensor.from_op(weight.data[ids], (weight,), grad_fn, "embedding")


def take_along_last(a: Tensor, idx: np.ndarray) -> Tensor:
    """``a[..., idx]`` per leading position; ``idx`` has a's shape with a new last size."""
    idx = np.asarray(idx)
    shape = a.shape

    def grad_fn(g):
        out = np.zeros(shape, dtype=g.dtype)
        lead = np.indices(idx.shape, sparse=True)[:-1]
        np.add.at(out, (*lead, idx), g)
        return (out,)

    return Tensor.from_op(np.take_along_axis(a.data, idx, axis=-1), (a,), grad_fn, "take")


def concat(parts: Sequence[Tensor], axis: int = 0) -> Tensor:
    sizes = [p.shape[axis] for p in parts]
    splits = np.cumsum(sizes)[:-1]
    return Tensor.from_op(np.concatenate([p.data for p in parts], axis=axis), tuple(parts),
                          lambda g: tuple(np.split(g, splits, axis=axis)), "concat")


# -- linear algebra --------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product, batched over equal leading dimensions."""
    a, b = _pair(a, b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2] or a.shape[:-2] != b.shape[:-2] \
            and b.ndim != 2:
        raise ValueError(f"matmul dimension mismatch: {a.shape} vs {b.shape}")
    ad, bd = a.data, b.data

    def grad_fn(g):
        ga = g @ np.swapaxes(bd, -1, -2)
        if bd.ndim == 2 and ad.ndim > 2:
            gb = ad.reshape(-1, ad.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        else:
            gb = np.swapaxes(ad, -1, -2) @ g
        return ga, gb

    return Tensor.from_op(ad @ bd, (a, b), grad_fn, "matmul")


# -- softmax family --------------------------------------------------------

def softmax(a: Tensor, axis: int = -1, mask: np.ndarray | None = None) -> Tensor:
    """Softmax along ``axis``; positions where ``mask`` is False get exactly 0."""
    x = a.data
    if mask is not None:
        x = np.where(mask, x, -np.inf)
    m = np.max(x, axis=axis, keepdims=True)
    e = np.exp(x - m)
    out = e / e.sum(axis=axis, keepdims=True)

    def grad_fn(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return Tensor.from_op(out, (a,), grad_fn, "softmax")


def log_softmax(a: Tensor, axis: int = -1) -> Tensor:
    x = a.data
    m = np.max(x, axis=axis, keepdims=True)
    shifted = x - m
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse

    def grad_fn(g):
        return (g - np.exp(out) * g.sum(axis=axis, keepdims=True),)

    return Tensor.from_op(out, (a,), grad_fn, "log_softmax")


def masked_softmax(logits: Tensor, mask: Iterable[int]) -> Tensor:
    """Softmax of a length-n vector restricted to the index set ``mask``.

    Off-mask entries are exactly zero and receive exactly zero gradient.
    """
    idx = sorted({int(i) for i in mask})
    n = logits.shape[-1]
    if not idx:
        raise ValueError("masked_softmax: mask must be non-empty")
    if idx[0] < 0 or idx[-1] >= n:
        raise ValueError(f"masked_softmax: mask indices must lie in [0, {n}), got {idx}")
    keep = np.zeros(n, dtype=bool)
    keep[idx] = True
    return softmax(logits, axis=-1, mask=keep)


def log_softmax_cross_entropy(logits: Tensor, target) -> Tensor:
    """Negative log-likelihood of ``target`` under softmax(logits).

    ``logits`` may be [V] with an integer target, or [..., V] with an integer
    array of targets (one loss per leading position).
    """
    V = logits.shape[-1]
    tgt = np.asarray(target)
    if not np.issubdtype(tgt.dtype, np.integer):
        raise ValueError(f"target must be integer token ids, got {tgt.dtype}")
    if np.any(tgt < 0) or np.any(tgt >= V):
        raise ValueError(f"target out of range for vocabulary of size {V}: {target}")
    if tgt.shape != logits.shape[:-1]:
        raise ValueError(f"target shape {tgt.shape} does not match logits {logits.shape}")
    lp = log_softmax(logits, axis=-1)
    picked = take_along_last(lp, tgt[..., None])
    return neg(reshape(picked, tgt.shape))


# -- normalisation ---------------------------------------------------------

def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """LayerNorm over the last axis, fused into one node."""
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    gd = gain.data
    d = xd.shape[-1]

    def grad_fn(g):
        lead = tuple(range(g.ndim - 1))
        dgain = (g * xhat).sum(axis=lead)
        dbias = g.sum(axis=lead)
        gx = g * gd
        dx = inv * (gx - gx.mean(axis=-1, keepdims=True)
                    - xhat * (gx * xhat).sum(axis=-1, keepdims=True) / d)
        return dx, dgain, dbias

    return Tensor.from_op(xhat * gd + bias.data, (x, gain, bias), grad_fn, "layer_norm")


# -- backward ----------------------------------------------------------------

def _topo_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in reversed(node._parents):
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(root: Tensor) -> None:
    """Accumulate d(root)/d(t) into ``t.grad`` for every reachable tensor."""
    if root.data.size != 1 or root.ndim > 1:
        raise ValueError(f"backward requires a scalar root, got shape {root.shape}")
    if not root.requires_grad:
        return
    order = _topo_order(root)
    pending: dict[int, np.ndarray] = {id(root): np.ones_like(root.data)}
    for node in reversed(order):
        g = pending.pop(id(node), None)
        if g is None:
            continue
        node.grad = g if node.grad is None else node.grad + g
        if node._grad_fn is None:
            continue
        for parent, pg in zip(node._parents, node._grad_fn(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            prev = pending.get(key)
            pending[key] = pg if prev is None else prev + pg


# -- gradient checking --------------------------------------------------------

@dataclass
class GradCheckReport:
    max_rel_error: float
    passed: bool
    rel_tol: float
    worst_param: str | None = None
    worst_index: tuple[int, ...] | None = None
    analytic: float = 0.0
    numeric: float = 0.0
    checked: int = 0
    per_param: dict[str, float] = field(default_factory=dict)

    def __str__(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        where = f" at {self.worst_param}{list(self.worst_index or ())}" if self.worst_param else ""
        return (f"gradcheck {status}: max rel err {self.max_rel_error:.3e} (tol {self.rel_tol:.0e})"
                f"{where}, {self.checked} entries")


def _param_name(p: Tensor, i: int) -> str:
    return p.name or f"param[{i}]"


def finite_diff_check(loss_fn: Callable[[], Tensor], params: Sequence[Tensor], epsilon: float = 1e-5,
                      rel_tol: float = 1e-4, abs_floor: float = 1e-6,
                      max_entries: int | None = None, seed: int = 0) -> GradCheckReport:
    """Compare analytic gradients with central differences.

    The relative error of an entry is ``|a - n| / max(|a|, |n|, abs_floor)``;
    ``abs_floor`` keeps entries whose true gradient is ~0 from dividing by
    roundoff. ``max_entries`` subsamples entries per parameter.
    """
    if epsilon <= 0:
        raise ValueError("epsilon must be positive")
    for p in params:
        p.grad = None
    loss = loss_fn()
    if not np.isfinite(loss.data).all():
        names = ", ".join(_param_name(p, i) for i, p in enumerate(params))
        raise NumericError(f"loss is not finite at the base point (parameters: {names})")
    backward(loss)
    analytic = [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in params]

    rng = np.random.default_rng(seed)
    report = GradCheckReport(max_rel_error=0.0, passed=True, rel_tol=rel_tol)
    for i, p in enumerate(params):
        name = _param_name(p, i)
        flat = p.data.reshape(-1)
        entries = np.arange(flat.size)
        if max_entries is not None and flat.size > max_entries:
            entries = np.sort(rng.choice(flat.size, size=max_entries, replace=False))
        worst_here = 0.0
        with no_grad():
            for k in entries:
                orig = flat[k]
                flat[k] = orig + epsilon
                fp = float(loss_fn().data)
                flat[k] = orig - epsilon
                fm = float(loss_fn().data)
                flat[k] = orig
                if not (math.isfinite(fp) and math.isfinite(fm)):
                    raise NumericError(f"non-finite loss while perturbing {name}[{k}]")
                num = (fp - fm) / (2.0 * epsilon)
                ana = float(analytic[i].reshape(-1)[k])
                err = abs(ana - num) / max(abs(ana), abs(num), abs_floor)
                report.checked += 1
                worst_here = max(worst_here, err)
                if err > report.max_rel_error:
                    report.max_rel_error = err
                    report.worst_param = name
                    report.worst_index = tuple(int(v) for v in np.unravel_index(k, p.shape))
                    report.analytic, report.numeric = ana, num
        report.per_param[name] = worst_here
    report.passed = report.max_rel_error <= rel_tol
    return report
