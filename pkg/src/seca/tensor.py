"""Reverse-mode autodiff over dense numpy arrays.

A deliberately small kernel: 1-D vectors and 2-D row batches, float32 or
float64, with exactly the operations the losses need. Graphs are built
eagerly; ``backward`` on a scalar accumulates gradients into leaves.
``no_grad`` switches graph construction off for the current thread, which
is how frozen forwards (pool views, teachers, evaluation) stay plain numpy.

Every operation checks its output for NaN/Inf and raises NumericsError,
so a diverging run fails at the first bad value instead of at the metrics.
"""

from __future__ import annotations

import contextlib
import hashlib
import threading
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import ConfigError, NumericsError

LAYERNORM_EPS = 1e-5
LOG_CLAMP = 1e-12
KL_EPS_DEFAULT = 1e-8

# per-thread so concurrent runs cannot switch each other's graphs off
_GRAD_STATE = threading.local()


@contextlib.contextmanager
def no_grad():
    """Disable graph construction in this thread for the block."""
    prev = grad_enabled()
    _GRAD_STATE.enabled = False
    try:
        yield
    finally:
        _GRAD_STATE.enabled = prev


def grad_enabled() -> bool:
    return getattr(_GRAD_STATE, "enabled", True)


def _ensure_finite(arr: np.ndarray) -> None:
    if not np.all(np.isfinite(arr)):
        raise NumericsError("non-finite value in tensor")


class Tensor:
    """Dense float array with optional gradient tracking."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float64)
        _ensure_finite(arr)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def backward(self) -> None:
        if self.data.size != 1:
            raise ValueError("backward requires a scalar output")
        if not self.requires_grad:
            return
        order = _topo_order(self)
        self.grad = np.ones_like(self.data)
        for node in reversed(order):
            if node._backward is None:
                continue
            grads = node._backward(node.grad)
            for parent, g in zip(node._parents, grads):
                if g is None or not parent.requires_grad:
                    continue
                if parent.grad is None:
                    parent.grad = np.zeros_like(parent.data)
                parent.grad += g
            if not isinstance(node, Parameter) and node is not self:
                node.grad = None  # free intermediate buffers early

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __sub__(self, other):
        return add(self, mul(other, -1.0) if isinstance(other, Tensor) else -np.asarray(other))

    def __rsub__(self, other):
        return add(mul(self, -1.0), other)

    def __truediv__(self, other):
        return div(self, other)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis=axis, keepdims=keepdims)

    def reshape(self, shape):
        return reshape(self, shape)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, grad={self.requires_grad})"


class Parameter(Tensor):
    """Trainable leaf. Gradient buffer always exists and accumulates."""

    __slots__ = ("trainable", "name")

    def __init__(self, data, name: str | None = None, trainable: bool = True, dtype=None):
        super().__init__(data, requires_grad=True, dtype=dtype)
        self.trainable = trainable
        self.name = name
        self.grad = np.zeros_like(self.data)

    def zero_grad(self) -> None:
        self.grad[...] = 0.0

    def freeze(self) -> None:
        self.trainable = False
        self.requires_grad = False


def _topo_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def _wrap(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _coerce_pair(a, b) -> tuple[Tensor, Tensor]:
    """Wrap operands, casting bare python scalars to the tensor's dtype.

    0-d float64 arrays are "strong" under numpy 2 promotion and would drag a
    float32 graph up to float64; array operands keep their own dtype so a
    genuine precision mix stays visible.
    """
    if isinstance(a, Tensor) and isinstance(b, Tensor):
        return a, b
    if isinstance(a, Tensor):
        arr = np.asarray(b)
        return a, Tensor(arr.astype(a.dtype) if arr.ndim == 0 else arr)
    if isinstance(b, Tensor):
        arr = np.asarray(a)
        return Tensor(arr.astype(b.dtype) if arr.ndim == 0 else arr), b
    a = _wrap(a)
    return a, _wrap(b)


def _make(data: np.ndarray, parents: Sequence[Tensor], backward: Callable) -> Tensor:
    _ensure_finite(data)
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    req = grad_enabled() and any(p.requires_grad for p in parents)
    out.requires_grad = req
    out._parents = tuple(parents) if req else ()
    out._backward = backward if req else None
    return out


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def add(a, b) -> Tensor:
    a, b = _coerce_pair(a, b)
    out = a.data + b.data

    def backward(g):
        return _unbroadcast(g, a.data.shape), _unbroadcast(g, b.data.shape)

    return _make(out, (a, b), backward)


def mul(a, b) -> Tensor:
    a, b = _coerce_pair(a, b)
    out = a.data * b.data

    def backward(g):
        return (
            _unbroadcast(g * b.data, a.data.shape),
            _unbroadcast(g * a.data, b.data.shape),
        )

    return _make(out, (a, b), backward)


def div(a, b) -> Tensor:
    a, b = _coerce_pair(a, b)
    out = a.data / b.data

    def backward(g):
        return (
            _unbroadcast(g / b.data, a.data.shape),
            _unbroadcast(-g * a.data / (b.data * b.data), b.data.shape),
        )

    return _make(out, (a, b), backward)


def matmul(a, b) -> Tensor:
    a, b = _coerce_pair(a, b)
    out = np.matmul(a.data, b.data)
    a1 = a.data.ndim == 1
    b1 = b.data.ndim == 1

    def backward(g):
        A = a.data[None, :] if a1 else a.data
        B = b.data[:, None] if b1 else b.data
        if a1 and b1:
            G = np.asarray(g).reshape(1, 1)
        elif a1:
            G = g[None, :]
        elif b1:
            G = g[:, None]
        else:
            G = g
        ga = G @ B.T
        gb = A.T @ G
        if a1:
            ga = ga[0]
        if b1:
            gb = gb[:, 0]
        return ga, gb

    return _make(out, (a, b), backward)


def transpose(t) -> Tensor:
    t = _wrap(t)

    def backward(g):
        return (g.T,)

    return _make(t.data.T, (t,), backward)


def reshape(t, shape) -> Tensor:
    t = _wrap(t)
    orig = t.data.shape

    def backward(g):
        return (g.reshape(orig),)

    return _make(t.data.reshape(shape), (t,), backward)


def exp(t) -> Tensor:
    t = _wrap(t)
    out = np.exp(t.data)

    def backward(g):
        return (g * out,)

    return _make(out, (t,), backward)


def log(t) -> Tensor:
    t = _wrap(t)
    out = np.log(t.data)

    def backward(g):
        return (g / t.data,)

    return _make(out, (t,), backward)


def tanh(t) -> Tensor:
    t = _wrap(t)
    out = np.tanh(t.data)

    def backward(g):
        return (g * (1.0 - out * out),)

    return _make(out, (t,), backward)


def maximum0(t) -> Tensor:
    # subgradient at 0 is taken as 0 so clamped entries carry no signal
    t = _wrap(t)
    out = np.maximum(t.data, 0.0)

    def backward(g):
        return (g * (t.data > 0.0),)

    return _make(out, (t,), backward)


def tsum(t, axis=None, keepdims=False) -> Tensor:
    t = _wrap(t)
    out = t.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is None:
            return (np.broadcast_to(g, t.data.shape),)
        gg = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(gg, t.data.shape),)

    return _make(np.asarray(out), (t,), backward)


def tmean(t, axis=None, keepdims=False) -> Tensor:
    t = _wrap(t)
    n = t.data.size if axis is None else t.data.shape[axis]
    return mul(tsum(t, axis=axis, keepdims=keepdims), 1.0 / n)


def diag(t) -> Tensor:
    t = _wrap(t)
    if t.data.ndim != 2 or t.data.shape[0] != t.data.shape[1]:
        raise ValueError("diag expects a square matrix")
    idx = np.arange(t.data.shape[0])
    out = t.data[idx, idx].copy()

    def backward(g):
        z = np.zeros_like(t.data)
        z[idx, idx] = g
        return (z,)

    return _make(out, (t,), backward)


def take_rows(t, idx) -> Tensor:
    t = _wrap(t)
    idx = np.asarray(idx, dtype=np.int64)
    if idx.size and (idx.min() < 0 or idx.max() >= t.data.shape[0]):
        raise ValueError("row index out of range")
    out = t.data[idx]

    def backward(g):
        z = np.zeros_like(t.data)
        np.add.at(z, idx, g)
        return (z,)

    return _make(out, (t,), backward)


def pick_rows(t, cols) -> Tensor:
    """Entry [i, cols[i]] of a 2-D tensor, as a length-N vector."""
    t = _wrap(t)
    cols = np.asarray(cols, dtype=np.int64)
    rows = np.arange(t.data.shape[0])
    if cols.shape != rows.shape:
        raise ValueError("one column index per row required")
    if cols.size and (cols.min() < 0 or cols.max() >= t.data.shape[1]):
        raise ValueError("class index out of range")
    out = t.data[rows, cols].copy()

    def backward(g):
        z = np.zeros_like(t.data)
        np.add.at(z, (rows, cols), g)
        return (z,)

    return _make(out, (t,), backward)


def col(t, j) -> Tensor:
    """Column j of a 2-D tensor, kept as an (N, 1) slab."""
    t = _wrap(t)
    out = t.data[:, j : j + 1].copy()

    def backward(g):
        z = np.zeros_like(t.data)
        z[:, j : j + 1] = g
        return (z,)

    return _make(out, (t,), backward)


def stack_cols(ts: Sequence[Tensor]) -> Tensor:
    ts = [_wrap(t) for t in ts]
    out = np.stack([t.data for t in ts], axis=1)

    def backward(g):
        return tuple(g[:, i] for i in range(len(ts)))

    return _make(out, ts, backward)


def concat_rows(ts: Sequence[Tensor]) -> Tensor:
    ts = [_wrap(t) for t in ts]
    out = np.concatenate([t.data for t in ts], axis=0)
    sizes = [t.data.shape[0] for t in ts]
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, splits, axis=0))

    return _make(out, ts, backward)


def layernorm(t) -> Tensor:
    """Parameter-free layer normalization along the last axis.

    y = (x - mean) / sqrt(var + 1e-5) with the population variance. Needs at
    least two entries per row for the variance to be meaningful.
    """
    t = _wrap(t)
    if t.data.shape[-1] < 2:
        raise ValueError("layernorm needs at least 2 entries")
    x = t.data
    m = x.mean(axis=-1, keepdims=True)
    xc = x - m
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + LAYERNORM_EPS)
    y = xc * inv

    def backward(g):
        gm = g.mean(axis=-1, keepdims=True)
        gy = (g * y).mean(axis=-1, keepdims=True)
        return ((g - gm - y * gy) * inv,)

    return _make(y, (t,), backward)


def l2_normalize(t) -> Tensor:
    t = _wrap(t)
    x = t.data
    n = np.sqrt((x * x).sum(axis=-1, keepdims=True))
    if not np.all(n > 0):
        raise ValueError("cannot normalize a zero-norm vector")
    y = x / n

    def backward(g):
        gy = (g * y).sum(axis=-1, keepdims=True)
        return ((g - y * gy) / n,)

    return _make(y, (t,), backward)


def softmax_temp(t, tau: float) -> Tensor:
    """softmax(x / tau) along the last axis, max-subtracted for stability."""
    if tau <= 0:
        raise ConfigError("softmax temperature must be positive")
    t = _wrap(t)
    z = t.data / tau
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        dot = (g * s).sum(axis=-1, keepdims=True)
        return (s * (g - dot) / tau,)

    return _make(s, (t,), backward)


def cosine_sim(a, b) -> Tensor:
    """Cosine similarity of two 1-D vectors; errors on zero norm."""
    a, b = _wrap(a), _wrap(b)
    if a.data.ndim != 1 or b.data.ndim != 1:
        raise ValueError("cosine_sim expects 1-D vectors")
    if a.data.shape != b.data.shape:
        raise ValueError("length mismatch")
    return tsum(mul(l2_normalize(a), l2_normalize(b)))


def cross_entropy(p, y: int) -> Tensor:
    """-log(p[y] + 1e-12) for a 1-D probability vector."""
    p = _wrap(p)
    if p.data.ndim != 1:
        raise ValueError("cross_entropy expects a 1-D probability vector")
    y = int(y)
    if not 0 <= y < p.data.shape[0]:
        raise ValueError("class index out of range")
    py = p.data[y] + LOG_CLAMP
    out = np.asarray(-np.log(py), dtype=p.data.dtype)

    def backward(g):
        z = np.zeros_like(p.data)
        z[y] = -g / py
        return (z,)

    return _make(out, (p,), backward)


def cross_entropy_rows(p, ys) -> Tensor:
    """Mean of -log(p[i, ys[i]] + 1e-12) over the rows of a batch."""
    p = _wrap(p)
    ys = np.asarray(ys, dtype=np.int64)
    n = p.data.shape[0]
    rows = np.arange(n)
    if ys.shape != (n,):
        raise ValueError("one label per row required")
    if ys.size and (ys.min() < 0 or ys.max() >= p.data.shape[1]):
        raise ValueError("class index out of range")
    pv = p.data[rows, ys] + LOG_CLAMP
    out = np.asarray(-np.log(pv).mean(), dtype=p.data.dtype)

    def backward(g):
        z = np.zeros_like(p.data)
        z[rows, ys] = -g / (pv * n)
        return (z,)

    return _make(out, (p,), backward)


def _teacher_array(teacher) -> np.ndarray:
    arr = teacher.data if isinstance(teacher, Tensor) else np.asarray(teacher)
    if np.any(arr < 0):
        raise ValueError("teacher probabilities must be nonnegative")
    return arr


def kl_div(teacher, student, eps: float = KL_EPS_DEFAULT) -> Tensor:
    """Stabilized KL of teacher from student over 1-D vectors.

    sum_i t_i * (log(t_i + eps) - log(s_i + eps)). The stabilizer sits in
    both logs so identical inputs give exactly 0 at any eps, and a zero
    teacher entry contributes exactly 0 without a special case. The teacher
    never receives gradient; only the student side is differentiated.
    """
    t = _teacher_array(teacher)
    s = _wrap(student)
    if t.shape != s.data.shape or t.ndim != 1:
        raise ValueError("kl_div expects two 1-D vectors of equal length")
    sd = s.data + eps
    out = np.asarray((t * (np.log(t + eps) - np.log(sd))).sum(), dtype=s.data.dtype)

    def backward(g):
        return (-g * t / sd,)

    return _make(out, (s,), backward)


def kl_div_rows(teacher, student, eps: float = KL_EPS_DEFAULT) -> Tensor:
    """Row-wise stabilized KL, averaged over the batch."""
    t = _teacher_array(teacher)
    s = _wrap(student)
    if t.shape != s.data.shape or t.ndim != 2:
        raise ValueError("kl_div_rows expects two 2-D arrays of equal shape")
    n = t.shape[0]
    sd = s.data + eps
    out = np.asarray(
        (t * (np.log(t + eps) - np.log(sd))).sum() / n, dtype=s.data.dtype
    )

    def backward(g):
        return (-g * t / (sd * n),)

    return _make(out, (s,), backward)


def scalar(value, dtype=np.float64) -> Tensor:
    return Tensor(np.asarray(value, dtype=dtype))


def check_prob(vec: np.ndarray, tol: float = 1e-9) -> bool:
    vec = np.asarray(vec)
    return bool(
        np.all(vec >= -tol)
        and np.all(vec <= 1 + tol)
        and np.all(np.abs(vec.sum(axis=-1) - 1.0) <= max(tol, 1e-9))
    )


def checksum(arrays: Iterable[np.ndarray]) -> str:
    """sha256 over dtype, shape and raw bytes of each array, in order."""
    h = hashlib.sha256()
    for a in arrays:
        a = np.ascontiguousarray(a)
        h.update(str(a.dtype).encode())
        h.update(str(a.shape).encode())
        h.update(a.tobytes())
    return h.hexdigest()


@dataclass
class GradCheckReport:
    tol: float
    loss: float
    per_param: dict[str, float] = field(default_factory=dict)

    @property
    def max_rel_err(self) -> float:
        return max(self.per_param.values(), default=0.0)

    @property
    def passed(self) -> bool:
        return self.max_rel_err <= self.tol


def grad_check(
    loss_fn: Callable[[], Tensor],
    params: Sequence[Parameter],
    step: float = 1e-5,
    tol: float = 1e-6,
) -> GradCheckReport:
    """Compare analytic gradients against central finite differences.

    The finite-difference probe always runs in float64 (float32 parameters
    are upcast for the probe and restored afterwards), so it stays a valid
    oracle for 32-bit analytic gradients. Per-parameter error is
    max|a - fd| / max(max|a|, max|fd|, 1): the unit floor stops roundoff
    noise on near-zero gradients from registering as huge relative error.

    ``loss_fn`` must read parameter values at call time and must not cache
    anything derived from them across calls.
    """
    named: list[tuple[str, Parameter]] = []
    for i, p in enumerate(params):
        name = p.name if p.name else f"param{i}"
        named.append((name, p))
    if len({n for n, _ in named}) != len(named):
        raise ValueError("parameter names must be unique")

    for _, p in named:
        p.grad = np.zeros_like(p.data)
    loss = loss_fn()
    if loss.data.size != 1:
        raise ValueError("grad_check expects a scalar loss")
    loss_value = float(loss.data)
    loss.backward()
    analytic = {n: np.array(p.grad, dtype=np.float64) for n, p in named}

    originals = {n: p.data for n, p in named}
    report = GradCheckReport(tol=tol, loss=loss_value)
    try:
        with no_grad():
            for _, p in named:
                p.data = p.data.astype(np.float64)
            for name, p in named:
                fd = np.zeros_like(p.data)
                flat = p.data.ravel()
                fd_flat = fd.ravel()
                for i in range(flat.size):
                    v = flat[i]
                    flat[i] = v + step
                    hi = float(loss_fn().data)
                    flat[i] = v - step
                    lo = float(loss_fn().data)
                    flat[i] = v
                    fd_flat[i] = (hi - lo) / (2.0 * step)
                a = analytic[name]
                denom = max(
                    np.abs(a).max(initial=0.0), np.abs(fd).max(initial=0.0), 1.0
                )
                report.per_param[name] = float(np.abs(a - fd).max(initial=0.0) / denom)
    finally:
        for n, p in named:
            p.data = originals[n]
    return report
