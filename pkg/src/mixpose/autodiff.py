"""A small reverse-mode automatic differentiation engine over numpy arrays.

Operations executed inside ``with Tape() as tape:`` are recorded in order;
:func:`backward` replays the recording in reverse.  Outside a tape the same
functions just compute values, which is what finite-difference checks use.

    >>> w = Tensor(np.ones(3), requires_grad=True)
    >>> with Tape() as tape:
    ...     loss = sum_over(square(w))
    >>> backward(tape, loss)[w]
    array([2., 2., 2.])
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import expit

_ACTIVE: list["Tape"] = []


class Tensor:
    __slots__ = ("value", "grad", "requires_grad", "name")

    def __init__(self, value, requires_grad: bool = False, name: str | None = None):
        self.value = np.asarray(value, dtype=np.float64)
        if self.value.ndim > 4:
            raise ValueError(f"tensors are limited to 4 dims, got shape {self.value.shape}")
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self):
        return self.value.shape

    @property
    def size(self):
        return self.value.size

    def __repr__(self):
        tag = f" {self.name!r}" if self.name else ""
        return f"Tensor{tag}(shape={self.shape}, requires_grad={self.requires_grad})"

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

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return scalar_mul(self, -1.0)


@dataclass
class _Node:
    out: Tensor
    parents: tuple[Tensor, ...]
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]
    op: str


class Tape:
    """Ordered record of executed operations; recording order is a topological order."""

    def __init__(self):
        self.nodes: list[_Node] = []

    def __enter__(self):
        _ACTIVE.append(self)
        return self

    def __exit__(self, *exc):
        _ACTIVE.remove(self)
        return False

    def __len__(self):
        return len(self.nodes)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def record(value, parents: Sequence[Tensor], backward_fn, op: str) -> Tensor:
    """Wrap ``value`` as the output of an operation.

    ``backward_fn`` maps the output gradient to one gradient (or ``None``)
    per parent.  Nothing is recorded outside a tape or when no parent
    requires a gradient.
    """
    out = Tensor(value)
    if _ACTIVE and any(p.requires_grad for p in parents):
        out.requires_grad = True
        _ACTIVE[-1].nodes.append(_Node(out, tuple(parents), backward_fn, op))
    return out


def backward(tape: Tape, loss: Tensor) -> dict:
    """Reverse accumulation from a scalar ``loss``.

    Sets ``.grad`` on every tensor that requires a gradient and returns a
    mapping from tensor to gradient.  Gradients are recomputed from scratch on
    each call, so repeated calls give identical results.
    """
    if loss.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.value)}
    seen: dict[int, Tensor] = {id(loss): loss}
    for node in reversed(tape.nodes):
        g = grads.pop(id(node.out), None)
        if g is None:
            continue
        node.out.grad = g
        for parent, pg in zip(node.parents, node.backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            if pg.shape != parent.shape:
                raise RuntimeError(f"{node.op}: gradient shape {pg.shape} != input shape {parent.shape}")
            key = id(parent)
            seen[key] = parent
            grads[key] = grads[key] + pg if key in grads else pg
    result = {}
    for key, t in seen.items():
        if key in grads:
            t.grad = grads[key]
        if t.grad is not None:
            result[t] = t.grad
    # tensors never reached get a zero gradient rather than a stale one
    return _GradMap(result)


class _GradMap(dict):
    def __getitem__(self, t):
        if t in self:
            return dict.__getitem__(self, t)
        return np.zeros_like(t.value)


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _check_broadcast(op, a, b):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ValueError(f"{op}: incompatible shapes {a.shape} and {b.shape}") from None


# -- elementwise --------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast("add", a, b)
    return record(a.value + b.value, (a, b),
                  lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)), "add")


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast("sub", a, b)
    return record(a.value - b.value, (a, b),
                  lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)), "sub")


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast("mul", a, b)
    return record(a.value * b.value, (a, b),
                  lambda g: (_unbroadcast(g * b.value, a.shape), _unbroadcast(g * a.value, b.shape)), "mul")


def div(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast("div", a, b)
    out = a.value / b.value
    return record(out, (a, b),
                  lambda g: (_unbroadcast(g / b.value, a.shape), _unbroadcast(-g * out / b.value, b.shape)),
                  "div")


def scalar_mul(a, c: float) -> Tensor:
    a = _as_tensor(a)
    return record(a.value * c, (a,), lambda g: (g * c,), "scalar_mul")


def exp(a) -> Tensor:
    a = _as_tensor(a)
    out = np.exp(a.value)
    return record(out, (a,), lambda g: (g * out,), "exp")


def log(a) -> Tensor:
    a = _as_tensor(a)
    return record(np.log(a.value), (a,), lambda g: (g / a.value,), "log")


def abs(a) -> Tensor:  # noqa: A001 - mirrors numpy naming
    a = _as_tensor(a)
    return record(np.abs(a.value), (a,), lambda g: (g * np.sign(a.value),), "abs")


def square(a) -> Tensor:
    a = _as_tensor(a)
    return record(a.value ** 2, (a,), lambda g: (2 * g * a.value,), "square")


def _sigmoid(x):
    return expit(x)


def sigmoid(a) -> Tensor:
    a = _as_tensor(a)
    s = _sigmoid(a.value)
    return record(s, (a,), lambda g: (g * s * (1 - s),), "sigmoid")


def softplus(a) -> Tensor:
    a = _as_tensor(a)
    x = a.value
    out = np.maximum(x, 0) + np.log1p(np.exp(-np.abs(x)))
    return record(out, (a,), lambda g: (g * _sigmoid(x),), "softplus")


def swish(a) -> Tensor:
    a = _as_tensor(a)
    x = a.value
    s = _sigmoid(x)
    return record(x * s, (a,), lambda g: (g * (s + x * s * (1 - s)),), "swish")


# -- reductions and shape -----------------------------------------------------

def _axes(axes, ndim):
    if axes is None:
        return tuple(range(ndim))
    axes = (axes,) if np.isscalar(axes) else tuple(axes)
    return tuple(a % ndim for a in axes)


def sum_over(a, axes=None, keepdims: bool = False) -> Tensor:
    a = _as_tensor(a)
    ax = _axes(axes, a.value.ndim)
    out = a.value.sum(axis=ax, keepdims=keepdims)

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, ax)
        return (np.broadcast_to(g, a.shape).copy(),)
    return record(out, (a,), bw, "sum_over")


def logsumexp_over(a, axis: int = -1, keepdims: bool = False) -> Tensor:
    a = _as_tensor(a)
    x = a.value
    m = np.max(x, axis=axis, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    with np.errstate(divide="ignore"):
        lse = np.log(np.sum(np.exp(x - m), axis=axis, keepdims=True)) + m

    def bw(g):
        gk = g if keepdims else np.expand_dims(g, axis)
        return (gk * np.exp(x - lse),)
    return record(lse if keepdims else np.squeeze(lse, axis=axis), (a,), bw, "logsumexp_over")


def gather(a, indices, axis: int = -1) -> Tensor:
    a = _as_tensor(a)
    idx = np.asarray(indices, dtype=np.int64)
    if idx.ndim != 1:
        raise ValueError(f"gather: indices must be 1-D, got shape {idx.shape}")
    axis = axis % a.value.ndim
    if idx.size and (idx.min() < -a.shape[axis] or idx.max() >= a.shape[axis]):
        raise ValueError(f"gather: index out of range for axis {axis} of shape {a.shape}")

    def bw(g):
        full = np.zeros_like(a.value)
        np.add.at(full, (slice(None),) * axis + (idx,), g)
        return (full,)
    return record(np.take(a.value, idx, axis=axis), (a,), bw, "gather")


def reshape(a, shape) -> Tensor:
    a = _as_tensor(a)
    return record(a.value.reshape(shape), (a,), lambda g: (g.reshape(a.shape),), "reshape")


def transpose(a, axes) -> Tensor:
    a = _as_tensor(a)
    inv = np.argsort(axes)
    return record(np.transpose(a.value, axes), (a,), lambda g: (np.transpose(g, inv),), "transpose")


def concat(parts: Sequence, axis: int = 0) -> Tensor:
    parts = [_as_tensor(p) for p in parts]
    sizes = np.cumsum([p.shape[axis] for p in parts])[:-1]

    def bw(g):
        return tuple(np.split(g, sizes, axis=axis))
    return record(np.concatenate([p.value for p in parts], axis=axis), parts, bw, "concat")


# -- convolution --------------------------------------------------------------

def conv2d_3x3(x, w, b, stride: int = 1, pad: int = 1) -> Tensor:
    """3x3 cross-correlation of ``x`` (B, C, H, W) with ``w`` (O, C, 3, 3) plus bias ``b`` (O,)."""
    x, w, b = _as_tensor(x), _as_tensor(w), _as_tensor(b)
    if x.value.ndim != 4 or w.shape[1:] != (x.shape[1], 3, 3) or b.shape != (w.shape[0],):
        raise ValueError(f"conv2d_3x3: incompatible shapes input {x.shape}, weights {w.shape}, bias {b.shape}")
    B, C, H, W = x.shape
    O = w.shape[0]
    xp = np.pad(x.value, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    win = sliding_window_view(xp, (3, 3), axis=(2, 3))[:, :, ::stride, ::stride]
    Ho, Wo = win.shape[2], win.shape[3]
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(B * Ho * Wo, C * 9)
    wmat = w.value.reshape(O, C * 9)
    out = (cols @ wmat.T + b.value).reshape(B, Ho, Wo, O).transpose(0, 3, 1, 2)

    def bw(g):
        gf = g.transpose(0, 2, 3, 1).reshape(B * Ho * Wo, O)
        gw = (gf.T @ cols).reshape(w.shape)
        gb = gf.sum(axis=0)
        gx = None
        if x.requires_grad:
            # (3, 3, B, C, Ho, Wo) so each kernel tap is one contiguous block
            gcols = np.ascontiguousarray((gf @ wmat).reshape(B, Ho, Wo, C, 3, 3).transpose(4, 5, 0, 3, 1, 2))
            gxp = np.zeros_like(xp)
            for i in range(3):
                for j in range(3):
                    gxp[:, :, i:i + stride * Ho:stride, j:j + stride * Wo:stride] += gcols[i, j]
            gx = gxp[:, :, pad:pad + H, pad:pad + W]
        return gx, gw, gb
    return record(out, (x, w, b), bw, "conv2d_3x3")


# -- finite-difference checking -----------------------------------------------

@dataclass
class GradCheckReport:
    max_rel_err: float
    probes: int
    excluded: list = field(default_factory=list)  # (param index, flat index) at non-smooth points
    errors: list = field(default_factory=list)
    pairs: list = field(default_factory=list)  # (analytic, numeric) per kept probe
    f0: float = 0.0


def _value(f) -> float:
    return float(np.asarray(f().value).reshape(()))


def grad_check(f: Callable[[], Tensor], params: Sequence[Tensor], eps: float = 1e-4,
               probes: int = 64, rng=None, guard: Callable[[int, int], bool] | None = None,
               kink_tol: float = 1e-2) -> GradCheckReport:
    """Compare reverse-mode gradients of ``f()`` to central differences.

    ``f`` rebuilds its scalar output from the current values of ``params``.
    Probes where ``guard(param_index, flat_index)`` is true, or where the two
    one-sided slopes disagree by more than ``kink_tol`` (a kink inside
    ``[p - eps, p + eps]``), are excluded and listed in the report.
    """
    rng = np.random.default_rng(rng)
    with Tape() as tape:
        loss = f()
    grads = backward(tape, loss)
    analytic = [grads[p].copy() for p in params]
    sizes = np.array([p.size for p in params])
    f0 = _value(f)

    report = GradCheckReport(0.0, 0, f0=f0)
    tried = set()
    budget = 20 * probes
    while report.probes < probes and budget > 0:
        budget -= 1
        pi = int(rng.choice(len(params), p=sizes / sizes.sum()))
        fi = int(rng.integers(sizes[pi]))
        if (pi, fi) in tried:
            if len(tried) >= sizes.sum():
                break
            continue
        tried.add((pi, fi))
        if guard is not None and guard(pi, fi):
            report.excluded.append((pi, fi))
            continue
        flat = params[pi].value.reshape(-1)
        orig = flat[fi]
        flat[fi] = orig + eps
        fp = _value(f)
        flat[fi] = orig - eps
        fm = _value(f)
        flat[fi] = orig
        right, left = (fp - f0) / eps, (f0 - fm) / eps
        if np.abs(right - left) > kink_tol * max(np.abs(right), np.abs(left), 1.0):
            report.excluded.append((pi, fi))
            continue
        num = (fp - fm) / (2 * eps)
        a = analytic[pi].reshape(-1)[fi]
        err = np.abs(a - num) / max(np.abs(a), np.abs(num), 1e-8)
        report.errors.append(float(err))
        report.pairs.append((float(a), float(num)))
        report.max_rel_err = max(report.max_rel_err, float(err))
        report.probes += 1
    return report


def write_gradcheck_csv(path, rows) -> None:
    """Rows of ``(op, probes, max_rel_err)``."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["op", "probes", "max_rel_err"])
        for op, n, err in rows:
            w.writerow([op, n, repr(float(err))])
