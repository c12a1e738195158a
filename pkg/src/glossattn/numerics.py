"""Dense float64 tensors with tape-style reverse-mode differentiation.

Every op takes :class:`Tensor` (or plain numbers/arrays, treated as
constants) and returns a new :class:`Tensor`.  When any input requires a
gradient and recording is enabled, the result carries an :class:`OpNode`
holding its inputs and a closure that maps the output gradient to input
gradients.  :func:`backward` walks those nodes once each, in reverse
topological order.
"""

from __future__ import annotations

import contextlib
from dataclasses import dataclass
from typing import Callable, Iterator, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "OpNode",
    "ShapeError",
    "ContractError",
    "no_grad",
    "is_grad_enabled",
    "backward",
    "matmul",
    "add",
    "sub",
    "mul",
    "div",
    "neg",
    "relu",
    "softmax",
    "log_softmax",
    "layer_norm",
    "batch_norm",
    "dropout",
    "sum",
    "mean",
    "max",
    "cosine_similarity",
    "embedding",
    "concat",
    "getitem",
    "reshape",
    "transpose",
    "masked_fill",
    "floor_mod",
    "interp_gather",
    "finite_diff_grad",
    "relative_error",
]


class ShapeError(ValueError):
    """Operand extents do not conform to what an op needs."""


class ContractError(ValueError):
    """A precondition on values (not shapes) was violated."""


_GRAD_ENABLED = True


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Disable graph recording inside the block."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def is_grad_enabled() -> bool:
    return _GRAD_ENABLED


@dataclass(eq=False)
class OpNode:
    kind: str
    inputs: tuple["Tensor", ...]
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]


class Tensor:
    __array_priority__ = 1000

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.node: OpNode | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _record(data: np.ndarray, kind: str, inputs: Sequence[Tensor], grad_fn) -> Tensor:
    out = Tensor(data)
    if _GRAD_ENABLED and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out.node = OpNode(kind, tuple(inputs), grad_fn)
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _broadcast_shape(kind: str, a: Tensor, b: Tensor) -> tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{kind}: cannot broadcast extents {a.shape} and {b.shape}") from None


# ---------------------------------------------------------------------------
# backward
# ---------------------------------------------------------------------------


def _topological(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        t, expanded = stack.pop()
        if expanded:
            order.append(t)
            continue
        if id(t) in seen:
            continue
        seen.add(id(t))
        stack.append((t, True))
        if t.node is not None:
            for parent in t.node.inputs:
                if parent.requires_grad and id(parent) not in seen:
                    stack.append((parent, False))
    return order


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` on every tensor that requires it and reaches ``loss``.

    Leaf gradients accumulate across calls; intermediate gradients are
    overwritten.
    """
    if loss.size != 1:
        raise ContractError(f"backward: loss must be scalar, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ContractError("backward: loss is not connected to any tensor requiring grad")
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for t in reversed(_topological(loss)):
        g = grads.pop(id(t), None)
        if g is None:
            continue
        if t.node is None:
            t.grad = g if t.grad is None else t.grad + g
            continue
        t.grad = g
        for parent, pg in zip(t.node.inputs, t.node.backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            grads[key] = pg if key not in grads else grads[key] + pg


# ---------------------------------------------------------------------------
# linear algebra and elementwise arithmetic
# ---------------------------------------------------------------------------


def matmul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul: operands need at least 2 dims, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: inner extents differ, {a.shape} @ {b.shape}")
    try:
        out = np.matmul(a.data, b.data)
    except ValueError:
        raise ShapeError(f"matmul: batch extents {a.shape[:-2]} and {b.shape[:-2]} do not broadcast") from None

    def grad_fn(g):
        ga = _unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape) if a.requires_grad else None
        gb = _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape) if b.requires_grad else None
        return ga, gb

    return _record(out, "matmul", (a, b), grad_fn)


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_shape("add", a, b)

    def grad_fn(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _record(a.data + b.data, "add", (a, b), grad_fn)


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_shape("sub", a, b)

    def grad_fn(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _record(a.data - b.data, "sub", (a, b), grad_fn)


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_shape("mul", a, b)

    def grad_fn(g):
        ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _record(a.data * b.data, "mul", (a, b), grad_fn)


def div(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_shape("div", a, b)
    out = a.data / b.data

    def grad_fn(g):
        ga = _unbroadcast(g / b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(-g * out / b.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _record(out, "div", (a, b), grad_fn)


def neg(a) -> Tensor:
    a = _as_tensor(a)
    return _record(-a.data, "neg", (a,), lambda g: (-g,))


def relu(x) -> Tensor:
    x = _as_tensor(x)
    # subgradient at exactly 0 is 0
    active = x.data > 0
    return _record(np.where(active, x.data, 0.0), "relu", (x,), lambda g: (g * active,))


# ---------------------------------------------------------------------------
# normalisations
# ---------------------------------------------------------------------------


def _row_max(kind: str, x: np.ndarray) -> np.ndarray:
    m = x.max(axis=-1, keepdims=True)
    if x.shape[-1] == 0 or np.any(np.isneginf(m)):
        raise ContractError(f"{kind}: a row has no unmasked entries")
    return m


def softmax(x) -> Tensor:
    """Softmax over the last axis.  ``-inf`` entries receive zero weight."""
    x = _as_tensor(x)
    e = np.exp(x.data - _row_max("softmax", x.data))
    y = e / e.sum(axis=-1, keepdims=True)

    def grad_fn(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return _record(y, "softmax_last_dim", (x,), grad_fn)


def log_softmax(x) -> Tensor:
    x = _as_tensor(x)
    shifted = x.data - _row_max("log_softmax", x.data)
    y = shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))

    def grad_fn(g):
        return (g - np.exp(y) * g.sum(axis=-1, keepdims=True),)

    return _record(y, "log_softmax", (x,), grad_fn)


def layer_norm(x, gain, bias, eps: float = 1e-6) -> Tensor:
    x, gain, bias = _as_tensor(x), _as_tensor(gain), _as_tensor(bias)
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise ShapeError(f"layer_norm: gain {gain.shape} / bias {bias.shape} do not match feature extent {d}")
    mu = x.data.mean(axis=-1, keepdims=True)
    centred = x.data - mu
    rstd = 1.0 / np.sqrt((centred**2).mean(axis=-1, keepdims=True) + eps)
    xhat = centred * rstd

    def grad_fn(g):
        gx = gg = gb = None
        if x.requires_grad:
            gxhat = g * gain.data
            gx = rstd * (
                gxhat
                - gxhat.mean(axis=-1, keepdims=True)
                - xhat * (gxhat * xhat).mean(axis=-1, keepdims=True)
            )
        if gain.requires_grad:
            gg = (g * xhat).reshape(-1, d).sum(axis=0)
        if bias.requires_grad:
            gb = g.reshape(-1, d).sum(axis=0)
        return gx, gg, gb

    return _record(xhat * gain.data + bias.data, "layer_norm", (x, gain, bias), grad_fn)


def batch_norm(
    x,
    gain,
    bias,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    training: bool,
    mask: np.ndarray | None = None,
    momentum: float = 0.1,
    eps: float = 1e-5,
) -> Tensor:
    """Normalise features (last axis) across all leading positions.

    In training mode the statistics come from the rows selected by ``mask``
    (every row when ``mask`` is None) and ``running_mean``/``running_var`` are
    updated in place; in eval mode the running statistics are used.
    """
    x, gain, bias = _as_tensor(x), _as_tensor(gain), _as_tensor(bias)
    c = x.shape[-1]
    if gain.shape != (c,) or bias.shape != (c,) or running_mean.shape != (c,):
        raise ShapeError(f"batch_norm: parameter extents do not match feature extent {c}")
    flat = x.data.reshape(-1, c)
    if not training:
        rstd = 1.0 / np.sqrt(running_var + eps)
        xhat = (x.data - running_mean) * rstd

        def eval_grad(g):
            g2 = g.reshape(-1, c)
            return (
                g * gain.data * rstd,
                (g2 * xhat.reshape(-1, c)).sum(axis=0),
                g2.sum(axis=0),
            )

        return _record(xhat * gain.data + bias.data, "batch_norm", (x, gain, bias), eval_grad)

    sel = np.ones(flat.shape[0], dtype=bool) if mask is None else np.asarray(mask, dtype=bool).reshape(-1)
    if sel.shape[0] != flat.shape[0]:
        raise ShapeError(f"batch_norm: mask covers {sel.shape[0]} rows, input has {flat.shape[0]}")
    n = int(sel.sum())
    if n < 2:
        raise ContractError(f"batch_norm: training mode needs at least 2 rows, got {n} (variance undefined)")
    rows = flat[sel]
    mu = rows.mean(axis=0)
    var = rows.var(axis=0)
    running_mean *= 1.0 - momentum
    running_mean += momentum * mu
    running_var *= 1.0 - momentum
    running_var += momentum * var * n / (n - 1)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = (flat - mu) * rstd

    def grad_fn(g):
        g2 = g.reshape(-1, c)
        gx = None
        if x.requires_grad:
            G = g2 * gain.data
            s1 = G.sum(axis=0)
            s2 = (G * xhat).sum(axis=0)
            gx = rstd * G
            gx[sel] -= (rstd / n) * (s1 + xhat[sel] * s2)
            gx = gx.reshape(x.shape)
        return gx, (g2 * xhat).sum(axis=0), g2.sum(axis=0)

    out = (xhat * gain.data + bias.data).reshape(x.shape)
    return _record(out, "batch_norm", (x, gain, bias), grad_fn)


def dropout(x, p: float, rng: np.random.Generator | None, training: bool) -> Tensor:
    """Inverted dropout; identity when not training or ``p == 0``."""
    x = _as_tensor(x)
    if not training or p == 0.0:
        return x
    if not 0.0 <= p < 1.0:
        raise ContractError(f"dropout: p must be in [0, 1), got {p}")
    keep = (rng.random(x.shape) >= p) / (1.0 - p)
    return _record(x.data * keep, "dropout", (x,), lambda g: (g * keep,))


# ---------------------------------------------------------------------------
# reductions
# ---------------------------------------------------------------------------


def _expand(g: np.ndarray, shape, axis, keepdims: bool) -> np.ndarray:
    if axis is not None and not keepdims:
        g = np.expand_dims(g, axis)
    return np.broadcast_to(g, shape)


def sum(x, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    x = _as_tensor(x)
    out = x.data.sum(axis=axis, keepdims=keepdims)
    return _record(out, "sum_reduce", (x,), lambda g: (_expand(g, x.shape, axis, keepdims).copy(),))


def mean(x, axis=None, keepdims: bool = False) -> Tensor:
    x = _as_tensor(x)
    out = x.data.mean(axis=axis, keepdims=keepdims)
    count = x.size // out.size if out.size else 1
    return _record(out, "mean_reduce", (x,), lambda g: (_expand(g / count, x.shape, axis, keepdims).copy(),))


def max(x, axis: int = -1, keepdims: bool = False) -> Tensor:  # noqa: A001
    """Maximum along one axis; ties route the gradient to the first maximiser."""
    x = _as_tensor(x)
    idx = np.expand_dims(x.data.argmax(axis=axis), axis)
    out = np.take_along_axis(x.data, idx, axis=axis)
    if not keepdims:
        out = np.squeeze(out, axis)

    def grad_fn(g):
        gx = np.zeros_like(x.data)
        np.put_along_axis(gx, idx, g if keepdims else np.expand_dims(g, axis), axis=axis)
        return (gx,)

    return _record(out, "max_reduce", (x,), grad_fn)


def cosine_similarity(a, b) -> Tensor:
    """Cosine of the angle between ``a`` and ``b`` along the last axis."""
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_shape("cosine_similarity", a, b)
    na = np.sqrt((a.data**2).sum(axis=-1, keepdims=True))
    nb = np.sqrt((b.data**2).sum(axis=-1, keepdims=True))
    if np.any(na == 0) or np.any(nb == 0):
        raise ContractError("cosine_similarity: zero-norm vector")
    dot = (a.data * b.data).sum(axis=-1, keepdims=True)
    cos = dot / (na * nb)

    def grad_fn(g):
        g = g[..., None]
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(g * (b.data / (na * nb) - cos * a.data / na**2), a.shape)
        if b.requires_grad:
            gb = _unbroadcast(g * (a.data / (na * nb) - cos * b.data / nb**2), b.shape)
        return ga, gb

    return _record(cos[..., 0], "cosine_similarity", (a, b), grad_fn)


# ---------------------------------------------------------------------------
# indexing and layout
# ---------------------------------------------------------------------------


def embedding(table, ids) -> Tensor:
    table = _as_tensor(table)
    ids = np.asarray(ids, dtype=np.int64)
    if table.ndim != 2:
        raise ShapeError(f"embedding_lookup: table must be 2-d, got {table.shape}")
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise ContractError(f"embedding_lookup: id out of range [0, {table.shape[0]})")

    def grad_fn(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, ids.reshape(-1), g.reshape(-1, table.shape[1]))
        return (gt,)

    return _record(table.data[ids], "embedding_lookup", (table,), grad_fn)


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [_as_tensor(t) for t in tensors]
    try:
        out = np.concatenate([t.data for t in ts], axis=axis)
    except ValueError:
        raise ShapeError(f"concat: extents {[t.shape for t in ts]} do not agree off axis {axis}") from None
    bounds = np.cumsum([t.shape[axis] for t in ts])[:-1]

    def grad_fn(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _record(out, "concat", ts, grad_fn)


def getitem(x, index) -> Tensor:
    """Basic or integer-array indexing (the ``slice`` primitive)."""
    x = _as_tensor(x)
    out = x.data[index]

    def grad_fn(g):
        gx = np.zeros_like(x.data)
        np.add.at(gx, index, g)
        return (gx,)

    return _record(np.array(out), "slice", (x,), grad_fn)


def reshape(x, shape) -> Tensor:
    x = _as_tensor(x)
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot view {x.shape} as {shape}") from None
    return _record(out, "reshape", (x,), lambda g: (g.reshape(x.shape),))


def transpose(x, axes: Sequence[int]) -> Tensor:
    x = _as_tensor(x)
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    return _record(x.data.transpose(axes), "transpose", (x,), lambda g: (g.transpose(inverse),))


def masked_fill(x, mask: np.ndarray, value: float) -> Tensor:
    """Replace entries where ``mask`` is True by ``value`` (no gradient there)."""
    x = _as_tensor(x)
    mask = np.asarray(mask, dtype=bool)
    try:
        out = np.where(mask, value, x.data)
    except ValueError:
        raise ShapeError(f"masked_fill: mask {mask.shape} does not broadcast to {x.shape}") from None
    if out.shape != x.shape:
        raise ShapeError(f"masked_fill: mask {mask.shape} would enlarge {x.shape}")
    return _record(out, "masked_fill", (x,), lambda g: (np.where(mask, 0.0, g),))


# ---------------------------------------------------------------------------
# fractional positions
# ---------------------------------------------------------------------------


def floor_mod(x, modulus) -> Tensor:
    """``x mod modulus`` with the result in ``[0, modulus)``; derivative 1."""
    x = _as_tensor(x)
    m = np.asarray(modulus, dtype=np.float64)
    out = np.mod(x.data, m)
    # np.mod can round a tiny negative up to exactly m
    out = np.where(out >= m, out - m, out)
    return _record(out, "floor_mod", (x,), lambda g: (g,))


def interp_gather(src, pos, modulus) -> Tensor:
    """Linearly interpolate rows of ``src`` at fractional positions.

    ``src`` has shape ``(*lead, T, d)`` and ``pos`` has shape ``(*lead, Q, N)``
    with every entry in ``[0, modulus)``.  Position ``p`` reads
    ``(1 - w) * src[b] + w * src[u]`` where ``b = floor(p)``, ``w = p - b`` and
    ``u = (b + 1) mod modulus``.  Returns shape ``(*lead, Q, N, d)``.
    Gradients flow to both ``src`` and ``pos``.
    """
    src, pos = _as_tensor(src), _as_tensor(pos)
    lead = src.shape[:-2]
    T, d = src.shape[-2:]
    if pos.shape[:-2] != lead:
        raise ShapeError(f"interp_gather: leading extents {pos.shape[:-2]} != {lead}")
    Q, N = pos.shape[-2:]
    m = np.broadcast_to(np.asarray(modulus, dtype=np.float64), pos.shape)
    p = pos.data
    if np.any(p < 0) or np.any(p >= m) or np.any(m > T):
        raise ContractError("interp_gather: position outside [0, T)")

    L = int(np.prod(lead, dtype=np.int64))
    flat_src = src.data.reshape(L * T, d)
    base = np.floor(p)
    w = (p - base).reshape(L, Q * N, 1)
    lo = base.astype(np.int64).reshape(L, Q * N)
    hi = ((base + 1) % m).astype(np.int64).reshape(L, Q * N)
    offset = (np.arange(L, dtype=np.int64) * T)[:, None]
    lo_idx = (lo + offset).reshape(-1)
    hi_idx = (hi + offset).reshape(-1)
    k_lo = flat_src[lo_idx].reshape(L, Q * N, d)
    k_hi = flat_src[hi_idx].reshape(L, Q * N, d)
    out = (1.0 - w) * k_lo + w * k_hi

    def grad_fn(g):
        g = g.reshape(L, Q * N, d)
        gsrc = gpos = None
        if src.requires_grad:
            gflat = np.zeros((L * T, d))
            np.add.at(gflat, lo_idx, ((1.0 - w) * g).reshape(-1, d))
            np.add.at(gflat, hi_idx, (w * g).reshape(-1, d))
            gsrc = gflat.reshape(src.shape)
        if pos.requires_grad:
            gpos = (g * (k_hi - k_lo)).sum(axis=-1).reshape(pos.shape)
        return gsrc, gpos

    return _record(out.reshape(*lead, Q, N, d), "interp_gather", (src, pos), grad_fn)


# ---------------------------------------------------------------------------
# gradient oracle
# ---------------------------------------------------------------------------


def finite_diff_grad(fn: Callable[[np.ndarray], float], point, step: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of scalar ``fn`` at ``point``.

    ``fn`` receives a float64 array shaped like ``point``; the array passed
    in is a private copy that this routine perturbs one coordinate at a time.
    """
    if step <= 0:
        raise ContractError(f"finite_diff_grad: step must be positive, got {step}")
    x = np.array(point.data if isinstance(point, Tensor) else point, dtype=np.float64)
    grad = np.zeros_like(x)
    flat, gflat = x.reshape(-1), grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        f_plus = float(fn(x))
        flat[i] = orig - step
        f_minus = float(fn(x))
        flat[i] = orig
        gflat[i] = (f_plus - f_minus) / (2.0 * step)
    return grad


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """``max|a - n| / max(max|a|, max|n|)``; 0 when both are identically 0."""
    analytic, numeric = np.asarray(analytic), np.asarray(numeric)
    scale = np.max(np.abs(np.concatenate([analytic.ravel(), numeric.ravel()])), initial=0.0)
    diff = float(np.max(np.abs(analytic - numeric), initial=0.0))
    if scale == 0.0:
        return diff
    return diff / scale
