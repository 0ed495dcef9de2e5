"""
Dense float64 tensors with define-by-run reverse-mode differentiation.

Every operation that touches a tensor with ``requires_grad=True`` records its
parents and a backward rule on the output tensor. ``backward`` walks the
recorded graph in reverse topological order. The graph is rebuilt on each
forward pass, which is what the stochastic restructuring in ``saprlab.sapr``
needs: a fresh set of gates means a fresh graph.

Storage is a C-contiguous numpy array, so ``data.ravel()`` is the row-major
flat buffer and strides follow from the shape.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Iterable, Optional, Sequence

import numpy as np

from .errors import ContractError, DimensionError, NumericError

DTYPE = np.float64

_GELU_C = np.sqrt(2.0 / np.pi)


class Tensor:
    """A dense array that can take part in gradient recording."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op", "name")

    def __init__(self, data, requires_grad=False, name=None, _parents=(), _backward=None, op="leaf"):
        arr = np.asarray(data, dtype=DTYPE, order="C")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = np.zeros_like(arr) if (requires_grad and not _parents) else None
        self._parents: tuple = _parents
        self._backward: Optional[Callable] = _backward
        self.op = op
        self.name = name

    # -- basic properties ------------------------------------------------
    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def is_leaf(self):
        return not self._parents

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else self.data.item()

    def detach(self):
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = np.zeros_like(self.data) if self.requires_grad else None

    def __repr__(self):
        tag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{tag}, op={self.op})"

    def __len__(self):
        return self.data.shape[0]

    # -- operator sugar --------------------------------------------------
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
        if isinstance(other, Tensor):
            raise ContractError("division is only supported by scalar constants")
        return mul(self, 1.0 / float(other))

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None, keepdims=False):
        return tensor_sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)


def as_tensor(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def _record(out_data, parents: Sequence[Tensor], backward, op) -> Tensor:
    """Wrap an op result, attaching the backward rule only when some parent needs grad."""
    if any(p.requires_grad for p in parents):
        return Tensor(out_data, requires_grad=True, _parents=tuple(parents), _backward=backward, op=op)
    return Tensor(out_data, op=op)


def _unbroadcast(grad: np.ndarray, shape) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


# ---------------------------------------------------------------------------
# Elementwise arithmetic
# ---------------------------------------------------------------------------


def _check_broadcast(a: Tensor, b: Tensor, opname):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"{opname}: cannot combine shapes {a.shape} and {b.shape}") from None


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "add")

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _record(a.data + b.data, (a, b), backward, "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "sub")

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _record(a.data - b.data, (a, b), backward, "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "mul")

    def backward(g):
        ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _record(a.data * b.data, (a, b), backward, "mul")


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)

    def backward(g):
        return (g * out,)

    return _record(out, (a,), backward, "exp")


def log(a: Tensor) -> Tensor:
    def backward(g):
        return (g / a.data,)

    return _record(np.log(a.data), (a,), backward, "log")


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0

    def backward(g):
        return (g * mask,)

    return _record(np.where(mask, a.data, 0.0), (a,), backward, "relu")


def gelu(a: Tensor) -> Tensor:
    """GELU, tanh form: ``0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3)))``."""
    x = a.data
    inner = _GELU_C * (x + 0.044715 * x * x * x)
    th = np.tanh(inner)
    out = 0.5 * x * (1.0 + th)

    def backward(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * x * x)
        return (g * (0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * dinner),)

    return _record(out, (a,), backward, "gelu")


# ---------------------------------------------------------------------------
# Linear algebra and shape manipulation
# ---------------------------------------------------------------------------


def matmul(a, b) -> Tensor:
    """Matrix product over the last two axes; leading axes broadcast.

    >>> matmul(Tensor([[1., 2.], [3., 4.]]), Tensor([[5., 6.], [7., 8.]])).data
    array([[19., 22.],
           [43., 50.]])
    """
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: shapes {a.shape} and {b.shape} are not aligned")
    try:
        np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError:
        raise DimensionError(f"matmul: batch extents of {a.shape} and {b.shape} differ") from None

    def backward(g):
        ga = _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape) if a.requires_grad else None
        gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape) if b.requires_grad else None
        return ga, gb

    return _record(a.data @ b.data, (a, b), backward, "matmul")


def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(int(s) for s in shape)
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise DimensionError(f"reshape: cannot view {a.shape} as {shape}") from None

    def backward(g):
        return (g.reshape(a.shape),)

    return _record(out, (a,), backward, "reshape")


def transpose(a: Tensor, axes=None) -> Tensor:
    axes = tuple(range(a.ndim))[::-1] if axes is None else tuple(axes)
    if sorted(axes) != list(range(a.ndim)):
        raise DimensionError(f"transpose: axes {axes} invalid for shape {a.shape}")
    inverse = tuple(np.argsort(axes))

    def backward(g):
        return (np.transpose(g, inverse),)

    return _record(np.transpose(a.data, axes), (a,), backward, "transpose")


def swap_last(a: Tensor) -> Tensor:
    axes = list(range(a.ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return transpose(a, axes)


def getitem(a: Tensor, index) -> Tensor:
    """Basic (slice/int) indexing."""
    out = a.data[index]

    def backward(g):
        full = np.zeros_like(a.data)
        full[index] += g
        return (full,)

    return _record(out, (a,), backward, "getitem")


def concat(tensors: Sequence[Tensor], axis=0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as exc:
        raise DimensionError(f"concat: {exc}") from None
    splits = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def backward(g):
        return tuple(np.split(g, splits, axis=axis))

    return _record(out, tensors, backward, "concat")


def pad2d(a: Tensor, top: int, bottom: int, left: int, right: int) -> Tensor:
    """Zero padding of the last two axes."""
    widths = [(0, 0)] * (a.ndim - 2) + [(top, bottom), (left, right)]
    h, w = a.shape[-2:]

    def backward(g):
        return (g[..., top : top + h, left : left + w],)

    return _record(np.pad(a.data, widths), (a,), backward, "pad2d")


def take(a: Tensor, index, axis: int) -> Tensor:
    """Gather along one axis with repeated indices allowed; backward accumulates."""
    index = np.asarray(index, dtype=np.intp)
    axis = axis % a.ndim

    def backward(g):
        full = np.zeros_like(a.data)
        sl = (slice(None),) * axis + (index,)
        np.add.at(full, sl, g)
        return (full,)

    return _record(np.take(a.data, index, axis=axis), (a,), backward, "take")


def gather_rows(a: Tensor, index, inverse=None) -> Tensor:
    """Reorder rows (axis -2) per batch element: ``out[..., i, :] = a[..., index[..., i], :]``.

    ``index`` has shape ``a.shape[:-1]`` (or broadcastable to it). When ``index``
    is a permutation, pass its ``inverse`` so the backward pass is a plain
    gather instead of a scatter-add.
    """
    index = np.asarray(index, dtype=np.intp)
    if index.ndim == a.ndim - 2 + 1 and index.shape[-1] != a.shape[-2]:
        raise DimensionError(f"gather_rows: index of length {index.shape[-1]} for {a.shape[-2]} rows")
    idx = np.broadcast_to(index, a.shape[:-1])[..., None]
    out = np.take_along_axis(a.data, idx, axis=-2)

    def backward(g):
        if inverse is not None:
            inv = np.broadcast_to(np.asarray(inverse, dtype=np.intp), a.shape[:-1])[..., None]
            return (np.take_along_axis(g, inv, axis=-2),)
        full = np.zeros_like(a.data)
        lead = np.indices(a.shape[:-1], sparse=True)
        np.add.at(full, tuple(lead[:-1]) + (idx[..., 0],), g)
        return (full,)

    return _record(out, (a,), backward, "gather_rows")


def masked_gather(a: Tensor, index, mask) -> Tensor:
    """Gather along the last axis per batch row, zeroing positions where ``mask`` is False.

    ``a`` is ``[B, C, L]``; ``index`` and ``mask`` are ``[B, L_out]`` and apply
    to every channel.
    """
    index = np.asarray(index, dtype=np.intp)
    mask = np.asarray(mask, dtype=bool)
    if a.ndim != 3 or index.shape != mask.shape or index.shape[0] != a.shape[0]:
        raise DimensionError(f"masked_gather: input {a.shape}, index {index.shape}, mask {mask.shape}")
    idx = np.broadcast_to(index[:, None, :], (a.shape[0], a.shape[1], index.shape[1]))
    m = mask[:, None, :]
    out = np.where(m, np.take_along_axis(a.data, idx, axis=-1), 0.0)

    def backward(g):
        full = np.zeros_like(a.data)
        b_ix = np.arange(a.shape[0])[:, None, None]
        c_ix = np.arange(a.shape[1])[None, :, None]
        np.add.at(full, (b_ix, c_ix, idx), np.where(m, g, 0.0))
        return (full,)

    return _record(out, (a,), backward, "masked_gather")


# ---------------------------------------------------------------------------
# Reductions
# ---------------------------------------------------------------------------


def _norm_axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(sorted(ax % ndim for ax in axis))


def tensor_sum(a: Tensor, axis=None, keepdims=False) -> Tensor:
    axes = _norm_axes(axis, a.ndim)

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, a.shape),)

    return _record(a.data.sum(axis=axes, keepdims=keepdims), (a,), backward, "sum")


def mean(a: Tensor, axis=None, keepdims=False) -> Tensor:
    axes = _norm_axes(axis, a.ndim)
    count = int(np.prod([a.shape[ax] for ax in axes])) if axes else 1
    return mul(tensor_sum(a, axis=axes, keepdims=keepdims), 1.0 / count)


# ---------------------------------------------------------------------------
# Fused normalisation ops
# ---------------------------------------------------------------------------


def softmax_rows(a: Tensor, axis=-1) -> Tensor:
    """Softmax along ``axis`` with per-row max subtraction."""
    if np.isnan(a.data).any():
        raise NumericError("softmax_rows: NaN in input")
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _record(out, (a,), backward, "softmax")


softmax = softmax_rows


def log_softmax(a: Tensor, axis=-1) -> Tensor:
    if np.isnan(a.data).any():
        raise NumericError("log_softmax: NaN in input")
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    out = shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))

    def backward(g):
        return (g - np.exp(out) * g.sum(axis=axis, keepdims=True),)

    return _record(out, (a,), backward, "log_softmax")


def layer_norm(a: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-6) -> Tensor:
    """Standardise the last axis, then apply ``gain * x + bias``."""
    d = a.shape[-1] if a.ndim else 0
    if d == 0:
        raise DimensionError("layer_norm: zero-length rows")
    if gain.shape != (d,) or bias.shape != (d,):
        raise DimensionError(f"layer_norm: gain {gain.shape} / bias {bias.shape} vs rows of length {d}")
    x = a.data
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * rstd
    out = xhat * gain.data + bias.data

    def backward(g):
        lead = tuple(range(g.ndim - 1))
        g_gain = (g * xhat).sum(axis=lead) if gain.requires_grad else None
        g_bias = g.sum(axis=lead) if bias.requires_grad else None
        g_a = None
        if a.requires_grad:
            gx = g * gain.data
            g_a = rstd * (gx - gx.mean(axis=-1, keepdims=True) - xhat * (gx * xhat).mean(axis=-1, keepdims=True))
        return g_a, g_gain, g_bias

    return _record(out, (a, gain, bias), backward, "layer_norm")


# ---------------------------------------------------------------------------
# Convolution
# ---------------------------------------------------------------------------


def conv2d(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None, padding: int = 0) -> Tensor:
    """Stride-1 2D cross-correlation. ``x`` is ``[B, C, H, W]``, ``weight`` is ``[O, C, k, k]``."""
    if x.ndim != 4 or weight.ndim != 4 or x.shape[1] != weight.shape[1]:
        raise DimensionError(f"conv2d: input {x.shape} incompatible with weight {weight.shape}")
    B, C, H, W = x.shape
    O, _, kh, kw = weight.shape
    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x.data
    Ho, Wo = xp.shape[2] - kh + 1, xp.shape[3] - kw + 1
    if Ho <= 0 or Wo <= 0:
        raise DimensionError(f"conv2d: kernel {weight.shape[2:]} larger than padded input {xp.shape[2:]}")
    # cols: [B, Ho, Wo, C, kh, kw]
    cols = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3)).transpose(0, 2, 3, 1, 4, 5)
    cols2 = cols.reshape(B * Ho * Wo, C * kh * kw)
    wmat = weight.data.reshape(O, -1)
    out = (cols2 @ wmat.T).reshape(B, Ho, Wo, O)
    if bias is not None:
        out = out + bias.data
    out = np.ascontiguousarray(out.transpose(0, 3, 1, 2))
    parents = (x, weight) if bias is None else (x, weight, bias)

    def backward(g):
        gm = g.transpose(0, 2, 3, 1).reshape(B * Ho * Wo, O)
        gw = (gm.T @ cols2).reshape(weight.shape) if weight.requires_grad else None
        gx = None
        if x.requires_grad:
            gcols = (gm @ wmat).reshape(B, Ho, Wo, C, kh, kw)
            gxp = np.zeros_like(xp)
            for i in range(kh):
                for j in range(kw):
                    gxp[:, :, i : i + Ho, j : j + Wo] += gcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
            gx = gxp[:, :, padding : padding + H, padding : padding + W] if padding else gxp
        if bias is None:
            return gx, gw
        gb = g.sum(axis=(0, 2, 3)) if bias.requires_grad else None
        return gx, gw, gb

    return _record(out, parents, backward, "conv2d")


def avg_pool2d(x: Tensor, k: int = 2) -> Tensor:
    B, C, H, W = x.shape
    if H % k or W % k:
        raise DimensionError(f"avg_pool2d: spatial extents {H}x{W} not divisible by {k}")
    return mean(reshape(x, (B, C, H // k, k, W // k, k)), axis=(3, 5))


# ---------------------------------------------------------------------------
# Backward pass
# ---------------------------------------------------------------------------


@dataclass
class Tape:
    """The recorded operations reachable from a root, in topological order."""

    nodes: list = field(default_factory=list)

    @classmethod
    def from_root(cls, root: Tensor) -> "Tape":
        order, seen = [], set()
        stack = [(root, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if parent.requires_grad and id(parent) not in seen:
                    stack.append((parent, False))
        return cls(order)

    def __len__(self):
        return len(self.nodes)

    def __iter__(self):
        return iter(self.nodes)


def backward(loss: Tensor, grad=None) -> None:
    """Accumulate d(loss)/d(t) into ``t.grad`` for every reachable tensor that requires grad."""
    if loss.size != 1:
        raise ContractError(f"backward: loss must be scalar, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ContractError("backward: loss is not connected to any tensor requiring grad")
    tape = Tape.from_root(loss)
    pending = {id(loss): np.ones_like(loss.data) if grad is None else np.asarray(grad, dtype=DTYPE)}
    for node in reversed(tape.nodes):
        g = pending.pop(id(node), None)
        if g is None:
            continue
        # never in-place: intermediate grads may alias arrays handed to parents
        node.grad = g if node.grad is None else node.grad + g
        if node._backward is None:
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            pending[key] = pg if key not in pending else pending[key] + pg


def zero_grad(tensors: Iterable[Tensor]) -> None:
    for t in tensors:
        t.zero_grad()


# ---------------------------------------------------------------------------
# Gradient checking
# ---------------------------------------------------------------------------


@dataclass
class GradCheckReport:
    coords: list
    analytic: np.ndarray
    numeric: np.ndarray
    max_rel_error: float
    tol: float

    @property
    def passed(self) -> bool:
        return bool(self.max_rel_error < self.tol)


def relative_error(analytic, numeric, floor=1e-12):
    analytic, numeric = np.asarray(analytic), np.asarray(numeric)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return np.abs(analytic - numeric) / denom


def grad_check(f, x, h=1e-3, tol=1e-4, coords=None, num_coords=None, rng=None, floor=1e-12) -> GradCheckReport:
    """Compare the recorded gradient of scalar ``f(x)`` with central differences.

    ``coords`` are flat indices into ``x``; by default all of them, or
    ``num_coords`` sampled without replacement from ``rng``.
    """
    base = np.array(as_tensor(x).data, dtype=DTYPE)
    xt = Tensor(base, requires_grad=True)
    out = f(xt)
    backward(out)
    analytic_full = xt.grad.reshape(-1)

    if coords is None:
        if num_coords is None or num_coords >= base.size:
            coords = list(range(base.size))
        else:
            rng = np.random.default_rng(0) if rng is None else rng
            coords = sorted(rng.choice(base.size, size=num_coords, replace=False).tolist())
    flat = base.reshape(-1)
    numeric = np.empty(len(coords))
    for k, c in enumerate(coords):
        orig = flat[c]
        flat[c] = orig + h
        fp = f(Tensor(base)).item()
        flat[c] = orig - h
        fm = f(Tensor(base)).item()
        flat[c] = orig
        numeric[k] = (fp - fm) / (2.0 * h)
    analytic = analytic_full[coords]
    err = relative_error(analytic, numeric, floor=floor)
    return GradCheckReport(list(coords), analytic, numeric, float(err.max()) if len(err) else 0.0, tol)
