"""Dense tensors with tape-based reverse-mode automatic differentiation.

Every differentiable operation returns a new :class:`Tensor` that remembers
the operation name, its inputs and a closure computing input gradients from
the output gradient. :func:`backward` linearises that graph into a tape
(topological order, inputs before consumers) and replays it in reverse.

Tensors wrap numpy arrays. Precision follows the inputs: 64-bit for gradient
verification, 32-bit for training.
"""

from __future__ import annotations

import contextlib
import contextvars
import functools
import math
from typing import Callable, Iterator, Sequence

import numpy as np

from .errors import ContractError, DimensionError

__all__ = [
    "Tensor",
    "no_grad",
    "is_grad_enabled",
    "corrupt_backward",
    "build_tape",
    "backward",
    "add",
    "sub",
    "mul",
    "scale",
    "neg",
    "sum_all",
    "mean_all",
    "log",
    "clip",
    "matmul",
    "conv2d",
    "maxpool2d",
    "bilinear_upsample2x",
    "layernorm",
    "softmax_lastdim",
    "elu",
    "sigmoid",
    "concat_channels",
    "reshape",
    "transpose_last2",
    "permute",
]

_grad_enabled: contextvars.ContextVar[bool] = contextvars.ContextVar(
    "tunet_grad_enabled", default=True
)

# op name -> multiplier applied to that op's input gradients. Only ever
# populated by corrupt_backward() to build negative controls.
_BACKWARD_SCALE: dict[str, float] = {}

BackwardFn = Callable[[np.ndarray], Sequence["np.ndarray | None"]]


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Disable recording for operations executed inside the block."""
    token = _grad_enabled.set(False)
    try:
        yield
    finally:
        _grad_enabled.reset(token)


def is_grad_enabled() -> bool:
    return _grad_enabled.get()


@contextlib.contextmanager
def corrupt_backward(op: str, factor: float = 1.1) -> Iterator[None]:
    """Deliberately scale the gradient rule of ``op`` (negative-control hook)."""
    previous = _BACKWARD_SCALE.get(op)
    _BACKWARD_SCALE[op] = factor
    try:
        yield
    finally:
        if previous is None:
            _BACKWARD_SCALE.pop(op, None)
        else:
            _BACKWARD_SCALE[op] = previous


class Tensor:
    """N-dimensional real array with an optional gradient record.

    Leaf tensors created with ``requires_grad=True`` own a ``grad`` array of
    the same shape, initialised to zero; :func:`backward` accumulates into it.
    Tensors produced by operations carry the record used by the tape instead.
    """

    __slots__ = ("data", "requires_grad", "grad", "op", "inputs", "_backward")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.array(data, dtype=dtype)
        if dtype is None and arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float64)
        if any(d <= 0 for d in arr.shape):
            raise DimensionError(f"tensor dimensions must be positive, got {arr.shape}")
        self.data: np.ndarray = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = np.zeros_like(arr) if requires_grad else None
        self.op: str | None = None
        self.inputs: tuple[Tensor, ...] = ()
        self._backward: BackwardFn | None = None

    @classmethod
    def _from_op(
        cls, data: np.ndarray, op: str, inputs: Sequence[Tensor], backward_fn: BackwardFn
    ) -> Tensor:
        out = cls.__new__(cls)
        out.data = data
        out.grad = None
        needs = _grad_enabled.get() and any(t.requires_grad for t in inputs)
        out.requires_grad = needs
        if needs:
            out.op = op
            out.inputs = tuple(inputs)
            out._backward = backward_fn
        else:
            out.op = None
            out.inputs = ()
            out._backward = None
        return out

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    @property
    def is_leaf(self) -> bool:
        return self._backward is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def zero_grad(self) -> None:
        if self.requires_grad:
            self.grad = np.zeros_like(self.data)

    def detach(self) -> Tensor:
        return Tensor(self.data.copy())

    def __repr__(self) -> str:
        tag = f", op={self.op}" if self.op else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{tag})"

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
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


def _as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(x, dtype=dtype)


def values(x) -> np.ndarray:
    """The array behind a Tensor, or ``x`` itself as an array."""
    return x.data if isinstance(x, Tensor) else np.asarray(x)


# ---------------------------------------------------------------------------
# tape


def build_tape(loss: Tensor) -> list[Tensor]:
    """Return the recorded nodes reachable from ``loss`` in topological order.

    Every entry's recorded inputs appear before it; leaves are excluded.
    """
    order: list[Tensor] = []
    visited: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if node.is_leaf:
            continue
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for parent in node.inputs:
            if not parent.is_leaf and id(parent) not in visited:
                stack.append((parent, False))
    return order


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``grad`` of every reachable leaf.

    Raises:
        ContractError: ``loss`` has more than one element.
    """
    if loss.size != 1:
        raise ContractError(f"backward() needs a scalar loss, got shape {loss.shape}")
    if loss.is_leaf:
        if loss.requires_grad:
            loss.grad = loss.grad + np.ones_like(loss.data)
        return
    tape = build_tape(loss)
    pending: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(tape):
        g = pending.pop(id(node), None)
        if g is None:
            continue
        in_grads = node._backward(g)
        factor = _BACKWARD_SCALE.get(node.op)
        for parent, pg in zip(node.inputs, in_grads):
            if pg is None or not parent.requires_grad:
                continue
            if factor is not None:
                pg = pg * factor
            if parent.is_leaf:
                if parent.grad is None:
                    parent.grad = np.zeros_like(parent.data)
                parent.grad += pg
            else:
                key = id(parent)
                if key in pending:
                    pending[key] = pending[key] + pg
                else:
                    pending[key] = pg


# ---------------------------------------------------------------------------
# elementwise and reductions


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _check_broadcast(a: Tensor, b: Tensor, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"{op}: shapes {a.shape} and {b.shape} do not conform") from None


def add(a, b) -> Tensor:
    a = _as_tensor(a, b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, a)
    _check_broadcast(a, b, "add")

    def grad_fn(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return Tensor._from_op(a.data + b.data, "add", (a, b), grad_fn)


def sub(a, b) -> Tensor:
    a = _as_tensor(a, b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, a)
    _check_broadcast(a, b, "sub")

    def grad_fn(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return Tensor._from_op(a.data - b.data, "sub", (a, b), grad_fn)


def mul(a, b) -> Tensor:
    a = _as_tensor(a, b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, a)
    _check_broadcast(a, b, "mul")

    def grad_fn(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return Tensor._from_op(a.data * b.data, "mul", (a, b), grad_fn)


def scale(x: Tensor, c: float) -> Tensor:
    """Multiply by a constant real."""
    c = x.dtype.type(c)
    return Tensor._from_op(x.data * c, "scale", (x,), lambda g: (g * c,))


def neg(x: Tensor) -> Tensor:
    return Tensor._from_op(-x.data, "neg", (x,), lambda g: (-g,))


def sum_all(x: Tensor) -> Tensor:
    return Tensor._from_op(
        np.asarray(x.data.sum()), "sum", (x,), lambda g: (np.broadcast_to(g, x.shape).copy(),)
    )


def mean_all(x: Tensor) -> Tensor:
    inv = x.dtype.type(1.0 / x.size)
    return Tensor._from_op(
        np.asarray(x.data.mean()),
        "mean",
        (x,),
        lambda g: (np.broadcast_to(g * inv, x.shape).copy(),),
    )


def log(x: Tensor) -> Tensor:
    """Natural logarithm; inputs must be strictly positive."""
    if np.any(x.data <= 0):
        raise ContractError("log: input must be strictly positive (clip first)")
    return Tensor._from_op(np.log(x.data), "log", (x,), lambda g: (g / x.data,))


def clip(x: Tensor, lo: float, hi: float) -> Tensor:
    """Clamp to ``[lo, hi]``; gradient flows only where the input is inside."""
    inside = (x.data >= lo) & (x.data <= hi)
    return Tensor._from_op(
        np.clip(x.data, lo, hi), "clip", (x,), lambda g: (np.where(inside, g, 0).astype(g.dtype),)
    )


# ---------------------------------------------------------------------------
# linear algebra


def _swap(a: np.ndarray) -> np.ndarray:
    return np.swapaxes(a, -1, -2)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes; leading axes broadcast.

    The backward rule is ``a.grad += g @ b.T`` and ``b.grad += a.T @ g``.
    """
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: cannot multiply shapes {a.shape} and {b.shape}")
    try:
        np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError:
        raise DimensionError(
            f"matmul: batch dimensions of {a.shape} and {b.shape} do not conform"
        ) from None

    def grad_fn(g):
        ga = _unbroadcast(g @ _swap(b.data), a.shape) if a.requires_grad else None
        gb = _unbroadcast(_swap(a.data) @ g, b.shape) if b.requires_grad else None
        return ga, gb

    return Tensor._from_op(a.data @ b.data, "matmul", (a, b), grad_fn)


# Above this many im2col elements, 3x3 convs fall back to nine shifted
# products instead of one large patch matrix.
IM2COL_LIMIT = 1 << 22


def _im2col(xp: np.ndarray, k: int, h: int, w: int) -> np.ndarray:
    """(C, H+k-1, W+k-1) padded input -> (C*k*k, H*W) patch matrix."""
    win = np.lib.stride_tricks.sliding_window_view(xp, (k, k), axis=(1, 2))
    return win.transpose(0, 3, 4, 1, 2).reshape(-1, h * w)


def _correlate_same(x: np.ndarray, w: np.ndarray) -> np.ndarray:
    """Zero-padded 'same' cross-correlation of ``x`` (C,H,W) with ``w`` (O,C,k,k)."""
    k = w.shape[-1]
    if k == 1:
        return np.tensordot(w[:, :, 0, 0], x, axes=(1, 0))
    c, h, wd = x.shape
    p = k // 2
    xp = np.pad(x, ((0, 0), (p, p), (p, p)))
    if c * k * k * h * wd <= IM2COL_LIMIT:
        return (w.reshape(w.shape[0], -1) @ _im2col(xp, k, h, wd)).reshape(-1, h, wd)
    out = np.zeros((w.shape[0], h, wd), dtype=np.result_type(x, w))
    for i in range(k):
        for j in range(k):
            out += np.tensordot(w[:, :, i, j], xp[:, i : i + h, j : j + wd], axes=(1, 0))
    return out


def _kernel_grad(x: np.ndarray, g: np.ndarray, k: int) -> np.ndarray:
    """d(out)/d(w) contracted with ``g``: shape (O, C, k, k)."""
    c, h, wd = x.shape
    o = g.shape[0]
    if k == 1:
        return np.tensordot(g, x, axes=([1, 2], [1, 2]))[:, :, None, None]
    p = k // 2
    xp = np.pad(x, ((0, 0), (p, p), (p, p)))
    if c * k * k * h * wd <= IM2COL_LIMIT:
        return (g.reshape(o, -1) @ _im2col(xp, k, h, wd).T).reshape(o, c, k, k)
    gw = np.empty((o, c, k, k), dtype=np.result_type(x, g))
    for i in range(k):
        for j in range(k):
            gw[:, :, i, j] = np.tensordot(g, xp[:, i : i + h, j : j + wd], axes=([1, 2], [1, 2]))
    return gw


def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """Stride-1 cross-correlation with 'same' zero padding plus per-channel bias.

    Args:
        x: Input of shape (C_in, H, W).
        w: Kernel of shape (C_out, C_in, k, k) with k in {1, 3}.
        b: Optional bias of shape (C_out,).
    """
    if x.ndim != 3 or w.ndim != 4:
        raise DimensionError(f"conv2d: expected (C,H,W) input and 4-d kernel, got {x.shape}, {w.shape}")
    c_out, c_in, kh, kw = w.shape
    if kh != kw or kh not in (1, 3):
        raise DimensionError(f"conv2d: kernel must be 1x1 or 3x3, got {kh}x{kw}")
    if x.shape[0] != c_in:
        raise DimensionError(
            f"conv2d: input has {x.shape[0]} channels but kernel {w.shape} expects {c_in}"
        )
    if b is not None and b.shape != (c_out,):
        raise DimensionError(f"conv2d: bias shape {b.shape} does not match {c_out} output channels")

    out = _correlate_same(x.data, w.data)
    if b is not None:
        out += b.data[:, None, None]

    def grad_fn(g):
        gx = gw = gb = None
        if x.requires_grad:
            flipped = np.ascontiguousarray(w.data[:, :, ::-1, ::-1].transpose(1, 0, 2, 3))
            gx = _correlate_same(g, flipped)
        if w.requires_grad:
            gw = _kernel_grad(x.data, g, kh)
        if b is not None and b.requires_grad:
            gb = g.sum(axis=(1, 2))
        return (gx, gw, gb) if b is not None else (gx, gw)

    inputs = (x, w, b) if b is not None else (x, w)
    return Tensor._from_op(out, "conv2d", inputs, grad_fn)


# ---------------------------------------------------------------------------
# resampling


def maxpool2d(x: Tensor) -> Tensor:
    """2x2 max pooling with stride 2.

    Gradient goes to the first maximal element of each window (row-major).
    """
    if x.ndim != 3:
        raise DimensionError(f"maxpool2d: expected (C,H,W), got {x.shape}")
    c, h, w = x.shape
    if h % 2 or w % 2:
        raise DimensionError(f"maxpool2d: spatial size {h}x{w} must be even")
    windows = x.data.reshape(c, h // 2, 2, w // 2, 2).transpose(0, 1, 3, 2, 4).reshape(c, h // 2, w // 2, 4)
    idx = windows.argmax(axis=-1)[..., None]
    out = np.take_along_axis(windows, idx, axis=-1)[..., 0]

    def grad_fn(g):
        gw = np.zeros_like(windows)
        np.put_along_axis(gw, idx, g[..., None], axis=-1)
        return (gw.reshape(c, h // 2, w // 2, 2, 2).transpose(0, 1, 3, 2, 4).reshape(c, h, w),)

    return Tensor._from_op(out, "maxpool2d", (x,), grad_fn)


@functools.lru_cache(maxsize=64)
def _upsample_matrix(n: int, dtype_name: str) -> np.ndarray:
    """(2n, n) bilinear weights, half-pixel centres, edge-clamped."""
    dst = np.arange(2 * n)
    src = np.clip((dst + 0.5) / 2.0 - 0.5, 0.0, n - 1)
    lo = np.floor(src).astype(np.int64)
    hi = np.minimum(lo + 1, n - 1)
    frac = src - lo
    mat = np.zeros((2 * n, n), dtype=np.float64)
    np.add.at(mat, (dst, lo), 1.0 - frac)
    np.add.at(mat, (dst, hi), frac)
    mat = mat.astype(dtype_name)
    mat.flags.writeable = False
    return mat


def bilinear_upsample2x(x: Tensor) -> Tensor:
    """Double H and W by bilinear interpolation.

    Source coordinate for output pixel ``o`` is ``(o + 0.5) / 2 - 0.5``,
    clamped to ``[0, size - 1]``. Implemented as ``R_h @ x @ R_w.T`` so the
    backward rule is the transposed interpolation.
    """
    if x.ndim != 3:
        raise DimensionError(f"bilinear_upsample2x: expected (C,H,W), got {x.shape}")
    _, h, w = x.shape
    rh = _upsample_matrix(h, x.dtype.name)
    rw = _upsample_matrix(w, x.dtype.name)
    out = rh @ x.data @ rw.T

    def grad_fn(g):
        return (rh.T @ g @ rw,)

    return Tensor._from_op(out, "upsample2x", (x,), grad_fn)


# ---------------------------------------------------------------------------
# normalisation and activations


def layernorm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalise over the last axis (biased variance), then apply gamma/beta."""
    d = x.shape[-1]
    if d == 0 or gamma.shape != (d,) or beta.shape != (d,):
        raise DimensionError(
            f"layernorm: input {x.shape} needs gamma/beta of shape ({d},), "
            f"got {gamma.shape}, {beta.shape}"
        )
    if eps <= 0:
        raise ContractError("layernorm: eps must be positive")
    mu = x.data.mean(axis=-1, keepdims=True)
    centred = x.data - mu
    var = (centred * centred).mean(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + x.dtype.type(eps))
    xhat = centred * inv_std
    out = gamma.data * xhat + beta.data
    lead = tuple(range(x.ndim - 1))

    def grad_fn(g):
        gxhat = g * gamma.data
        gx = inv_std * (
            gxhat
            - gxhat.mean(axis=-1, keepdims=True)
            - xhat * (gxhat * xhat).mean(axis=-1, keepdims=True)
        )
        return gx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return Tensor._from_op(out, "layernorm", (x, gamma, beta), grad_fn)


def softmax_lastdim(x: Tensor) -> Tensor:
    shifted = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    s = e / e.sum(axis=-1, keepdims=True)

    def grad_fn(g):
        return (s * (g - (g * s).sum(axis=-1, keepdims=True)),)

    return Tensor._from_op(s, "softmax", (x,), grad_fn)


def elu(x: Tensor, alpha: float = 1.0) -> Tensor:
    """x for x >= 0, alpha*(exp(x) - 1) otherwise."""
    a = x.dtype.type(alpha)
    neg_part = np.minimum(x.data, 0)
    out = np.where(x.data >= 0, x.data, a * np.expm1(neg_part))

    def grad_fn(g):
        return (g * np.where(x.data >= 0, 1, a * np.exp(neg_part)).astype(g.dtype),)

    return Tensor._from_op(out, "elu", (x,), grad_fn)


def sigmoid(x: Tensor) -> Tensor:
    e = np.exp(-np.abs(x.data))
    out = np.where(x.data >= 0, 1 / (1 + e), e / (1 + e))

    def grad_fn(g):
        return (g * out * (1 - out),)

    return Tensor._from_op(out, "sigmoid", (x,), grad_fn)


# ---------------------------------------------------------------------------
# layout


def concat_channels(tensors: Sequence[Tensor]) -> Tensor:
    """Concatenate (C_i, H, W) tensors along the channel axis."""
    if not tensors:
        raise DimensionError("concat_channels: nothing to concatenate")
    spatial = tensors[0].shape[1:]
    for t in tensors:
        if t.ndim != 3 or t.shape[1:] != spatial:
            shapes = [u.shape for u in tensors]
            raise DimensionError(f"concat_channels: spatial dims differ across {shapes}")
    sizes = [t.shape[0] for t in tensors]
    bounds = np.cumsum(sizes)[:-1]
    out = np.concatenate([t.data for t in tensors], axis=0)

    def grad_fn(g):
        return tuple(np.split(g, bounds, axis=0))

    return Tensor._from_op(out, "concat", tuple(tensors), grad_fn)


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    """Row-major reshape; element order is unchanged."""
    shape = tuple(int(s) for s in shape)
    if math.prod(shape) != x.size or any(s <= 0 for s in shape):
        raise DimensionError(f"reshape: cannot view {x.shape} as {shape}")
    return Tensor._from_op(
        x.data.reshape(shape), "reshape", (x,), lambda g: (g.reshape(x.shape),)
    )


def transpose_last2(x: Tensor) -> Tensor:
    if x.ndim < 2:
        raise DimensionError(f"transpose_last2: need at least 2 dims, got {x.shape}")
    return Tensor._from_op(_swap(x.data), "transpose", (x,), lambda g: (_swap(g),))


def permute(x: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    if sorted(axes) != list(range(x.ndim)):
        raise DimensionError(f"permute: {axes} is not a permutation of {x.ndim} axes")
    inverse = tuple(np.argsort(axes))
    return Tensor._from_op(
        np.transpose(x.data, axes), "permute", (x,), lambda g: (np.transpose(g, inverse),)
    )
