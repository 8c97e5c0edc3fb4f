"""Dense tensors with a reverse-mode gradient tape.

The model runs on small dense arrays: rank-4 feature maps
(batch, channel, height, width) and rank-2 token matrices. Every
differentiable operation appends a record to the active :class:`GradTape`;
``GradTape.backward`` replays the records in reverse, which is a valid
topological order by construction. Accumulation order is therefore fixed,
so identical inputs give bit-identical gradients across runs.

Training and inference use float32; tests run the same code in float64
for oracle and finite-difference headroom.
"""
from __future__ import annotations

from contextlib import contextmanager
from typing import Callable, Iterable, Iterator, Optional, Sequence, Tuple, Union

import numpy as np

from .errors import (
    DimensionError,
    EmptyAttentionError,
    EmptyRegionError,
    EvaluationError,
    ValidationError,
)

DEFAULT_DTYPE = np.float32

Scalar = Union[int, float]
TensorLike = Union["Tensor", np.ndarray, Scalar, Sequence]

_active_tape: Optional["GradTape"] = None


class Tensor:
    """A dense array with an optional same-shape gradient buffer."""

    __slots__ = ("data", "grad", "requires_grad")

    def __init__(self, data: TensorLike, requires_grad: bool = False, dtype=None):
        if isinstance(data, Tensor):
            raise TypeError("wrap raw array data, not another Tensor")
        if dtype is None and not isinstance(data, (np.ndarray, np.generic)):
            dtype = DEFAULT_DTYPE
        self.data = np.asarray(data, dtype=dtype)
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = bool(requires_grad)

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy(), requires_grad=False)

    def numpy(self) -> np.ndarray:
        return self.data

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, axes=None) -> "Tensor":
        return transpose(self, axes)

    @property
    def T(self) -> "Tensor":
        return transpose(self, None)

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        return tensor_sum(self, axis=axis, keepdims=keepdims)

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_as_tensor(other, like=self), self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(_as_tensor(other, like=self), self)

    def __neg__(self):
        return neg(self)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"


class GradTape:
    """Ordered record of operations; reverse replay yields gradients.

    The tape is single-writer: one training step is one logical thread of
    control. Entering the context makes the tape active; nesting restores
    the previous tape on exit.
    """

    def __init__(self):
        self._records: list = []
        self._outer: Optional[GradTape] = None

    def __enter__(self) -> "GradTape":
        global _active_tape
        self._outer = _active_tape
        _active_tape = self
        return self

    def __exit__(self, exc_type, exc, tb):
        global _active_tape
        _active_tape = self._outer
        self._outer = None
        return False

    def __len__(self) -> int:
        return len(self._records)

    def backward(self, output: Tensor) -> None:
        """Seed ``output`` with a ones-gradient and replay the tape in reverse."""
        if output.data.size != 1:
            raise ValidationError(f"backward needs a scalar output, got shape {output.data.shape}")
        if output.grad is None:
            output.grad = np.ones_like(output.data)
        for out, backward_fn in reversed(self._records):
            if out.grad is None:
                continue
            backward_fn(out.grad)


@contextmanager
def no_grad():
    """Temporarily disable recording (forward passes only)."""
    global _active_tape
    saved = _active_tape
    _active_tape = None
    try:
        yield
    finally:
        _active_tape = saved


class ParamStore:
    """Named, ordered collection of learnable tensors.

    Registration order is the canonical parameter order used by the
    optimizer, the gradient checker, and the checkpoint writer.
    """

    def __init__(self):
        self._items: dict[str, Tensor] = {}

    def register(self, name: str, value: np.ndarray) -> Tensor:
        if name in self._items:
            raise ValidationError(f"parameter {name!r} registered twice")
        t = value if isinstance(value, Tensor) else Tensor(np.asarray(value))
        t.requires_grad = True
        self._items[name] = t
        return t

    def __iter__(self) -> Iterator[Tuple[str, Tensor]]:
        return iter(self._items.items())

    def __len__(self) -> int:
        return len(self._items)

    def __contains__(self, name: str) -> bool:
        return name in self._items

    def __getitem__(self, name: str) -> Tensor:
        return self._items[name]

    def names(self) -> list:
        return list(self._items.keys())

    def size(self) -> int:
        """Total number of scalar parameters."""
        return int(sum(t.data.size for t in self._items.values()))

    def zero_grad(self) -> None:
        for t in self._items.values():
            t.grad = None

    def state(self) -> dict:
        return {name: t.data.copy() for name, t in self._items.items()}

    def load_state(self, state: dict) -> None:
        for name, t in self._items.items():
            if name not in state:
                raise ValidationError(f"missing parameter {name!r} in state")
            arr = np.asarray(state[name], dtype=t.data.dtype)
            if arr.shape != t.data.shape:
                raise DimensionError(
                    f"parameter {name!r}: stored shape {arr.shape} != model shape {t.data.shape}"
                )
            t.data = arr.copy()


# ---------------------------------------------------------------------------
# op plumbing


def _as_tensor(x: TensorLike, like: Optional[Tensor] = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.data.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype) if dtype is not None else x)


def _make(data: np.ndarray, inputs: Iterable[Tensor], backward_fn: Callable) -> Tensor:
    wants = _active_tape is not None and any(t.requires_grad for t in inputs)
    out = Tensor(data, requires_grad=wants)
    if wants:
        _active_tape._records.append((out, backward_fn))
    return out


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.zeros_like(t.data)
    t.grad += g


def _unbroadcast(g: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    """Sum ``g`` down to ``shape`` (inverse of numpy broadcasting)."""
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, dim in enumerate(shape):
        if dim == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# elementwise ops


def add(a: TensorLike, b: TensorLike) -> Tensor:
    a = _as_tensor(a)
    b = _as_tensor(b, like=a)

    def backward(g):
        _accumulate(a, _unbroadcast(g, a.data.shape))
        _accumulate(b, _unbroadcast(g, b.data.shape))

    return _make(a.data + b.data, (a, b), backward)


def sub(a: TensorLike, b: TensorLike) -> Tensor:
    a = _as_tensor(a)
    b = _as_tensor(b, like=a)

    def backward(g):
        _accumulate(a, _unbroadcast(g, a.data.shape))
        _accumulate(b, -_unbroadcast(g, b.data.shape))

    return _make(a.data - b.data, (a, b), backward)


def mul(a: TensorLike, b: TensorLike) -> Tensor:
    a = _as_tensor(a)
    b = _as_tensor(b, like=a)

    def backward(g):
        _accumulate(a, _unbroadcast(g * b.data, a.data.shape))
        _accumulate(b, _unbroadcast(g * a.data, b.data.shape))

    return _make(a.data * b.data, (a, b), backward)


def div(a: TensorLike, b: TensorLike) -> Tensor:
    a = _as_tensor(a)
    b = _as_tensor(b, like=a)

    def backward(g):
        _accumulate(a, _unbroadcast(g / b.data, a.data.shape))
        _accumulate(b, _unbroadcast(-g * a.data / (b.data * b.data), b.data.shape))

    return _make(a.data / b.data, (a, b), backward)


def neg(a: Tensor) -> Tensor:
    def backward(g):
        _accumulate(a, -g)

    return _make(-a.data, (a,), backward)


def sqrt(a: Tensor) -> Tensor:
    out_data = np.sqrt(a.data)

    def backward(g):
        _accumulate(a, g / (2.0 * out_data))

    return _make(out_data, (a,), backward)


def leaky_relu(a: Tensor, slope: float = 0.2) -> Tensor:
    positive = a.data > 0

    def backward(g):
        _accumulate(a, g * np.where(positive, 1.0, slope))

    return _make(np.where(positive, a.data, slope * a.data), (a,), backward)


# ---------------------------------------------------------------------------
# shape ops


def reshape(a: Tensor, shape) -> Tensor:
    old_shape = a.data.shape

    def backward(g):
        _accumulate(a, g.reshape(old_shape))

    return _make(a.data.reshape(shape), (a,), backward)


def transpose(a: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(a.data.ndim)))
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))

    def backward(g):
        _accumulate(a, g.transpose(inverse))

    return _make(a.data.transpose(axes), (a,), backward)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    sizes = [t.data.shape[axis] for t in tensors]
    offsets = np.cumsum(sizes)[:-1]

    def backward(g):
        for t, piece in zip(tensors, np.split(g, offsets, axis=axis)):
            _accumulate(t, piece)

    return _make(np.concatenate([t.data for t in tensors], axis=axis), tensors, backward)


def tensor_sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    in_shape = a.data.shape

    def backward(g):
        if axis is None:
            _accumulate(a, np.broadcast_to(g, in_shape).copy())
            return
        axes = axis if isinstance(axis, tuple) else (axis,)
        if not keepdims:
            g = np.expand_dims(g, axes)
        _accumulate(a, np.broadcast_to(g, in_shape).copy())

    return _make(a.data.sum(axis=axis, keepdims=keepdims), (a,), backward)


def take_rows(a: Tensor, index: np.ndarray) -> Tensor:
    """Gather slices of the leading axis; backward scatter-adds them home."""
    index = np.asarray(index, dtype=np.intp)

    def backward(g):
        if not a.requires_grad:
            return
        buf = np.zeros_like(a.data)
        np.add.at(buf, index, g)
        _accumulate(a, buf)

    return _make(a.data[index], (a,), backward)


def scatter_rows(base: Tensor, index: np.ndarray, rows: Tensor) -> Tensor:
    """Copy of ``base`` with leading-axis slices at ``index`` replaced by ``rows``.

    Positions outside ``index`` pass ``base`` through bit-exact.
    """
    index = np.asarray(index, dtype=np.intp)
    if len(index) != rows.data.shape[0]:
        raise DimensionError(
            f"scatter_rows: {len(index)} indices for {rows.data.shape[0]} rows"
        )
    out_data = base.data.copy()
    out_data[index] = rows.data

    def backward(g):
        _accumulate(rows, g[index])
        if base.requires_grad:
            gb = g.copy()
            gb[index] = 0
            _accumulate(base, gb)

    return _make(out_data, (base, rows), backward)


# ---------------------------------------------------------------------------
# linear algebra / attention


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product of two rank-2 tensors, differentiable in both."""
    a = _as_tensor(a)
    b = _as_tensor(b, like=a)
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise DimensionError(
            f"matmul expects rank-2 operands, got {a.data.shape} x {b.data.shape}"
        )
    if a.data.shape[1] != b.data.shape[0]:
        raise DimensionError(
            f"matmul: inner dimensions disagree for {a.data.shape} x {b.data.shape}"
        )

    def backward(g):
        _accumulate(a, g @ b.data.T)
        _accumulate(b, a.data.T @ g)

    return _make(a.data @ b.data, (a, b), backward)


def softmax_rows(a: Tensor) -> Tensor:
    """Row-wise softmax of a rank-2 tensor, stabilized by per-row max subtraction."""
    if a.data.ndim != 2:
        raise DimensionError(f"softmax_rows expects a rank-2 tensor, got {a.data.shape}")
    if a.data.shape[1] == 0:
        raise EmptyAttentionError("softmax over zero columns: nothing to attend to")
    shifted = a.data - a.data.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    out_data = e / e.sum(axis=1, keepdims=True)

    def backward(g):
        dot = (g * out_data).sum(axis=1, keepdims=True)
        _accumulate(a, out_data * (g - dot))

    return _make(out_data, (a,), backward)


# ---------------------------------------------------------------------------
# convolution and resampling


def _im2col(x: np.ndarray, k: int, stride: int, pad: int):
    n, c, h, w = x.shape
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x
    hp, wp = h + 2 * pad, w + 2 * pad
    oh = (hp - k) // stride + 1
    ow = (wp - k) // stride + 1
    s0, s1, s2, s3 = xp.strides
    view = np.lib.stride_tricks.as_strided(
        xp,
        shape=(n, c, k, k, oh, ow),
        strides=(s0, s1, s2, s3, s2 * stride, s3 * stride),
        writeable=False,
    )
    cols = view.transpose(0, 4, 5, 1, 2, 3).reshape(n * oh * ow, c * k * k)
    return np.ascontiguousarray(cols), oh, ow


def _col2im(gcols: np.ndarray, x_shape, k: int, stride: int, pad: int, oh: int, ow: int):
    n, c, h, w = x_shape
    hp, wp = h + 2 * pad, w + 2 * pad
    gx = np.zeros((n, c, hp, wp), dtype=gcols.dtype)
    g6 = gcols.reshape(n, oh, ow, c, k, k).transpose(0, 3, 4, 5, 1, 2)
    for i in range(k):
        for j in range(k):
            gx[:, :, i : i + oh * stride : stride, j : j + ow * stride : stride] += g6[:, :, i, j]
    if pad:
        gx = gx[:, :, pad : hp - pad, pad : wp - pad]
    return gx


def conv2d(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None, stride: int = 1, pad: int = 0) -> Tensor:
    """2-D convolution (cross-correlation) over (n, c, h, w) input.

    ``weight`` is (out_c, in_c, k, k) with odd square k; output spatial size
    is floor((h + 2*pad - k) / stride) + 1.
    """
    if x.data.ndim != 4:
        raise DimensionError(f"conv2d input must be rank 4, got {x.data.shape}")
    if weight.data.ndim != 4 or weight.data.shape[2] != weight.data.shape[3]:
        raise DimensionError(f"conv2d weight must be (out_c, in_c, k, k), got {weight.data.shape}")
    out_c, in_c, k, _ = weight.data.shape
    if k % 2 != 1:
        raise ValidationError(f"conv2d kernel size must be odd, got {k}")
    if x.data.shape[1] != in_c:
        raise DimensionError(
            f"conv2d: input has {x.data.shape[1]} channels but weight expects {in_c}"
        )
    n = x.data.shape[0]
    cols, oh, ow = _im2col(x.data, k, stride, pad)
    w_mat = weight.data.reshape(out_c, in_c * k * k)
    out_mat = cols @ w_mat.T
    if bias is not None:
        out_mat = out_mat + bias.data
    out_data = out_mat.reshape(n, oh, ow, out_c).transpose(0, 3, 1, 2)
    x_shape = x.data.shape
    inputs = (x, weight) if bias is None else (x, weight, bias)

    def backward(g):
        g_mat = g.transpose(0, 2, 3, 1).reshape(n * oh * ow, out_c)
        if bias is not None:
            _accumulate(bias, g_mat.sum(axis=0))
        _accumulate(weight, (g_mat.T @ cols).reshape(weight.data.shape))
        if x.requires_grad:
            gcols = g_mat @ w_mat
            _accumulate(x, _col2im(gcols, x_shape, k, stride, pad, oh, ow))

    return _make(out_data, inputs, backward)


def upsample_nearest(x: Tensor, factor: int) -> Tensor:
    """Replicate each pixel ``factor`` times along both spatial axes."""
    if factor < 1:
        raise ValidationError(f"upsample factor must be >= 1, got {factor}")
    if x.data.ndim != 4:
        raise DimensionError(f"upsample input must be rank 4, got {x.data.shape}")
    if factor == 1:
        def backward_id(g):
            _accumulate(x, g)

        return _make(x.data.copy(), (x,), backward_id)
    n, c, h, w = x.data.shape
    out_data = np.repeat(np.repeat(x.data, factor, axis=2), factor, axis=3)

    def backward(g):
        _accumulate(x, g.reshape(n, c, h, factor, w, factor).sum(axis=(3, 5)))

    return _make(out_data, (x,), backward)


def extract_windows(x: Tensor, patch: Tuple[int, int], stride: Tuple[int, int]) -> Tensor:
    """Slide a (p_h, p_w) window over a (1, c, h, w) tensor.

    Returns a (k, c, p_h, p_w) tensor of the windows in row-major grid
    order; backward adds each window gradient back into its source
    rectangle (deterministic loop order).
    """
    if x.data.ndim != 4 or x.data.shape[0] != 1:
        raise DimensionError(f"extract_windows expects a (1, c, h, w) tensor, got {x.data.shape}")
    p_h, p_w = patch
    s_h, s_w = stride
    _, c, h, w = x.data.shape
    if p_h > h or p_w > w:
        raise DimensionError(f"window {patch} larger than feature map {(h, w)}")
    if s_h < 1 or s_w < 1:
        raise ValidationError(f"window stride must be >= 1, got {stride}")
    n_h = (h - p_h) // s_h + 1
    n_w = (w - p_w) // s_w + 1
    k = n_h * n_w
    out_data = np.empty((k, c, p_h, p_w), dtype=x.data.dtype)
    for i in range(n_h):
        for j in range(n_w):
            out_data[i * n_w + j] = x.data[0, :, i * s_h : i * s_h + p_h, j * s_w : j * s_w + p_w]

    def backward(g):
        if not x.requires_grad:
            return
        buf = np.zeros_like(x.data)
        for i in range(n_h):
            for j in range(n_w):
                buf[0, :, i * s_h : i * s_h + p_h, j * s_w : j * s_w + p_w] += g[i * n_w + j]
        _accumulate(x, buf)

    return _make(out_data, (x,), backward)


def window_grid(size: Tuple[int, int], patch: Tuple[int, int], stride: Tuple[int, int]):
    """Grid dimensions and top-left origins for extract_windows, same order."""
    h, w = size
    p_h, p_w = patch
    s_h, s_w = stride
    n_h = (h - p_h) // s_h + 1
    n_w = (w - p_w) // s_w + 1
    origins = [(i * s_h, j * s_w) for i in range(n_h) for j in range(n_w)]
    return (n_h, n_w), origins


# ---------------------------------------------------------------------------
# masked statistics


def masked_moments(x: Tensor, mask: Tensor, eps: float = 1e-5, empty: str = "raise"):
    """Per-(n, c) mean and epsilon-floored std over masked locations.

    ``mask`` is (n, 1, h, w) with values in {0, 1}, broadcast over channels.
    Returns two (n, c) tensors. With ``empty="raise"`` a zero-coverage mask
    raises; ``empty="safe"`` clamps the pixel count to 1 so downstream code
    can blend the (mask-weighted, hence ignored) result away itself.
    """
    if x.data.ndim != 4 or mask.data.ndim != 4:
        raise DimensionError(
            f"masked_moments expects rank-4 tensors, got {x.data.shape} and {mask.data.shape}"
        )
    m = mask.data
    if not np.all((m == 0) | (m == 1)):
        raise ValidationError("masked_moments: mask must be binary {0, 1}")
    counts = m.sum(axis=(2, 3), keepdims=True)
    if empty == "raise":
        if np.any(counts == 0):
            raise EmptyRegionError("masked_moments: mask has zero coverage")
    else:
        counts = np.maximum(counts, 1.0)
    inv = (1.0 / counts).astype(x.data.dtype)

    n, c = x.data.shape[:2]
    masked = mul(x, mask)
    mean4 = mul(tensor_sum(masked, axis=(2, 3), keepdims=True), inv)
    dev = sub(x, mean4)
    var4 = mul(tensor_sum(mul(mul(dev, dev), mask), axis=(2, 3), keepdims=True), inv)
    std4 = sqrt(add(var4, float(eps)))
    return reshape(mean4, (n, c)), reshape(std4, (n, c))


# ---------------------------------------------------------------------------
# finite-difference checking


def grad_check(f: Callable[[], Tensor], params, step: float = 1e-4) -> float:
    """Max relative error between taped gradients and central differences.

    ``f`` evaluates the scalar objective from the current parameter values;
    ``params`` iterates (name, tensor) pairs (a ParamStore works). The
    error is |analytic - numeric| / max(1, |numeric|), maximized over every
    element of every parameter. Run in float64 for meaningful tolerances.
    """
    pairs = list(params)
    for _, p in pairs:
        p.grad = None
    with GradTape() as tape:
        out = f()
    if out.data.size != 1 or not np.isfinite(out.data).all():
        raise EvaluationError("grad_check: objective must be a finite scalar")
    tape.backward(out)
    analytic = {
        name: (p.grad.copy() if p.grad is not None else np.zeros_like(p.data))
        for name, p in pairs
    }

    def evaluate() -> float:
        with no_grad():
            v = float(f().data)
        if not np.isfinite(v):
            raise EvaluationError("grad_check: objective became non-finite during probing")
        return v

    worst = 0.0
    for name, p in pairs:
        flat = p.data.reshape(-1)
        a_flat = analytic[name].reshape(-1)
        for i in range(flat.size):
            saved = flat[i]
            flat[i] = saved + step
            f_plus = evaluate()
            flat[i] = saved - step
            f_minus = evaluate()
            flat[i] = saved
            numeric = (f_plus - f_minus) / (2.0 * step)
            err = abs(a_flat[i] - numeric) / max(1.0, abs(numeric))
            if err > worst:
                worst = err
    return worst
