"""Reverse-mode automatic differentiation over dense numpy arrays.

A tape-based engine: every differentiable operation appends a node to a
thread-local tape, and ``backward``/``grad`` walk the tape in reverse
insertion order. Backward rules are themselves written with tape ops, so
gradients can be differentiated again (double backprop), which the
smoothness penalty of the training loss needs.

Data is float32 by default; float64 tensors are supported and are what
finite-difference checks promote to. Reductions always accumulate in
float64 regardless of the tensor dtype.
"""
from __future__ import annotations

import threading
from typing import Callable, Sequence

import numpy as np

DEFAULT_DTYPE = np.float32

_SUPPORTED_DTYPES = (np.float32, np.float64)


class AutodiffError(Exception):
    """Base class for engine errors."""


class BroadcastError(AutodiffError):
    """Binary op received shapes that do not right-align broadcast."""


class DomainError(AutodiffError):
    """Input outside an op's mathematical domain (log/sqrt of negatives)."""


class _Tape(threading.local):
    def __init__(self):
        self.nodes: list[_Node] = []
        self.enabled = True


_tape = _Tape()


class _Node:
    __slots__ = ("out", "parents", "vjp")

    def __init__(self, out, parents, vjp):
        self.out = out
        self.parents = parents
        self.vjp = vjp


class no_grad:
    """Context manager that suspends tape recording."""

    def __enter__(self):
        self._prev = _tape.enabled
        _tape.enabled = False
        return self

    def __exit__(self, *exc):
        _tape.enabled = self._prev
        return False


def clear_tape():
    """Drop every recorded node on this thread's tape."""
    for node in _tape.nodes:
        node.out.node = None
    _tape.nodes.clear()


def tape_size() -> int:
    return len(_tape.nodes)


class Tensor:
    """Dense n-dimensional array with optional gradient tracking."""

    __slots__ = ("data", "requires_grad", "grad", "node")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        if dtype is None:
            # numpy-typed input keeps its float precision; everything else
            # (python lists/scalars, ints) becomes the default dtype
            if (
                isinstance(data, (np.ndarray, np.generic))
                and np.asarray(data).dtype in _SUPPORTED_DTYPES
            ):
                arr = np.asarray(data)
            else:
                arr = np.asarray(data, dtype=DEFAULT_DTYPE)
        else:
            arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in _SUPPORTED_DTYPES:
            raise AutodiffError(f"unsupported dtype {arr.dtype}; use float32 or float64")
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: Tensor | None = None
        self.node: _Node | None = None

    # -- inspection ------------------------------------------------------

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
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype.name}{flag})"

    # -- operator sugar ---------------------------------------------------

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

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, n):
        if not isinstance(n, int) or n < 1:
            raise AutodiffError("only positive integer powers are supported")
        out = self
        for _ in range(n - 1):
            out = mul(out, self)
        return out

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axes=None, keepdims=False):
        return sum_(self, axes, keepdims)

    def mean(self, axes=None, keepdims=False):
        return mean_(self, axes, keepdims)

    def reshape(self, shape):
        return reshape(self, shape)

    def transpose(self, axes=None):
        return transpose(self, axes)

    def backward(self):
        backward(self)


def _tracked(t: Tensor) -> bool:
    return t.requires_grad or t.node is not None


def _record(out: Tensor, parents: tuple[Tensor, ...], vjp: Callable):
    if _tape.enabled and any(_tracked(p) for p in parents):
        node = _Node(out, parents, vjp)
        out.node = node
        _tape.nodes.append(node)


def _coerce_pair(a, b) -> tuple[Tensor, Tensor]:
    """Wrap plain scalars/arrays, matching the dtype of the tensor operand."""
    if isinstance(a, Tensor) and isinstance(b, Tensor):
        if a.data.dtype != b.data.dtype:
            raise AutodiffError(
                f"dtype mismatch: {a.data.dtype} vs {b.data.dtype} (no implicit promotion)"
            )
        return a, b
    if isinstance(a, Tensor):
        return a, Tensor(b, dtype=a.data.dtype)
    if isinstance(b, Tensor):
        return Tensor(a, dtype=b.data.dtype), b
    a = Tensor(a)
    return a, Tensor(b, dtype=a.data.dtype)


def _as_tensor(a, dtype=None) -> Tensor:
    return a if isinstance(a, Tensor) else Tensor(a, dtype=dtype)


def _check_broadcast(a: Tensor, b: Tensor):
    if a.data.shape == b.data.shape:
        return a.data.shape
    try:
        return np.broadcast_shapes(a.data.shape, b.data.shape)
    except ValueError:
        raise BroadcastError(
            f"shapes {a.data.shape} and {b.data.shape} do not broadcast"
        ) from None


def _unbroadcast(g: Tensor, shape: tuple[int, ...]) -> Tensor:
    """Reduce a broadcast-shaped gradient back to ``shape``."""
    if g.data.shape == shape:
        return g
    gshape = g.data.shape
    lead = len(gshape) - len(shape)
    axes = tuple(range(lead)) + tuple(
        lead + i for i, s in enumerate(shape) if s == 1 and gshape[lead + i] != 1
    )
    if lead == 0:
        # same rank: reduced axes stay as size-1, no reshape needed
        return sum_(g, axes, keepdims=True) if axes else g
    out = sum_(g, axes, keepdims=False) if axes else g
    if out.data.shape != shape:
        out = reshape(out, shape)
    return out


# -- constructors ----------------------------------------------------------


def tensor(data, requires_grad=False, dtype=None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, dtype=dtype)


def zeros(shape, dtype=DEFAULT_DTYPE, requires_grad=False) -> Tensor:
    return Tensor(np.zeros(shape, dtype=dtype), requires_grad=requires_grad)


def ones(shape, dtype=DEFAULT_DTYPE, requires_grad=False) -> Tensor:
    return Tensor(np.ones(shape, dtype=dtype), requires_grad=requires_grad)


def zeros_like(t: Tensor) -> Tensor:
    return Tensor(np.zeros_like(t.data))


def ones_like(t: Tensor) -> Tensor:
    return Tensor(np.ones_like(t.data))


# -- elementwise ops --------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = _coerce_pair(a, b)
    _check_broadcast(a, b)
    out = Tensor(a.data + b.data)

    def vjp(g, needed):
        return (
            _unbroadcast(g, a.data.shape) if needed[0] else None,
            _unbroadcast(g, b.data.shape) if needed[1] else None,
        )

    _record(out, (a, b), vjp)
    return out


def sub(a, b) -> Tensor:
    a, b = _coerce_pair(a, b)
    _check_broadcast(a, b)
    out = Tensor(a.data - b.data)

    def vjp(g, needed):
        return (
            _unbroadcast(g, a.data.shape) if needed[0] else None,
            _unbroadcast(neg(g), b.data.shape) if needed[1] else None,
        )

    _record(out, (a, b), vjp)
    return out


def mul(a, b) -> Tensor:
    a, b = _coerce_pair(a, b)
    _check_broadcast(a, b)
    out = Tensor(a.data * b.data)

    def vjp(g, needed):
        return (
            _unbroadcast(mul(g, b), a.data.shape) if needed[0] else None,
            _unbroadcast(mul(g, a), b.data.shape) if needed[1] else None,
        )

    _record(out, (a, b), vjp)
    return out


def div(a, b) -> Tensor:
    a, b = _coerce_pair(a, b)
    _check_broadcast(a, b)
    out = Tensor(a.data / b.data)

    def vjp(g, needed):
        ga = _unbroadcast(div(g, b), a.data.shape) if needed[0] else None
        gb = (
            _unbroadcast(neg(div(mul(g, out), b)), b.data.shape)
            if needed[1]
            else None
        )
        return ga, gb

    _record(out, (a, b), vjp)
    return out


def neg(a) -> Tensor:
    a = _as_tensor(a)
    out = Tensor(-a.data)

    def vjp(g, needed):
        return (neg(g),)

    _record(out, (a,), vjp)
    return out


def exp(a) -> Tensor:
    a = _as_tensor(a)
    out = Tensor(np.exp(a.data))

    def vjp(g, needed):
        return (mul(g, out),)

    _record(out, (a,), vjp)
    return out


def log(a) -> Tensor:
    a = _as_tensor(a)
    if np.any(a.data < 0):
        raise DomainError("log of negative input")
    out = Tensor(np.log(a.data))

    def vjp(g, needed):
        return (div(g, a),)

    _record(out, (a,), vjp)
    return out


def sqrt(a) -> Tensor:
    a = _as_tensor(a)
    if np.any(a.data < 0):
        raise DomainError("sqrt of negative input")
    out = Tensor(np.sqrt(a.data))

    def vjp(g, needed):
        return (div(mul(g, 0.5), out),)

    _record(out, (a,), vjp)
    return out


def relu(a) -> Tensor:
    a = _as_tensor(a)
    out = Tensor(np.maximum(a.data, 0))
    mask = Tensor((a.data > 0).astype(a.data.dtype))

    def vjp(g, needed):
        return (mul(g, mask),)

    _record(out, (a,), vjp)
    return out


def sigmoid(a) -> Tensor:
    a = _as_tensor(a)
    return div(1.0, add(1.0, exp(neg(a))))


def silu(a) -> Tensor:
    """x * sigmoid(x), recorded as one node; its backward rule is built
    from recorded ops so second derivatives remain available."""
    a = _as_tensor(a)
    sig = 1.0 / (1.0 + np.exp(-a.data))
    out = Tensor(a.data * sig)

    def vjp(g, needed):
        s = sigmoid(a)
        return (mul(g, add(s, mul(mul(a, s), sub(1.0, s)))),)

    _record(out, (a,), vjp)
    return out


ELEMENTWISE_OPS = {
    "add": add,
    "sub": sub,
    "mul": mul,
    "div": div,
    "neg": neg,
    "exp": exp,
    "log": log,
    "sqrt": sqrt,
    "relu": relu,
    "silu": silu,
}

_BINARY_KINDS = {"add", "sub", "mul", "div"}


def elementwise(op_kind: str, a, b=None) -> Tensor:
    """Dispatch-table access to the elementwise ops."""
    if op_kind not in ELEMENTWISE_OPS:
        raise AutodiffError(f"unknown elementwise op {op_kind!r}")
    if op_kind in _BINARY_KINDS:
        if b is None:
            raise AutodiffError(f"{op_kind} is binary; two operands required")
        return ELEMENTWISE_OPS[op_kind](a, b)
    if b is not None:
        raise AutodiffError(f"{op_kind} is unary; one operand expected")
    return ELEMENTWISE_OPS[op_kind](a)


# -- shape ops ---------------------------------------------------------------


def reshape(a, shape) -> Tensor:
    a = _as_tensor(a)
    shape = tuple(shape)
    out = Tensor(np.reshape(a.data, shape))

    def vjp(g, needed):
        return (reshape(g, a.data.shape),)

    _record(out, (a,), vjp)
    return out


def transpose(a, axes=None) -> Tensor:
    a = _as_tensor(a)
    if axes is None:
        axes = tuple(reversed(range(a.data.ndim)))
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    out = Tensor(np.transpose(a.data, axes))

    def vjp(g, needed):
        return (transpose(g, inv),)

    _record(out, (a,), vjp)
    return out


def broadcast_to(a, shape) -> Tensor:
    a = _as_tensor(a)
    shape = tuple(shape)
    out = Tensor(np.broadcast_to(a.data, shape).copy())

    def vjp(g, needed):
        return (_unbroadcast(g, a.data.shape),)

    _record(out, (a,), vjp)
    return out


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    if len({t.data.dtype for t in tensors}) != 1:
        raise AutodiffError("concat requires a single dtype")
    out = Tensor(np.concatenate([t.data for t in tensors], axis=axis))
    sizes = [t.data.shape[axis] for t in tensors]
    offsets = np.concatenate([[0], np.cumsum(sizes)])

    def vjp(g, needed):
        return tuple(
            narrow(g, axis, int(offsets[i]), sizes[i]) if needed[i] else None
            for i in range(len(tensors))
        )

    _record(out, tuple(tensors), vjp)
    return out


def narrow(a, axis: int, start: int, length: int) -> Tensor:
    a = _as_tensor(a)
    idx = [slice(None)] * a.data.ndim
    idx[axis] = slice(start, start + length)
    out = Tensor(a.data[tuple(idx)])
    before = start
    after = a.data.shape[axis] - start - length

    def vjp(g, needed):
        parts = []
        if before:
            shp = list(a.data.shape)
            shp[axis] = before
            parts.append(Tensor(np.zeros(shp, dtype=a.data.dtype)))
        parts.append(g)
        if after:
            shp = list(a.data.shape)
            shp[axis] = after
            parts.append(Tensor(np.zeros(shp, dtype=a.data.dtype)))
        return (concat(parts, axis) if len(parts) > 1 else g,)

    _record(out, (a,), vjp)
    return out


# -- reductions ---------------------------------------------------------------


def _norm_axes(axes, ndim: int) -> tuple[int, ...]:
    if axes is None:
        return tuple(range(ndim))
    if isinstance(axes, int):
        axes = [axes]
    axes = tuple(axes)
    if len(axes) == 0:
        return tuple(range(ndim))
    norm = []
    for ax in axes:
        if ax < 0:
            ax += ndim
        if not 0 <= ax < ndim:
            raise AutodiffError(f"axis {ax} out of range for ndim {ndim}")
        norm.append(ax)
    return tuple(norm)


def sum_(a, axes=None, keepdims: bool = False) -> Tensor:
    a = _as_tensor(a)
    axes = _norm_axes(axes, a.data.ndim)
    # float64 accumulation keeps long reductions stable at float32 storage
    data = np.sum(a.data, axis=axes, keepdims=keepdims, dtype=np.float64)
    out = Tensor(np.asarray(data, dtype=a.data.dtype))
    kept_shape = tuple(
        1 if i in axes else s for i, s in enumerate(a.data.shape)
    )

    def vjp(g, needed):
        gk = g if keepdims else reshape(g, kept_shape)
        return (broadcast_to(gk, a.data.shape),)

    _record(out, (a,), vjp)
    return out


def mean_(a, axes=None, keepdims: bool = False) -> Tensor:
    a = _as_tensor(a)
    axes = _norm_axes(axes, a.data.ndim)
    count = 1
    for ax in axes:
        count *= a.data.shape[ax]
    return mul(sum_(a, axes, keepdims), 1.0 / float(count))


def reduce(op_kind: str, a, axes=None, keepdims: bool = False) -> Tensor:
    if op_kind == "sum":
        return sum_(a, axes, keepdims)
    if op_kind == "mean":
        return mean_(a, axes, keepdims)
    raise AutodiffError(f"unknown reduce op {op_kind!r}")


# -- linear algebra ------------------------------------------------------------


def matmul(a, b) -> Tensor:
    a, b = _coerce_pair(a, b)
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise AutodiffError("matmul supports 2-D operands only")
    if a.data.shape[1] != b.data.shape[0]:
        raise AutodiffError(
            f"matmul inner dims differ: {a.data.shape} @ {b.data.shape}"
        )
    out = Tensor(a.data @ b.data)

    def vjp(g, needed):
        return (
            matmul(g, transpose(b)) if needed[0] else None,
            matmul(transpose(a), g) if needed[1] else None,
        )

    _record(out, (a, b), vjp)
    return out


# -- convolution ---------------------------------------------------------------


def _conv_out_extent(extent: int, k: int, stride: int, padding: int) -> int:
    return (extent + 2 * padding - k) // stride + 1


def im2col(x, kh: int, kw: int, stride: int = 1, padding: int = 0) -> Tensor:
    """Gather conv patches: [N,C,H,W] -> [N, OH*OW, C*kh*kw]."""
    x = _as_tensor(x)
    n, c, h, w = x.data.shape
    oh = _conv_out_extent(h, kh, stride, padding)
    ow = _conv_out_extent(w, kw, stride, padding)
    xp = x.data
    if padding:
        xp = np.pad(xp, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))
    win = win[:, :, ::stride, ::stride]  # [N,C,OH,OW,kh,kw]
    out = Tensor(win.transpose(0, 2, 3, 1, 4, 5).reshape(n, oh * ow, c * kh * kw))

    def vjp(g, needed):
        return (col2im(g, (n, c, h, w), kh, kw, stride, padding),)

    _record(out, (x,), vjp)
    return out


def col2im(cols, x_shape, kh: int, kw: int, stride: int = 1, padding: int = 0) -> Tensor:
    """Scatter-add patches back onto the image grid; transpose of im2col."""
    cols = _as_tensor(cols)
    n, c, h, w = x_shape
    oh = _conv_out_extent(h, kh, stride, padding)
    ow = _conv_out_extent(w, kw, stride, padding)
    # contiguous [kh,kw,N,C,OH,OW] so the scatter below adds whole slabs
    cre = np.ascontiguousarray(
        cols.data.reshape(n, oh, ow, c, kh, kw).transpose(4, 5, 0, 3, 1, 2)
    )
    hp, wp = h + 2 * padding, w + 2 * padding
    xp = np.zeros((n, c, hp, wp), dtype=cols.data.dtype)
    for i in range(kh):
        for j in range(kw):
            xp[:, :, i : i + stride * oh : stride, j : j + stride * ow : stride] += cre[i, j]
    if padding:
        xp = np.ascontiguousarray(xp[:, :, padding : padding + h, padding : padding + w])
    out = Tensor(xp)

    def vjp(g, needed):
        return (im2col(g, kh, kw, stride, padding),)

    _record(out, (cols,), vjp)
    return out


def conv2d(x, kernel, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation with zero padding, built from im2col + matmul."""
    x = _as_tensor(x)
    kernel = _as_tensor(kernel)
    if x.data.ndim != 4 or kernel.data.ndim != 4:
        raise AutodiffError("conv2d expects [N,C,H,W] input and [K,C,kh,kw] kernel")
    n, c, h, w = x.data.shape
    k, ck, kh, kw = kernel.data.shape
    if ck != c:
        raise AutodiffError(f"channel mismatch: input has {c}, kernel expects {ck}")
    if stride < 1:
        raise AutodiffError("stride must be >= 1")
    if kh > h + 2 * padding or kw > w + 2 * padding:
        raise AutodiffError("kernel larger than padded input")
    oh = _conv_out_extent(h, kh, stride, padding)
    ow = _conv_out_extent(w, kw, stride, padding)
    cols = im2col(x, kh, kw, stride, padding)           # [N, P, C*kh*kw]
    flat = reshape(cols, (n * oh * ow, c * kh * kw))
    kmat = transpose(reshape(kernel, (k, c * kh * kw)))  # [C*kh*kw, K]
    y = matmul(flat, kmat)                               # [N*P, K]
    return _rows_to_nchw(y, n, k, oh, ow)


def _rows_to_nchw(y, n: int, k: int, oh: int, ow: int) -> Tensor:
    """Fused [N*OH*OW, K] -> [N, K, OH, OW] layout change (single copy)."""
    y = _as_tensor(y)
    out = Tensor(
        np.ascontiguousarray(y.data.reshape(n, oh, ow, k).transpose(0, 3, 1, 2))
    )

    def vjp(g, needed):
        gr = transpose(reshape(g, (n, k, oh * ow)), (0, 2, 1))
        return (reshape(gr, (n * oh * ow, k)),)

    _record(out, (y,), vjp)
    return out


def im2col_nhwc(x, kh: int, kw: int, stride: int = 1, padding: int = 0) -> Tensor:
    """Gather conv patches, channels-last: [N,H,W,C] -> [N, OH*OW, kh*kw*C]."""
    x = _as_tensor(x)
    n, h, w, c = x.data.shape
    oh = _conv_out_extent(h, kh, stride, padding)
    ow = _conv_out_extent(w, kw, stride, padding)
    xp = x.data
    if padding:
        xp = np.pad(xp, ((0, 0), (padding, padding), (padding, padding), (0, 0)))
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(1, 2))
    win = win[:, ::stride, ::stride]  # [N,OH,OW,C,kh,kw]
    out = Tensor(
        win.transpose(0, 1, 2, 4, 5, 3).reshape(n, oh * ow, kh * kw * c)
    )

    def vjp(g, needed):
        return (col2im_nhwc(g, (n, h, w, c), kh, kw, stride, padding),)

    _record(out, (x,), vjp)
    return out


def col2im_nhwc(cols, x_shape, kh: int, kw: int, stride: int = 1, padding: int = 0) -> Tensor:
    """Channels-last scatter-add; transpose of im2col_nhwc."""
    cols = _as_tensor(cols)
    n, h, w, c = x_shape
    oh = _conv_out_extent(h, kh, stride, padding)
    ow = _conv_out_extent(w, kw, stride, padding)
    cre = cols.data.reshape(n, oh, ow, kh, kw, c)
    hp, wp = h + 2 * padding, w + 2 * padding
    xp = np.zeros((n, hp, wp, c), dtype=cols.data.dtype)
    for i in range(kh):
        for j in range(kw):
            xp[:, i : i + stride * oh : stride, j : j + stride * ow : stride, :] += (
                cre[:, :, :, i, j, :]
            )
    if padding:
        xp = np.ascontiguousarray(xp[:, padding : padding + h, padding : padding + w, :])
    out = Tensor(xp)

    def vjp(g, needed):
        return (im2col_nhwc(g, kh, kw, stride, padding),)

    _record(out, (cols,), vjp)
    return out


def conv2d_nhwc(x, kernel, stride: int = 1, padding: int = 0) -> Tensor:
    """Channels-last convolution; kernel is [kh,kw,Cin,K]."""
    x = _as_tensor(x)
    kernel = _as_tensor(kernel)
    n, h, w, c = x.data.shape
    kh, kw, ck, k = kernel.data.shape
    if ck != c:
        raise AutodiffError(f"channel mismatch: input has {c}, kernel expects {ck}")
    oh = _conv_out_extent(h, kh, stride, padding)
    ow = _conv_out_extent(w, kw, stride, padding)
    cols = im2col_nhwc(x, kh, kw, stride, padding)
    flat = reshape(cols, (n * oh * ow, kh * kw * c))
    y = matmul(flat, reshape(kernel, (kh * kw * c, k)))
    return reshape(y, (n, oh, ow, k))


def upsample_nearest_nhwc(x, factor: int) -> Tensor:
    x = _as_tensor(x)
    n, h, w, c = x.data.shape
    r = reshape(x, (n, h, 1, w, 1, c))
    o = ones((1, 1, factor, 1, factor, 1), dtype=x.data.dtype)
    return reshape(mul(r, o), (n, h * factor, w * factor, c))


def nchw_to_nhwc(x) -> Tensor:
    return transpose(_as_tensor(x), (0, 2, 3, 1))


def nhwc_to_nchw(x) -> Tensor:
    return transpose(_as_tensor(x), (0, 3, 1, 2))


def upsample_nearest(x, factor: int) -> Tensor:
    """Nearest-neighbor 2-D upsampling by an integer factor."""
    x = _as_tensor(x)
    n, c, h, w = x.data.shape
    r = reshape(x, (n, c, h, 1, w, 1))
    o = ones((1, 1, 1, factor, 1, factor), dtype=x.data.dtype)
    return reshape(mul(r, o), (n, c, h * factor, w * factor))


def avgpool(x, factor: int) -> Tensor:
    """Non-overlapping 2-D average pooling by an integer factor."""
    x = _as_tensor(x)
    n, c, h, w = x.data.shape
    if h % factor or w % factor:
        raise AutodiffError(f"pool factor {factor} must divide extents {(h, w)}")
    r = reshape(x, (n, c, h // factor, factor, w // factor, factor))
    return mean_(r, (3, 5))


# -- reverse pass ---------------------------------------------------------------


def _walk(
    seed: Tensor, create_graph: bool, targets: Sequence[Tensor] | None = None
) -> tuple[dict[int, Tensor], dict[int, Tensor]]:
    """Reverse-order tape walk from ``seed``.

    With ``targets`` given, only subgraphs that feed a target are
    differentiated. Returns (grads by tensor id, leaf tensors by id).
    """
    grads: dict[int, Tensor] = {
        id(seed): ones(seed.data.shape, dtype=seed.data.dtype)
    }
    leaves: dict[int, Tensor] = {}
    end = _tape.nodes.index(seed.node) if seed.node is not None else -1
    nodes = _tape.nodes[: end + 1]
    marked: set[int] | None = None
    if targets is not None:
        marked = {id(t) for t in targets}
        for node in nodes:
            if any(id(p) in marked for p in node.parents):
                marked.add(id(node.out))
    ctx = no_grad() if not create_graph else _NullCtx()
    with ctx:
        for node in reversed(nodes):
            g = grads.pop(id(node.out), None)
            if g is None:
                continue
            if marked is None:
                needed = tuple(_tracked(p) for p in node.parents)
            else:
                needed = tuple(id(p) in marked for p in node.parents)
            if not any(needed):
                continue
            parent_grads = node.vjp(g, needed)
            for p, pg, want in zip(node.parents, parent_grads, needed):
                if pg is None or not want or not _tracked(p):
                    continue
                prev = grads.get(id(p))
                grads[id(p)] = pg if prev is None else add(prev, pg)
                if p.node is None and p.requires_grad:
                    leaves[id(p)] = p
    return grads, leaves


class _NullCtx:
    def __enter__(self):
        return self

    def __exit__(self, *exc):
        return False


def backward(loss: Tensor):
    """Accumulate d(loss)/d(leaf) into .grad of every reachable leaf.

    The graph is freed afterwards; rerun the forward pass before calling
    backward again.
    """
    if loss.data.size != 1:
        raise AutodiffError(f"backward needs a scalar loss, got shape {loss.data.shape}")
    if loss.node is None:
        raise AutodiffError("backward on a tensor with no recorded graph")
    grads, leaves = _walk(loss, create_graph=False)
    for lid, leaf in leaves.items():
        g = grads.get(lid)
        if g is None:
            continue
        if leaf.grad is None:
            leaf.grad = Tensor(g.data.copy())
        else:
            leaf.grad = Tensor(leaf.grad.data + g.data)
    clear_tape()


def grad(output: Tensor, inputs: Sequence[Tensor], create_graph: bool = False) -> list[Tensor]:
    """Gradients of a scalar output w.r.t. ``inputs``, without touching .grad.

    With ``create_graph=True`` the returned gradients are themselves
    recorded, so they can be differentiated again.
    """
    if output.data.size != 1:
        raise AutodiffError(f"grad needs a scalar output, got shape {output.data.shape}")
    if output.node is None:
        raise AutodiffError("grad on a tensor with no recorded graph")
    grads, _ = _walk(output, create_graph=create_graph, targets=inputs)
    result = []
    for t in inputs:
        g = grads.get(id(t))
        result.append(g if g is not None else zeros_like(t))
    return result


# -- verification utility --------------------------------------------------------


def grad_check(f: Callable[[Tensor], Tensor], x: Tensor, h: float = 1e-4) -> float:
    """Max relative error between analytic and central-difference gradients.

    Evaluates in float64 regardless of x's dtype; a non-finite value on
    either side is reported as an infinite error rather than raised.
    """
    x64 = Tensor(x.data.astype(np.float64), requires_grad=True)
    try:
        y = f(x64)
        analytic = grad(y, [x64])[0].data.copy()
    finally:
        clear_tape()

    flat = x64.data.reshape(-1)
    fd = np.empty_like(flat)
    with no_grad():
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = f(x64).item()
            flat[i] = orig - h
            fm = f(x64).item()
            flat[i] = orig
            fd[i] = (fp - fm) / (2 * h)
    if not (np.all(np.isfinite(analytic)) and np.all(np.isfinite(fd))):
        return float("inf")
    rel = np.abs(analytic.reshape(-1) - fd) / (np.abs(fd) + 1e-8)
    return float(np.max(rel)) if rel.size else 0.0
