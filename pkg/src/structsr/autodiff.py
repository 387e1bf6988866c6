"""Dense tensors with reverse-mode automatic differentiation.

A ``Tensor`` wraps a NumPy array and records the operations that produced
it on an eager tape (closures on each node). Calling :meth:`Tensor.backward`
on a scalar walks the tape once, in reverse topological order, accumulating
gradients into every reachable tensor that has ``requires_grad`` set.

Everything in this package — networks, losses, the gradient-map operator —
is composed from the operations defined here. Arithmetic is float64 by
default (gradient checks need the precision); training code passes float32
arrays for speed.
"""

from __future__ import annotations

import numpy as np

DEFAULT_DTYPE = np.float64

# Names of the differentiable operations the finite-difference harness in the
# test suite must cover. Kept here so coverage can be asserted mechanically.
DIFFERENTIABLE_OPS = [
    "add",
    "sub",
    "mul",
    "div",
    "matmul",
    "relu",
    "leaky_relu",
    "sigmoid",
    "log_sigmoid",
    "log",
    "exp",
    "sqrt",
    "abs",
    "sum",
    "mean",
    "reshape",
    "narrow",
    "concat",
    "conv2d",
    "maxpool2d",
    "pad2d_replicate",
    "upsample_nearest",
    "space_to_depth",
    "depth_to_space",
]

_grad_enabled = True


class no_grad:
    """Context manager that suspends tape recording."""

    def __enter__(self):
        global _grad_enabled
        self._prev = _grad_enabled
        _grad_enabled = False

    def __exit__(self, *exc):
        global _grad_enabled
        _grad_enabled = self._prev


def _as_array(data, dtype=None):
    arr = np.asarray(data)
    if dtype is not None:
        return arr.astype(dtype, copy=False)
    if arr.dtype in (np.float32, np.float64):
        return arr
    return arr.astype(DEFAULT_DTYPE)


class Tensor:
    """N-dimensional array participating in the gradient tape.

    Data is immutable by convention once the tensor has entered a graph;
    the only sanctioned in-place mutations are gradient accumulation and
    optimizer updates on leaf parameters between steps.
    """

    __slots__ = ("data", "grad", "requires_grad", "_backward", "_parents", "_flow")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        self.data = _as_array(data, dtype)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._backward = None
        self._parents = ()
        self._flow = None

    # -- construction of op results -------------------------------------

    @staticmethod
    def _result(data, parents, backward):
        out = Tensor(data)
        if _grad_enabled and any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = tuple(parents)
            out._backward = backward
        return out

    def _accumulate(self, g):
        # Within-pass gradient staging; backward() moves staged flow into
        # .grad so repeated backward calls accumulate cleanly.
        if not self.requires_grad:
            return
        if self._flow is None:
            self._flow = g
        else:
            self._flow = self._flow + g

    # -- basic properties -------------------------------------------------

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
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data.item())

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    # -- backward ---------------------------------------------------------

    def backward(self):
        """Backpropagate from a scalar, accumulating into ``.grad`` fields.

        Repeated calls without zeroing keep accumulating (sum rule).
        """
        if self.data.size != 1:
            raise ValueError(
                f"backward() requires a scalar, got shape {self.data.shape}"
            )
        order = _toposort(self)
        self._flow = np.ones_like(self.data)
        for node in reversed(order):
            g = node._flow
            if g is None:
                continue
            node._flow = None
            if node.requires_grad:
                landed = np.array(g, copy=True) if g.base is not None else g
                node.grad = landed if node.grad is None else node.grad + landed
            if node._backward is not None:
                node._backward(g)

    # -- operator sugar ----------------------------------------------------

    def __add__(self, other):
        return add(self, _coerce(other, self))

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, _coerce(other, self))

    def __rsub__(self, other):
        return sub(_coerce(other, self), self)

    def __mul__(self, other):
        return mul(self, _coerce(other, self))

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, _coerce(other, self))

    def __rtruediv__(self, other):
        return div(_coerce(other, self), self)

    def __neg__(self):
        return mul(self, _coerce(-1.0, self))

    def __matmul__(self, other):
        return matmul(self, other)

    # method forms of the common ops
    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis, keepdims)

    def reshape(self, *shape):
        return reshape(self, shape if len(shape) > 1 else shape[0])

    def abs(self):
        return tabs(self)

    def sqrt(self):
        return sqrt(self)


def _coerce(x, like: Tensor) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=like.data.dtype))


def _toposort(root: Tensor):
    # Iterative DFS; the graphs here (dozens of RRDBs deep) overflow the
    # recursion limit easily.
    order, visited = [], set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in visited:
                stack.append((p, False))
    return order


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    """Sum ``g`` down to ``shape``, undoing NumPy broadcasting."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# elementwise arithmetic
# ---------------------------------------------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    data = a.data + b.data

    def backward(g):
        a._accumulate(_unbroadcast(g, a.shape))
        b._accumulate(_unbroadcast(g, b.shape))

    return Tensor._result(data, (a, b), backward)


def sub(a: Tensor, b: Tensor) -> Tensor:
    data = a.data - b.data

    def backward(g):
        a._accumulate(_unbroadcast(g, a.shape))
        b._accumulate(_unbroadcast(-g, b.shape))

    return Tensor._result(data, (a, b), backward)


def mul(a: Tensor, b: Tensor) -> Tensor:
    data = a.data * b.data

    def backward(g):
        a._accumulate(_unbroadcast(g * b.data, a.shape))
        b._accumulate(_unbroadcast(g * a.data, b.shape))

    return Tensor._result(data, (a, b), backward)


def div(a: Tensor, b: Tensor) -> Tensor:
    data = a.data / b.data

    def backward(g):
        a._accumulate(_unbroadcast(g / b.data, a.shape))
        b._accumulate(_unbroadcast(-g * a.data / (b.data * b.data), b.shape))

    return Tensor._result(data, (a, b), backward)


def mul_scalar(a: Tensor, s: float) -> Tensor:
    return mul(a, _coerce(s, a))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2:
        raise ValueError(f"matmul expects 2-d operands, got {a.shape} @ {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    data = a.data @ b.data

    def backward(g):
        a._accumulate(g @ b.data.T)
        b._accumulate(a.data.T @ g)

    return Tensor._result(data, (a, b), backward)


# ---------------------------------------------------------------------------
# nonlinearities
# ---------------------------------------------------------------------------


def relu(a: Tensor) -> Tensor:
    data = np.maximum(a.data, 0.0)

    def backward(g):
        a._accumulate(g * (a.data > 0))

    return Tensor._result(data, (a,), backward)


def leaky_relu(a: Tensor, slope: float = 0.2) -> Tensor:
    """max(x, slope*x); the subgradient at exactly 0 is ``slope``."""
    if not 0.0 <= slope < 1.0:
        raise ValueError(f"leaky_relu slope must be in [0, 1), got {slope}")
    data = np.where(a.data > 0, a.data, slope * a.data)

    def backward(g):
        a._accumulate(g * np.where(a.data > 0, 1.0, slope))

    return Tensor._result(data, (a,), backward)


def sigmoid(a: Tensor) -> Tensor:
    data = _sigmoid(a.data)

    def backward(g):
        a._accumulate(g * data * (1.0 - data))

    return Tensor._result(data, (a,), backward)


def _sigmoid(x):
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    e = np.exp(x[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def log_sigmoid(a: Tensor) -> Tensor:
    """Numerically stable log(sigmoid(x)) = -softplus(-x)."""
    x = a.data
    data = np.where(x > 0, -np.log1p(np.exp(-np.abs(x))), x - np.log1p(np.exp(-np.abs(x))))

    def backward(g):
        a._accumulate(g * _sigmoid(-x))

    return Tensor._result(data, (a,), backward)


def log(a: Tensor) -> Tensor:
    data = np.log(a.data)

    def backward(g):
        a._accumulate(g / a.data)

    return Tensor._result(data, (a,), backward)


def exp(a: Tensor) -> Tensor:
    data = np.exp(a.data)

    def backward(g):
        a._accumulate(g * data)

    return Tensor._result(data, (a,), backward)


def sqrt(a: Tensor) -> Tensor:
    data = np.sqrt(a.data)

    def backward(g):
        a._accumulate(g * 0.5 / data)

    return Tensor._result(data, (a,), backward)


def tabs(a: Tensor) -> Tensor:
    """|x|; subgradient at 0 taken as 0."""
    data = np.abs(a.data)

    def backward(g):
        a._accumulate(g * np.sign(a.data))

    return Tensor._result(data, (a,), backward)


# ---------------------------------------------------------------------------
# reductions and shape ops
# ---------------------------------------------------------------------------


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    data = a.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is None:
            a._accumulate(np.broadcast_to(g, a.shape))
            return
        if not keepdims:
            g = np.expand_dims(g, axis)
        a._accumulate(np.broadcast_to(g, a.shape))

    return Tensor._result(data, (a,), backward)


def tmean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    count = a.size if axis is None else np.prod(
        [a.shape[ax] for ax in (axis if isinstance(axis, tuple) else (axis,))]
    )
    data = a.data.mean(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is None:
            a._accumulate(np.broadcast_to(g / count, a.shape))
            return
        if not keepdims:
            g = np.expand_dims(g, axis)
        a._accumulate(np.broadcast_to(g / count, a.shape))

    return Tensor._result(data, (a,), backward)


def abs_sum(a: Tensor) -> Tensor:
    """Sum of absolute values (L1)."""
    return tsum(tabs(a))


def square_sum(a: Tensor) -> Tensor:
    """Sum of squares (squared L2)."""
    return tsum(mul(a, a))


def reshape(a: Tensor, shape) -> Tensor:
    data = a.data.reshape(shape)

    def backward(g):
        a._accumulate(g.reshape(a.shape))

    return Tensor._result(data, (a,), backward)


def narrow(a: Tensor, axis: int, start: int, length: int) -> Tensor:
    """Slice ``length`` entries from ``start`` along ``axis``."""
    idx = [slice(None)] * a.ndim
    idx[axis] = slice(start, start + length)
    idx = tuple(idx)
    data = a.data[idx]

    def backward(g):
        full = np.zeros(a.shape, dtype=g.dtype)
        full[idx] = g
        a._accumulate(full)

    return Tensor._result(data, (a,), backward)


def concat(tensors, axis: int) -> Tensor:
    tensors = list(tensors)
    ref = tensors[0].shape
    for t in tensors[1:]:
        if len(t.shape) != len(ref) or any(
            i != axis and t.shape[i] != ref[i] for i in range(len(ref))
        ):
            raise ValueError(
                f"concat shape mismatch on axis {axis}: "
                f"{[tuple(t.shape) for t in tensors]}"
            )
    data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def backward(g):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            idx = [slice(None)] * g.ndim
            idx[axis] = slice(lo, hi)
            t._accumulate(g[tuple(idx)])

    return Tensor._result(data, tuple(tensors), backward)


# ---------------------------------------------------------------------------
# spatial ops (NCHW)
# ---------------------------------------------------------------------------


def _im2col(xp: np.ndarray, kh: int, kw: int, stride: int, ho: int, wo: int):
    """(C, Hp, Wp) -> contiguous (C*kh*kw, ho*wo) patch matrix."""
    c = xp.shape[0]
    sc, sh, sw = xp.strides
    view = np.lib.stride_tricks.as_strided(
        xp,
        shape=(c, kh, kw, ho, wo),
        strides=(sc, sh, sw, stride * sh, stride * sw),
        writeable=False,
    )
    return view.reshape(c * kh * kw, ho * wo)


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None,
           stride: int = 1, padding: int = 0) -> Tensor:
    """2-d cross-correlation, NCHW input against OIkk kernels."""
    if x.ndim != 4 or weight.ndim != 4:
        raise ValueError(
            f"conv2d expects 4-d input and kernel, got {x.shape} and {weight.shape}"
        )
    if stride < 1 or padding < 0:
        raise ValueError(f"conv2d invalid stride={stride} padding={padding}")
    n, c, h, w = x.shape
    co, ci, kh, kw = weight.shape
    if c != ci:
        raise ValueError(
            f"conv2d channel mismatch: input {tuple(x.shape)} vs kernel {tuple(weight.shape)}"
        )
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (w + 2 * padding - kw) // stride + 1
    if ho < 1 or wo < 1:
        raise ValueError(
            f"conv2d output would be empty: input {tuple(x.shape)}, "
            f"kernel {tuple(weight.shape)}, stride {stride}, padding {padding}"
        )

    if padding:
        xpad = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    else:
        xpad = x.data
    w2 = weight.data.reshape(co, ci * kh * kw)
    out = np.empty((n, co, ho * wo), dtype=np.result_type(x.data, weight.data))
    for b in range(n):
        out[b] = w2 @ _im2col(xpad[b], kh, kw, stride, ho, wo)
    data = out.reshape(n, co, ho, wo)
    if bias is not None:
        if bias.shape != (co,):
            raise ValueError(f"conv2d bias shape {tuple(bias.shape)} != ({co},)")
        data = data + bias.data[None, :, None, None]

    parents = (x, weight) if bias is None else (x, weight, bias)

    def backward(g):
        go = g.reshape(n, co, ho * wo)
        if bias is not None:
            bias._accumulate(g.sum(axis=(0, 2, 3)))
        need_x = x.requires_grad
        need_w = weight.requires_grad
        gw = np.zeros_like(w2) if need_w else None
        gx = np.zeros_like(xpad) if need_x else None
        for b in range(n):
            if need_w:
                cols = _im2col(xpad[b], kh, kw, stride, ho, wo)
                gw += go[b] @ cols.T
            if need_x:
                gcols = (w2.T @ go[b]).reshape(ci, kh, kw, ho, wo)
                for i in range(kh):
                    for j in range(kw):
                        gx[b, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += gcols[:, i, j]
        if need_w:
            weight._accumulate(gw.reshape(weight.shape))
        if need_x:
            if padding:
                gx = gx[:, :, padding:padding + h, padding:padding + w]
            x._accumulate(gx)

    return Tensor._result(data, parents, backward)


def maxpool2d(x: Tensor, kernel: int, stride: int) -> Tensor:
    if x.ndim != 4:
        raise ValueError(f"maxpool2d expects NCHW input, got {x.shape}")
    n, c, h, w = x.shape
    ho = (h - kernel) // stride + 1
    wo = (w - kernel) // stride + 1
    if ho < 1 or wo < 1:
        raise ValueError(f"maxpool2d window {kernel} too large for input {tuple(x.shape)}")
    sn, sc, sh, sw = x.data.strides
    windows = np.lib.stride_tricks.as_strided(
        x.data,
        shape=(n, c, ho, wo, kernel, kernel),
        strides=(sn, sc, stride * sh, stride * sw, sh, sw),
        writeable=False,
    )
    flat = windows.reshape(n, c, ho, wo, kernel * kernel)
    arg = flat.argmax(axis=-1)
    data = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]

    def backward(g):
        gx = np.zeros_like(x.data)
        bi, ci_, oi, oj = np.indices((n, c, ho, wo))
        hi = oi * stride + arg // kernel
        wj = oj * stride + arg % kernel
        np.add.at(gx, (bi, ci_, hi, wj), g)
        x._accumulate(gx)

    return Tensor._result(data, (x,), backward)


def pad2d_replicate(x: Tensor, pad: int) -> Tensor:
    """Edge-replicating spatial padding of an NCHW tensor."""
    if x.ndim != 4:
        raise ValueError(f"pad2d_replicate expects NCHW input, got {x.shape}")
    n, c, h, w = x.shape
    iy = np.clip(np.arange(-pad, h + pad), 0, h - 1)
    ix = np.clip(np.arange(-pad, w + pad), 0, w - 1)
    data = x.data[:, :, iy[:, None], ix[None, :]]

    def backward(g):
        gx = np.zeros_like(x.data)
        np.add.at(gx, (slice(None), slice(None), iy[:, None], ix[None, :]), g)
        x._accumulate(gx)

    return Tensor._result(data, (x,), backward)


def upsample_nearest(x: Tensor, factor: int) -> Tensor:
    """Nearest-neighbour upsampling; each pixel becomes an f-by-f block."""
    if factor < 1:
        raise ValueError(f"upsample factor must be >= 1, got {factor}")
    if x.ndim != 4:
        raise ValueError(f"upsample_nearest expects NCHW input, got {x.shape}")
    if factor == 1:
        return reshape(x, x.shape)
    n, c, h, w = x.shape
    data = x.data.repeat(factor, axis=2).repeat(factor, axis=3)

    def backward(g):
        x._accumulate(
            g.reshape(n, c, h, factor, w, factor).sum(axis=(3, 5))
        )

    return Tensor._result(data, (x,), backward)


def space_to_depth(x: Tensor, factor: int) -> Tensor:
    """Lossless H,W -> channel rearrangement (the desubpixel layer).

    Output channel layout is (c, block_row, block_col): channel
    ``c*f*f + i*f + j`` holds input pixel offset (i, j) of each f-by-f block.
    """
    if x.ndim != 4:
        raise ValueError(f"space_to_depth expects NCHW input, got {x.shape}")
    n, c, h, w = x.shape
    if h % factor or w % factor:
        raise ValueError(
            f"space_to_depth: dims {h}x{w} not divisible by factor {factor}"
        )
    ho, wo = h // factor, w // factor
    data = (
        x.data.reshape(n, c, ho, factor, wo, factor)
        .transpose(0, 1, 3, 5, 2, 4)
        .reshape(n, c * factor * factor, ho, wo)
    )

    def backward(g):
        x._accumulate(
            g.reshape(n, c, factor, factor, ho, wo)
            .transpose(0, 1, 4, 2, 5, 3)
            .reshape(n, c, h, w)
        )

    return Tensor._result(data, (x,), backward)


def depth_to_space(x: Tensor, factor: int) -> Tensor:
    """Inverse of :func:`space_to_depth` (sub-pixel shuffle)."""
    if x.ndim != 4:
        raise ValueError(f"depth_to_space expects NCHW input, got {x.shape}")
    n, c, h, w = x.shape
    if c % (factor * factor):
        raise ValueError(
            f"depth_to_space: channels {c} not divisible by {factor * factor}"
        )
    co = c // (factor * factor)
    data = (
        x.data.reshape(n, co, factor, factor, h, w)
        .transpose(0, 1, 4, 2, 5, 3)
        .reshape(n, co, h * factor, w * factor)
    )

    def backward(g):
        x._accumulate(
            g.reshape(n, co, h, factor, w, factor)
            .transpose(0, 1, 3, 5, 2, 4)
            .reshape(n, c, h, w)
        )

    return Tensor._result(data, (x,), backward)
