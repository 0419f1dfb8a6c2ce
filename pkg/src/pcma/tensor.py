"""Dense tensor engine with reverse-mode differentiation.

Values are numpy arrays in channels-last row-major layout. Every operation
that participates in training records its parents and a backward closure;
calling ``backward()`` on a scalar result accumulates gradients into every
reachable tensor with ``requires_grad`` set. numpy supplies the dense
kernels; the graph, the gradients, and the network-specific operations
(grouped gather/scatter, mask-aware selection, resizing) live here.
"""

from __future__ import annotations

import contextlib

import numpy as np

__all__ = [
    "Tensor",
    "ShapeError",
    "ContractError",
    "NumericError",
    "set_default_dtype",
    "get_default_dtype",
    "precision",
    "no_grad",
    "set_deterministic",
    "is_deterministic",
    "matmul",
    "bmm",
    "softmax_lastdim",
    "l2_normalize",
    "conv2d",
    "gather_rows",
    "scatter_rows",
    "upsample_nearest2x",
    "resize_bilinear",
    "repeat_lastdim",
    "relu",
    "sigmoid",
    "exp",
    "log",
    "sqrt",
    "clip",
    "tsum",
    "tmean",
    "reshape",
    "transpose",
]


class ShapeError(ValueError):
    """Operand shapes violate an operation's contract."""


class ContractError(ValueError):
    """A value-level precondition is violated (e.g. a non-binary mask)."""


class NumericError(ArithmeticError):
    """A computation produced or detected non-finite values."""


_DEFAULT_DTYPE = np.float32
_GRAD_ENABLED = True
_DETERMINISTIC = False
_THREAD_LIMITER = None

L2_EPS = 1e-12


def set_default_dtype(dtype) -> None:
    """Set the scalar precision for newly created tensors.

    Single precision is the training default; verification harnesses switch
    to double precision via :func:`precision`.
    """
    global _DEFAULT_DTYPE
    dt = np.dtype(dtype)
    if dt not in (np.dtype(np.float32), np.dtype(np.float64)):
        raise ValueError(f"unsupported default dtype {dt}")
    _DEFAULT_DTYPE = dt.type


def get_default_dtype():
    return _DEFAULT_DTYPE


@contextlib.contextmanager
def precision(dtype):
    """Temporarily switch the default scalar precision."""
    prev = _DEFAULT_DTYPE
    set_default_dtype(dtype)
    try:
        yield
    finally:
        set_default_dtype(prev)


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def set_deterministic(flag: bool) -> None:
    """Force single-threaded kernels with a fixed summation order.

    All ops already use a fixed order; this additionally caps BLAS thread
    pools so repeated runs are bitwise reproducible regardless of machine
    load.
    """
    global _DETERMINISTIC, _THREAD_LIMITER
    _DETERMINISTIC = bool(flag)
    if flag and _THREAD_LIMITER is None:
        try:
            from threadpoolctl import threadpool_limits

            _THREAD_LIMITER = threadpool_limits(limits=1)
        except Exception:
            _THREAD_LIMITER = None
    elif not flag and _THREAD_LIMITER is not None:
        try:
            _THREAD_LIMITER.restore_original_limits()
        finally:
            _THREAD_LIMITER = None


def is_deterministic() -> bool:
    return _DETERMINISTIC


def _as_array(data, dtype=None) -> np.ndarray:
    # Without an explicit dtype, tensors adopt the ambient precision.
    if dtype is not None:
        return np.asarray(data, dtype=dtype)
    if isinstance(data, np.ndarray) and data.dtype == _DEFAULT_DTYPE:
        return data
    return np.asarray(data, dtype=_DEFAULT_DTYPE)


class Tensor:
    """Dense n-dimensional array with optional gradient tracking."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        self.data = _as_array(data, dtype)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents = ()
        self._backward = None

    # -- graph construction -------------------------------------------------

    @staticmethod
    def _result(data: np.ndarray, parents, backward) -> "Tensor":
        out = Tensor.__new__(Tensor)
        out.data = data
        out.grad = None
        tracked = _GRAD_ENABLED and any(p.requires_grad for p in parents)
        out.requires_grad = tracked
        out._parents = tuple(parents) if tracked else ()
        out._backward = backward if tracked else None
        return out

    def _accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = g.astype(self.data.dtype, copy=True)
        else:
            self.grad += g

    def backward(self) -> None:
        """Reverse-mode pass from a scalar result."""
        if self.data.size != 1:
            raise ShapeError(f"backward() needs a scalar, got shape {self.shape}")
        topo: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen and (p.requires_grad or p._parents):
                    stack.append((p, False))
        self._accumulate(np.ones_like(self.data))
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False, dtype=self.data.dtype)

    # -- conveniences --------------------------------------------------------

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
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}, grad={self.requires_grad})"

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

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, *shape):
        return reshape(self, shape if len(shape) > 1 else shape[0])

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis=axis, keepdims=keepdims)


def _wrap(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    """Sum a broadcast gradient back down to ``shape``."""
    if g.shape == tuple(shape):
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, extent in enumerate(shape):
        if extent == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# -- arithmetic ---------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    out_data = a.data + b.data

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g, b.shape))

    return Tensor._result(out_data, (a, b), backward)


def sub(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    out_data = a.data - b.data

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(-g, b.shape))

    return Tensor._result(out_data, (a, b), backward)


def mul(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    out_data = a.data * b.data

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g * a.data, b.shape))

    return Tensor._result(out_data, (a, b), backward)


def div(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    out_data = a.data / b.data

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g / b.data, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(-g * a.data / (b.data * b.data), b.shape))

    return Tensor._result(out_data, (a, b), backward)


def neg(a) -> Tensor:
    a = _wrap(a)

    def backward(g):
        if a.requires_grad:
            a._accumulate(-g)

    return Tensor._result(-a.data, (a,), backward)


# -- unary --------------------------------------------------------------------


def relu(a) -> Tensor:
    a = _wrap(a)
    out_data = np.maximum(a.data, 0)

    def backward(g):
        if a.requires_grad:
            a._accumulate(g * (a.data > 0))

    return Tensor._result(out_data, (a,), backward)


def _sigmoid_stable(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(a) -> Tensor:
    a = _wrap(a)
    out_data = _sigmoid_stable(a.data)

    def backward(g):
        if a.requires_grad:
            a._accumulate(g * out_data * (1.0 - out_data))

    return Tensor._result(out_data, (a,), backward)


def exp(a) -> Tensor:
    a = _wrap(a)
    out_data = np.exp(a.data)

    def backward(g):
        if a.requires_grad:
            a._accumulate(g * out_data)

    return Tensor._result(out_data, (a,), backward)


def log(a) -> Tensor:
    a = _wrap(a)
    out_data = np.log(a.data)

    def backward(g):
        if a.requires_grad:
            a._accumulate(g / a.data)

    return Tensor._result(out_data, (a,), backward)


def sqrt(a) -> Tensor:
    a = _wrap(a)
    out_data = np.sqrt(a.data)

    def backward(g):
        if a.requires_grad:
            a._accumulate(g * 0.5 / out_data)

    return Tensor._result(out_data, (a,), backward)


def clip(a, lo: float, hi: float) -> Tensor:
    """Clamp values; gradient passes only through the unclamped region."""
    a = _wrap(a)
    out_data = np.clip(a.data, lo, hi)

    def backward(g):
        if a.requires_grad:
            a._accumulate(g * ((a.data >= lo) & (a.data <= hi)))

    return Tensor._result(out_data, (a,), backward)


# -- reductions & shape ---------------------------------------------------------


def _norm_axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(ax % ndim for ax in axis)


def tsum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _wrap(a)
    axes = _norm_axes(axis, a.ndim)
    out_data = a.data.sum(axis=axes, keepdims=keepdims)

    def backward(g):
        if a.requires_grad:
            gk = g
            if not keepdims:
                shape = list(a.shape)
                for ax in axes:
                    shape[ax] = 1
                gk = g.reshape(shape)
            a._accumulate(np.broadcast_to(gk, a.shape).copy())

    return Tensor._result(out_data, (a,), backward)


def tmean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _wrap(a)
    axes = _norm_axes(axis, a.ndim)
    count = 1
    for ax in axes:
        count *= a.shape[ax]
    return tsum(a, axis=axes, keepdims=keepdims) * (1.0 / count)


def reshape(a, shape) -> Tensor:
    a = _wrap(a)
    out_data = a.data.reshape(shape)

    def backward(g):
        if a.requires_grad:
            a._accumulate(g.reshape(a.shape))

    return Tensor._result(out_data, (a,), backward)


def transpose(a, axes) -> Tensor:
    a = _wrap(a)
    out_data = a.data.transpose(axes)
    inverse = tuple(np.argsort(axes))

    def backward(g):
        if a.requires_grad:
            a._accumulate(g.transpose(inverse))

    return Tensor._result(out_data, (a,), backward)


def repeat_lastdim(a, k: int) -> Tensor:
    """Repeat each entry of the last axis k times (group broadcast)."""
    a = _wrap(a)
    out_data = np.repeat(a.data, k, axis=-1)

    def backward(g):
        if a.requires_grad:
            a._accumulate(g.reshape(*a.shape, k).sum(axis=-1))

    return Tensor._result(out_data, (a,), backward)


# -- linear algebra -------------------------------------------------------------


def matmul(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul expects 2-d operands, got {a.shape} @ {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul inner extents disagree: {a.shape} @ {b.shape}")
    out_data = a.data @ b.data

    def backward(g):
        if a.requires_grad:
            a._accumulate(g @ b.data.T)
        if b.requires_grad:
            b._accumulate(a.data.T @ g)

    return Tensor._result(out_data, (a, b), backward)


def bmm(a, b) -> Tensor:
    """Batched matrix product over a shared leading axis."""
    a, b = _wrap(a), _wrap(b)
    if a.ndim != 3 or b.ndim != 3 or a.shape[0] != b.shape[0] or a.shape[2] != b.shape[1]:
        raise ShapeError(f"bmm shapes disagree: {a.shape} @ {b.shape}")
    out_data = a.data @ b.data

    def backward(g):
        if a.requires_grad:
            a._accumulate(g @ b.data.swapaxes(-1, -2))
        if b.requires_grad:
            b._accumulate(a.data.swapaxes(-1, -2) @ g)

    return Tensor._result(out_data, (a, b), backward)


# -- network-specific operations -------------------------------------------------


def softmax_lastdim(a) -> Tensor:
    """Numerically stabilized softmax over the last axis."""
    a = _wrap(a)
    z = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    out_data = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        if a.requires_grad:
            dot = (g * out_data).sum(axis=-1, keepdims=True)
            a._accumulate(out_data * (g - dot))

    return Tensor._result(out_data, (a,), backward)


def l2_normalize(a, axis: int) -> Tensor:
    """Scale slices along ``axis`` to unit Euclidean norm.

    Slices with norm below 1e-12 come back as zeros (and receive zero
    gradient), so degenerate inputs never divide by zero.
    """
    a = _wrap(a)
    axis = axis % a.ndim
    norm = np.sqrt((a.data * a.data).sum(axis=axis, keepdims=True))
    keep = norm >= L2_EPS
    safe = np.where(keep, norm, 1.0)
    out_data = np.where(keep, a.data / safe, 0.0)

    def backward(g):
        if a.requires_grad:
            dot = (g * out_data).sum(axis=axis, keepdims=True)
            ga = np.where(keep, (g - out_data * dot) / safe, 0.0)
            a._accumulate(ga)

    return Tensor._result(out_data, (a,), backward)


def conv2d(x, kernel, stride: int = 1, padding: int = 0) -> Tensor:
    """Per-frame 2-d cross-correlation, channels last.

    x: [T, h, w, Cin], kernel: [kh, kw, Cin, Cout]. The output extent
    (h + 2*padding - kh) / stride + 1 must be integral; shape-preserving
    mode is an odd kernel with padding (k-1)//2 and stride 1.
    """
    x, kernel = _wrap(x), _wrap(kernel)
    if x.ndim != 4 or kernel.ndim != 4:
        raise ShapeError(f"conv2d expects 4-d input/kernel, got {x.shape}, {kernel.shape}")
    t, h, w, cin = x.shape
    kh, kw, kcin, cout = kernel.shape
    if cin != kcin:
        raise ShapeError(f"conv2d channel mismatch: input {x.shape}, kernel {kernel.shape}")
    if (h + 2 * padding - kh) % stride or (w + 2 * padding - kw) % stride:
        raise ShapeError(
            f"conv2d output extent not integral for input {x.shape}, kernel {kernel.shape},"
            f" stride {stride}, padding {padding}"
        )
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (w + 2 * padding - kw) // stride + 1
    if ho <= 0 or wo <= 0:
        raise ShapeError(f"conv2d empty output for input {x.shape}, kernel {kernel.shape}")

    if padding:
        xp = np.pad(x.data, ((0, 0), (padding, padding), (padding, padding), (0, 0)))
    else:
        xp = x.data
    out_data = np.zeros((t, ho, wo, cout), dtype=x.data.dtype)
    flat = out_data.reshape(-1, cout)
    for a in range(kh):
        for b in range(kw):
            sl = xp[:, a : a + stride * ho : stride, b : b + stride * wo : stride, :]
            flat += np.ascontiguousarray(sl).reshape(-1, cin) @ kernel.data[a, b]

    def backward(g):
        gflat = g.reshape(-1, cout)
        if kernel.requires_grad:
            gk = np.zeros_like(kernel.data)
            for a in range(kh):
                for b in range(kw):
                    sl = xp[:, a : a + stride * ho : stride, b : b + stride * wo : stride, :]
                    gk[a, b] = np.ascontiguousarray(sl).reshape(-1, cin).T @ gflat
            kernel._accumulate(gk)
        if x.requires_grad:
            gxp = np.zeros_like(xp)
            for a in range(kh):
                for b in range(kw):
                    contrib = (gflat @ kernel.data[a, b].T).reshape(t, ho, wo, cin)
                    gxp[:, a : a + stride * ho : stride, b : b + stride * wo : stride, :] += contrib
            if padding:
                gxp = gxp[:, padding : padding + h, padding : padding + w, :]
            x._accumulate(gxp)

    return Tensor._result(out_data, (x, kernel), backward)


def _check_binary(mask: np.ndarray) -> None:
    if not np.all((mask == 0) | (mask == 1)):
        raise ContractError("mask entries must be 0 or 1")


def gather_rows(x, mask):
    """Select rows of x [N, C] where the binary mask [N] is 1.

    Returns (rows, index_map); the index map feeds the matching
    :func:`scatter_rows`. An all-zero mask yields an empty selection
    (rows with zero extent), which callers treat as "skip".
    Gradients flow to the selected rows of x; the mask is a constant.
    """
    x = _wrap(x)
    m = mask.data if isinstance(mask, Tensor) else np.asarray(mask)
    if x.ndim != 2 or m.shape != (x.shape[0],):
        raise ShapeError(f"gather_rows expects x [N,C] and mask [N], got {x.shape}, {m.shape}")
    _check_binary(m)
    idx = np.nonzero(m)[0]
    out_data = x.data[idx].copy()

    def backward(g):
        if x.requires_grad:
            gx = np.zeros_like(x.data)
            gx[idx] = g
            x._accumulate(gx)

    return Tensor._result(out_data, (x,), backward), idx


def scatter_rows(rows, index_map: np.ndarray, fill) -> Tensor:
    """Place rows back at index_map positions; other positions take fill."""
    rows, fill = _wrap(rows), _wrap(fill)
    idx = np.asarray(index_map)
    if rows.ndim != 2 or fill.ndim != 2 or rows.shape[1] != fill.shape[1]:
        raise ShapeError(f"scatter_rows shapes disagree: rows {rows.shape}, fill {fill.shape}")
    if rows.shape[0] != idx.size:
        raise ContractError(f"index map has {idx.size} entries for {rows.shape[0]} rows")
    if idx.size and (idx.min() < 0 or idx.max() >= fill.shape[0]):
        raise ContractError("scatter_rows index out of range")
    out_data = fill.data.copy()
    out_data[idx] = rows.data

    def backward(g):
        if rows.requires_grad:
            rows._accumulate(g[idx])
        if fill.requires_grad:
            gf = g.copy()
            gf[idx] = 0
            fill._accumulate(gf)

    return Tensor._result(out_data, (rows, fill), backward)


def upsample_nearest2x(x) -> Tensor:
    """Nearest-neighbor x2 upsampling of [T, h, w, C]."""
    x = _wrap(x)
    if x.ndim != 4:
        raise ShapeError(f"upsample_nearest2x expects 4-d input, got {x.shape}")
    out_data = np.repeat(np.repeat(x.data, 2, axis=1), 2, axis=2)

    def backward(g):
        if x.requires_grad:
            t, h, w, c = x.shape
            x._accumulate(g.reshape(t, h, 2, w, 2, c).sum(axis=(2, 4)))

    return Tensor._result(out_data, (x,), backward)


def _bilinear_axis(n_in: int, n_out: int):
    # Half-pixel-center sampling, clipped at the borders.
    src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
    src = np.clip(src, 0.0, n_in - 1.0)
    i0 = np.floor(src).astype(np.int64)
    i1 = np.minimum(i0 + 1, n_in - 1)
    frac = src - i0
    return i0, i1, frac


def resize_bilinear(x, out_h: int, out_w: int) -> Tensor:
    """Bilinear resize of [T, h, w, C] maps (half-pixel convention)."""
    x = _wrap(x)
    if x.ndim != 4:
        raise ShapeError(f"resize_bilinear expects 4-d input, got {x.shape}")
    t, h, w, c = x.shape
    y0, y1, fy = _bilinear_axis(h, out_h)
    x0, x1, fx = _bilinear_axis(w, out_w)
    wy = fy.reshape(1, -1, 1, 1)
    wx = fx.reshape(1, 1, -1, 1)
    d = x.data
    top = d[:, y0][:, :, x0] * (1 - wx) + d[:, y0][:, :, x1] * wx
    bot = d[:, y1][:, :, x0] * (1 - wx) + d[:, y1][:, :, x1] * wx
    out_data = (top * (1 - wy) + bot * wy).astype(d.dtype)

    def backward(g):
        if not x.requires_grad:
            return
        gx = np.zeros_like(x.data)
        ti = np.arange(t).reshape(-1, 1, 1)
        for yi, wyv in ((y0, (1 - fy)), (y1, fy)):
            for xi, wxv in ((x0, (1 - fx)), (x1, fx)):
                weight = (wyv.reshape(1, -1, 1, 1) * wxv.reshape(1, 1, -1, 1)).astype(g.dtype)
                np.add.at(gx, (ti, yi.reshape(1, -1, 1), xi.reshape(1, 1, -1)), g * weight)
        x._accumulate(gx)

    return Tensor._result(out_data, (x,), backward)
