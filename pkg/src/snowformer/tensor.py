"""Dense tensors with reverse-mode automatic differentiation on a tape.

Everything is backed by contiguous numpy arrays (f32 or f64). Ops record
nodes on the active ``Tape``; ``backward`` replays the tape in reverse.
Backward rules work on raw ndarrays and never re-record.
"""

from __future__ import annotations

import contextlib
import math

import numpy as np
from scipy.special import erf

from .errors import (
    BroadcastMismatch,
    CountMismatch,
    DetachedLoss,
    DTypeMismatch,
    InvalidStride,
    NonFiniteError,
    NotDivisible,
    NotScalar,
    ShapeMismatch,
)

DTYPES = {"f32": np.float32, "f64": np.float64}
_DTYPE_NAMES = {np.dtype(np.float32): "f32", np.dtype(np.float64): "f64"}

_finite_checks = True


def set_finite_checks(enabled: bool) -> bool:
    """Toggle post-op NaN/Inf checking. Returns the previous setting."""
    global _finite_checks
    prev = _finite_checks
    _finite_checks = bool(enabled)
    return prev


class MacCounter:
    """Accumulates multiply-accumulate counts from matmul/conv2d forwards."""

    def __init__(self):
        self.macs = 0


_mac_counter: MacCounter | None = None


@contextlib.contextmanager
def count_macs():
    global _mac_counter
    prev = _mac_counter
    counter = MacCounter()
    _mac_counter = counter
    try:
        yield counter
    finally:
        _mac_counter = prev


class Tensor:
    """A dense n-dimensional array with optional gradient tracking."""

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, dtype="f32", requires_grad=False):
        arr = np.asarray(data)
        if arr.dtype not in _DTYPE_NAMES or (dtype and arr.dtype != DTYPES[dtype]):
            arr = arr.astype(DTYPES[dtype or "f32"])
        self.data = np.ascontiguousarray(arr)
        self.requires_grad = requires_grad
        self.grad = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self) -> str:
        return _DTYPE_NAMES[self.data.dtype]

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def zero_grad(self):
        self.grad = np.zeros_like(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy(), dtype=self.dtype)

    def __repr__(self):
        return f"Tensor(shape={tuple(self.shape)}, dtype={self.dtype}, requires_grad={self.requires_grad})"

    # Operator sugar; scalars are promoted to untracked tensors.
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __sub__(self, other):
        return sub(self, other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


class _Node:
    __slots__ = ("out", "inputs", "backward_fn", "op")

    def __init__(self, out, inputs, backward_fn, op):
        self.out = out
        self.inputs = inputs
        self.backward_fn = backward_fn
        self.op = op


class Tape:
    """Ordered record of op nodes; inputs of a node always precede it."""

    def __init__(self):
        self.nodes = []
        self._creators = {}

    def record(self, node: _Node):
        self.nodes.append(node)
        self._creators[id(node.out)] = node

    def produced(self, t: Tensor) -> bool:
        return id(t) in self._creators

    def clear(self):
        self.nodes.clear()
        self._creators.clear()

    def __len__(self):
        return len(self.nodes)

    def __enter__(self):
        _tape_stack.append(self)
        return self

    def __exit__(self, *exc):
        _tape_stack.pop()
        return False


_tape_stack: list[Tape] = [Tape()]
_grad_enabled = True


def active_tape() -> Tape:
    return _tape_stack[-1]


@contextlib.contextmanager
def no_grad():
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def _check_finite(arr, op):
    if _finite_checks and not np.all(np.isfinite(arr)):
        raise NonFiniteError(f"{op} produced non-finite values")


def _as_tensor(x, like: Tensor) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=like.data.dtype), dtype=like.dtype)


def _tracked(*tensors) -> bool:
    if not _grad_enabled:
        return False
    tape = active_tape()
    return any(t.requires_grad or tape.produced(t) for t in tensors)


def _make(data, inputs, backward_fn, op) -> Tensor:
    _check_finite(data, op)
    out = Tensor.__new__(Tensor)
    out.data = data
    out.requires_grad = False
    out.grad = None
    if backward_fn is not None and _tracked(*inputs):
        active_tape().record(_Node(out, inputs, backward_fn, op))
    return out


def _same_dtype(a: Tensor, b: Tensor, op):
    if a.data.dtype != b.data.dtype:
        raise DTypeMismatch(f"{op}: {a.dtype} vs {b.dtype}")


def _unbroadcast(g, shape):
    """Sum `g` down to `shape` (undoes numpy broadcasting)."""
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (gs, ss) in enumerate(zip(g.shape, shape)) if ss == 1 and gs != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# ---------------------------------------------------------------------------
# elementwise / arithmetic
# ---------------------------------------------------------------------------

def add(a, b):
    a = a if isinstance(a, Tensor) else _as_tensor(a, b)
    b = _as_tensor(b, a)
    _same_dtype(a, b, "add")
    try:
        data = a.data + b.data
    except ValueError as e:
        raise BroadcastMismatch(f"add: {a.shape} vs {b.shape}") from e

    def bwd(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(data, (a, b), bwd, "add")


def sub(a, b):
    a = a if isinstance(a, Tensor) else _as_tensor(a, b)
    b = _as_tensor(b, a)
    _same_dtype(a, b, "sub")
    try:
        data = a.data - b.data
    except ValueError as e:
        raise BroadcastMismatch(f"sub: {a.shape} vs {b.shape}") from e

    def bwd(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _make(data, (a, b), bwd, "sub")


def mul(a, b):
    a = a if isinstance(a, Tensor) else _as_tensor(a, b)
    b = _as_tensor(b, a)
    _same_dtype(a, b, "mul")
    try:
        data = a.data * b.data
    except ValueError as e:
        raise BroadcastMismatch(f"mul: {a.shape} vs {b.shape}") from e

    def bwd(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _make(data, (a, b), bwd, "mul")


def scale(x: Tensor, s: float):
    s = float(s)
    return _make(x.data * s, (x,), lambda g: (g * s,), "scale")


def square(x: Tensor):
    return _make(x.data * x.data, (x,), lambda g: (2.0 * g * x.data,), "square")


def exp(x: Tensor):
    data = np.exp(x.data)
    return _make(data, (x,), lambda g: (g * data,), "exp")


def log(x: Tensor):
    data = np.log(x.data)
    return _make(data, (x,), lambda g: (g / x.data,), "log")


def sqrt(x: Tensor):
    data = np.sqrt(x.data)
    return _make(data, (x,), lambda g: (g * (0.5 / data),), "sqrt")


def abs_(x: Tensor):
    # subgradient 0 at exactly 0
    return _make(np.abs(x.data), (x,), lambda g: (g * np.sign(x.data),), "abs")


def sigmoid(x: Tensor):
    data = 1.0 / (1.0 + np.exp(-x.data))
    return _make(data, (x,), lambda g: (g * data * (1.0 - data),), "sigmoid")


_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT2PI = 1.0 / math.sqrt(2.0 * math.pi)


def gelu(x: Tensor):
    """Exact erf-based GELU: x * Phi(x)."""
    phi = 0.5 * (1.0 + erf(x.data * _INV_SQRT2))
    data = (x.data * phi).astype(x.data.dtype)

    def bwd(g):
        pdf = np.exp(-0.5 * x.data * x.data) * _INV_SQRT2PI
        return (g * (phi + x.data * pdf),)

    return _make(data, (x,), bwd, "gelu")


# ---------------------------------------------------------------------------
# reductions / shape ops
# ---------------------------------------------------------------------------

def sum_(x: Tensor, axis=None, keepdims=False):
    data = x.data.sum(axis=axis, keepdims=keepdims)
    if np.isscalar(data) or data.ndim == 0:
        data = np.asarray(data, dtype=x.data.dtype)

    def bwd(g):
        if axis is None:
            return (np.broadcast_to(g, x.shape).astype(x.data.dtype),)
        ax = axis if isinstance(axis, tuple) else (axis,)
        if not keepdims:
            g = np.expand_dims(g, ax)
        return (np.broadcast_to(g, x.shape).astype(x.data.dtype),)

    return _make(data, (x,), bwd, "sum")


def mean(x: Tensor, axis=None, keepdims=False):
    if axis is None:
        n = x.size
    else:
        ax = axis if isinstance(axis, tuple) else (axis,)
        n = int(np.prod([x.shape[a] for a in ax]))
    return scale(sum_(x, axis=axis, keepdims=keepdims), 1.0 / n)


def amax(x: Tensor, axis: int, keepdims=False):
    """Max along one axis; gradient flows to the first-occurrence argmax."""
    arg = np.argmax(x.data, axis=axis)
    data = np.take_along_axis(x.data, np.expand_dims(arg, axis), axis=axis)
    if not keepdims:
        data = np.squeeze(data, axis=axis)

    def bwd(g):
        if not keepdims:
            g = np.expand_dims(g, axis)
        gx = np.zeros_like(x.data)
        np.put_along_axis(gx, np.expand_dims(arg, axis), g, axis=axis)
        return (gx,)

    return _make(data, (x,), bwd, "amax")


def reshape(x: Tensor, shape):
    shape = tuple(shape)
    if int(np.prod(shape)) != x.size and -1 not in shape:
        raise ShapeMismatch(f"reshape: {x.shape} -> {shape}")
    return _make(
        np.ascontiguousarray(x.data.reshape(shape)),
        (x,),
        lambda g: (g.reshape(x.shape),),
        "reshape",
    )


def permute(x: Tensor, axes):
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _make(
        np.ascontiguousarray(x.data.transpose(axes)),
        (x,),
        lambda g: (np.ascontiguousarray(g.transpose(inv)),),
        "permute",
    )


def concat(tensors, axis=0):
    tensors = list(tensors)
    for t in tensors[1:]:
        _same_dtype(tensors[0], t, "concat")
    data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def bwd(g):
        return tuple(np.ascontiguousarray(p) for p in np.split(g, splits, axis=axis))

    return _make(data, tuple(tensors), bwd, "concat")


def slice_(x: Tensor, axis: int, start: int, stop: int):
    idx = [slice(None)] * x.data.ndim
    idx[axis] = slice(start, stop)
    idx = tuple(idx)

    def bwd(g):
        gx = np.zeros_like(x.data)
        gx[idx] = g
        return (gx,)

    return _make(np.ascontiguousarray(x.data[idx]), (x,), bwd, "slice")


# ---------------------------------------------------------------------------
# matmul / linear
# ---------------------------------------------------------------------------

def matmul(a: Tensor, b: Tensor):
    _same_dtype(a, b, "matmul")
    if a.data.ndim < 2 or b.data.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeMismatch(f"matmul: {a.shape} @ {b.shape}")
    try:
        data = np.matmul(a.data, b.data)
    except ValueError as e:
        raise ShapeMismatch(f"matmul: {a.shape} @ {b.shape}") from e
    if _mac_counter is not None:
        _mac_counter.macs += data.size // data.shape[-1] * a.shape[-1] * b.shape[-1]

    def bwd(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _make(data, (a, b), bwd, "matmul")


def linear(x: Tensor, w: Tensor, b: Tensor | None = None):
    """x[..., in] @ w[in, out] (+ b[out])."""
    y = matmul(x, w)
    if b is not None:
        y = add(y, b)
    return y


# ---------------------------------------------------------------------------
# normalization / attention pieces
# ---------------------------------------------------------------------------

def softmax(x: Tensor, axis: int):
    if not -x.data.ndim <= axis < x.data.ndim:
        raise ShapeMismatch(f"softmax: axis {axis} out of range for {x.shape}")
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    data = e / e.sum(axis=axis, keepdims=True)

    def bwd(g):
        dot = (g * data).sum(axis=axis, keepdims=True)
        return ((g - dot) * data,)

    return _make(data, (x,), bwd, "softmax")


def layernorm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5):
    c = x.shape[-1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeMismatch(f"layernorm: last axis {c}, gamma {gamma.shape}, beta {beta.shape}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    data = xhat * gamma.data + beta.data

    def bwd(g):
        dg = (g * xhat).reshape(-1, c).sum(axis=0)
        db = g.reshape(-1, c).sum(axis=0)
        dxhat = g * gamma.data
        dx = (dxhat - dxhat.mean(axis=-1, keepdims=True)
              - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)) * inv
        return dx, dg.astype(gamma.data.dtype), db.astype(beta.data.dtype)

    return _make(data, (x, gamma, beta), bwd, "layernorm")


# ---------------------------------------------------------------------------
# convolution / pooling
# ---------------------------------------------------------------------------

def conv2d(x: Tensor, w: Tensor, bias: Tensor | None = None, stride: int = 1, pad: int = 0):
    """Cross-correlation with zero padding. x: [N,C,H,W], w: [O,C,kh,kw]."""
    if stride < 1:
        raise InvalidStride(f"conv2d: stride {stride}")
    _same_dtype(x, w, "conv2d")
    if x.data.ndim != 4 or w.data.ndim != 4 or x.shape[1] != w.shape[1]:
        raise ShapeMismatch(f"conv2d: x {x.shape}, w {w.shape}")
    n, c, h, wd = x.shape
    o, _, kh, kw = w.shape
    if h + 2 * pad < kh or wd + 2 * pad < kw:
        raise ShapeMismatch(f"conv2d: kernel {kh}x{kw} exceeds padded input")
    ho = (h + 2 * pad - kh) // stride + 1
    wo = (wd + 2 * pad - kw) // stride + 1

    xp = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x.data
    v = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))
    v = v[:, :, ::stride, ::stride]  # [N,C,Ho,Wo,kh,kw]
    cols = np.ascontiguousarray(v.transpose(0, 2, 3, 1, 4, 5)).reshape(n, ho * wo, c * kh * kw)
    wm = w.data.reshape(o, c * kh * kw)
    out = np.matmul(cols, wm.T)  # [N, Ho*Wo, O]
    if bias is not None:
        _same_dtype(x, bias, "conv2d")
        if bias.shape != (o,):
            raise ShapeMismatch(f"conv2d: bias {bias.shape}, expected ({o},)")
        out += bias.data
    out = np.ascontiguousarray(out.transpose(0, 2, 1)).reshape(n, o, ho, wo)
    if _mac_counter is not None:
        _mac_counter.macs += n * ho * wo * o * c * kh * kw

    def bwd(g):
        g2 = np.ascontiguousarray(g.reshape(n, o, ho * wo).transpose(0, 2, 1))  # [N,P,O]
        gw = np.matmul(g2.reshape(-1, o).T, cols.reshape(-1, c * kh * kw)).reshape(w.shape)
        gcols = np.matmul(g2, wm)  # [N,P,C*kh*kw]
        gv = gcols.reshape(n, ho, wo, c, kh, kw).transpose(0, 3, 1, 2, 4, 5)
        gxp = np.zeros_like(xp)
        for i in range(kh):
            for j in range(kw):
                gxp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += gv[..., i, j]
        gx = gxp[:, :, pad:pad + h, pad:pad + wd] if pad else gxp
        if bias is not None:
            return gx, gw, g.sum(axis=(0, 2, 3))
        return gx, gw

    inputs = (x, w) if bias is None else (x, w, bias)
    return _make(out, inputs, bwd, "conv2d")


def _pool_view(x: Tensor, k: int, stride: int, op: str):
    n, c, h, w = x.shape
    if h < k or w < k:
        raise ShapeMismatch(f"{op}: window {k} exceeds input {h}x{w}")
    ho = (h - k) // stride + 1
    wo = (w - k) // stride + 1
    v = np.lib.stride_tricks.sliding_window_view(x.data, (k, k), axis=(2, 3))
    return v[:, :, ::stride, ::stride], n, c, ho, wo


def maxpool2d(x: Tensor, k: int, stride: int):
    if stride < 1:
        raise InvalidStride(f"maxpool2d: stride {stride}")
    v, n, c, ho, wo = _pool_view(x, k, stride, "maxpool2d")
    flat = v.reshape(n, c, ho, wo, k * k)
    arg = np.argmax(flat, axis=-1)  # first occurrence on ties
    data = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]

    def bwd(g):
        gx = np.zeros_like(x.data)
        iy = (np.arange(ho) * stride)[None, None, :, None] + (arg // k)
        ix = (np.arange(wo) * stride)[None, None, None, :] + (arg % k)
        nn = np.arange(n)[:, None, None, None]
        cc = np.arange(c)[None, :, None, None]
        np.add.at(gx, (nn, cc, iy, ix), g)
        return (gx,)

    return _make(np.ascontiguousarray(data), (x,), bwd, "maxpool2d")


def avgpool2d(x: Tensor, k: int, stride: int):
    if stride < 1:
        raise InvalidStride(f"avgpool2d: stride {stride}")
    v, n, c, ho, wo = _pool_view(x, k, stride, "avgpool2d")
    data = v.mean(axis=(-1, -2))
    inv = 1.0 / (k * k)

    def bwd(g):
        gx = np.zeros_like(x.data)
        gk = g * inv
        for i in range(k):
            for j in range(k):
                gx[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += gk
        return (gx,)

    return _make(np.ascontiguousarray(data.astype(x.data.dtype)), (x,), bwd, "avgpool2d")


def global_avgpool(x: Tensor):
    """[N,C,H,W] -> [N,C,1,1]."""
    return mean(x, axis=(2, 3), keepdims=True)


def upsample_nearest2x(x: Tensor):
    n, c, h, w = x.shape
    data = np.repeat(np.repeat(x.data, 2, axis=2), 2, axis=3)

    def bwd(g):
        return (g.reshape(n, c, h, 2, w, 2).sum(axis=(3, 5)),)

    return _make(data, (x,), bwd, "upsample_nearest2x")


# ---------------------------------------------------------------------------
# windowing
# ---------------------------------------------------------------------------

def window_partition(x: Tensor, s: int):
    """[N,C,H,W] -> [N*(H/s)*(W/s), s*s, C], raster order within and across windows."""
    n, c, h, w = x.shape
    if h % s or w % s:
        raise NotDivisible(f"window_partition: {h}x{w} not divisible by {s}")
    nh, nw = h // s, w // s
    data = np.ascontiguousarray(
        x.data.reshape(n, c, nh, s, nw, s).transpose(0, 2, 4, 3, 5, 1)
    ).reshape(n * nh * nw, s * s, c)

    def bwd(g):
        gx = g.reshape(n, nh, nw, s, s, c).transpose(0, 5, 1, 3, 2, 4)
        return (np.ascontiguousarray(gx).reshape(n, c, h, w),)

    return _make(data, (x,), bwd, "window_partition")


def window_merge(tokens: Tensor, s: int, n: int, c: int, h: int, w: int):
    """Inverse of window_partition."""
    if h % s or w % s:
        raise NotDivisible(f"window_merge: {h}x{w} not divisible by {s}")
    nh, nw = h // s, w // s
    if tokens.shape != (n * nh * nw, s * s, c):
        raise CountMismatch(
            f"window_merge: got {tokens.shape}, expected ({n * nh * nw}, {s * s}, {c})"
        )
    data = np.ascontiguousarray(
        tokens.data.reshape(n, nh, nw, s, s, c).transpose(0, 5, 1, 3, 2, 4)
    ).reshape(n, c, h, w)

    def bwd(g):
        gt = g.reshape(n, c, nh, s, nw, s).transpose(0, 2, 4, 3, 5, 1)
        return (np.ascontiguousarray(gt).reshape(n * nh * nw, s * s, c),)

    return _make(data, (tokens,), bwd, "window_merge")


def gather_rows(table: Tensor, index: np.ndarray):
    """out[i...] = table[index[i...]]; scatter-add backward."""
    data = table.data[index]

    def bwd(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, index, g)
        return (gt,)

    return _make(np.ascontiguousarray(data), (table,), bwd, "gather_rows")


# ---------------------------------------------------------------------------
# relative position bias
# ---------------------------------------------------------------------------

def build_relpos_index(window_side: int) -> np.ndarray:
    """Index map [s*s, s*s] of relative-offset table rows for an s x s window."""
    s = window_side
    coords = np.stack(np.meshgrid(np.arange(s), np.arange(s), indexing="ij"), axis=-1)
    coords = coords.reshape(-1, 2)  # token k at (k // s, k % s)
    rel = coords[:, None, :] - coords[None, :, :] + (s - 1)  # in [0, 2s-2]
    return (rel[..., 0] * (2 * s - 1) + rel[..., 1]).astype(np.int64)


class RelPosBias:
    """Learnable additive attention bias indexed by 2-D token offset."""

    def __init__(self, window_side: int, num_heads: int, dtype="f32"):
        self.window_side = window_side
        self.num_heads = num_heads
        self.index_map = build_relpos_index(window_side)
        # zero-init so an untrained attention starts unbiased
        self.table = Tensor(
            np.zeros(((2 * window_side - 1) ** 2, num_heads)),
            dtype=dtype,
            requires_grad=True,
        )

    def bias(self) -> Tensor:
        """[num_heads, s*s, s*s] additive bias."""
        b = gather_rows(self.table, self.index_map)  # [T,T,heads]
        return permute(b, (2, 0, 1))


# ---------------------------------------------------------------------------
# backward driver
# ---------------------------------------------------------------------------

def backward(loss: Tensor, tape: Tape | None = None, leaves=None):
    """Reverse the tape from `loss`, accumulating grads on requires_grad leaves.

    Leaves listed in `leaves` that are unreachable from the loss get an
    all-zero grad.
    """
    tape = tape or active_tape()
    if loss.data.size != 1:
        raise NotScalar(f"backward: loss has shape {loss.shape}")
    last = None
    for i in range(len(tape.nodes) - 1, -1, -1):
        if tape.nodes[i].out is loss:
            last = i
            break
    if last is None:
        raise DetachedLoss("backward: loss was not produced on this tape")

    grads = {id(loss): np.ones_like(loss.data)}
    for node in reversed(tape.nodes[: last + 1]):
        g = grads.pop(id(node.out), None)
        if g is None:
            continue
        input_grads = node.backward_fn(g)
        for t, ig in zip(node.inputs, input_grads):
            if ig is None:
                continue
            if t.requires_grad and not tape.produced(t):
                t.grad = ig if t.grad is None else t.grad + ig
            elif tape.produced(t):
                prev = grads.get(id(t))
                grads[id(t)] = ig if prev is None else prev + ig
    if leaves is not None:
        for t in leaves:
            if t.requires_grad and t.grad is None:
                t.grad = np.zeros_like(t.data)
