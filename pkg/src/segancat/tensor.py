"""Dense tensors with tape-based reverse-mode differentiation.

Images are channel-last. Batched image tensors are ``N x H x W x C``; the
image ops also accept a single ``H x W x C`` image. Training runs in float32,
gradient checks in float64; every op keeps the dtype of its inputs.
"""

from __future__ import annotations

import threading
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import as_strided

from .errors import ShapeError

_tls = threading.local()


def is_grad_enabled() -> bool:
    return getattr(_tls, "enabled", True)


@contextmanager
def no_grad():
    """Disable graph recording on the current thread."""
    prev = is_grad_enabled()
    _tls.enabled = False
    try:
        yield
    finally:
        _tls.enabled = prev


class Tensor:
    """An ndarray plus the bookkeeping needed for backpropagation."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op")
    __array_priority__ = 1000

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float32)
        if arr.size == 0:
            raise ShapeError(f"non-positive extent in shape {arr.shape}")
        self.data = arr
        self.grad = None
        self.requires_grad = requires_grad
        self._parents: tuple = ()
        self._backward = None
        self.op = ""

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, op={self.op or 'leaf'})"

    def backward(self, grad=None):
        """Accumulate d(self)/d(leaf) into ``leaf.grad`` for every leaf that requires it."""
        if grad is None:
            if self.data.size != 1:
                raise ShapeError("backward() without a seed gradient needs a scalar tensor")
            grad = np.ones_like(self.data)
        grad = np.asarray(grad, dtype=self.dtype)
        if grad.shape != self.shape:
            raise ShapeError(f"seed gradient shape {grad.shape} != tensor shape {self.shape}")
        pending = {id(self): grad}
        for node in reversed(_toposort(self)):
            g = pending.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                if node.requires_grad:
                    node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                pending[key] = pending[key] + pg if key in pending else pg

    # arithmetic -----------------------------------------------------------
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
        return mul(self, -1.0)

    def __pow__(self, exponent):
        return power(self, exponent)

    def abs(self):
        return absolute(self)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def _toposort(root: Tensor) -> list:
    """Post-order over the graph reachable from ``root`` (parents first)."""
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
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def _record(data: np.ndarray, parents: Sequence[Tensor], backward: Callable, op: str) -> Tensor:
    out = Tensor(data)
    if is_grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
        out.op = op
    return out


def _lift(value, like: Tensor | None = None) -> Tensor:
    if isinstance(value, Tensor):
        return value
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(value, dtype=dtype))


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# elementwise arithmetic -----------------------------------------------------

def add(a, b) -> Tensor:
    a = _lift(a, b if isinstance(b, Tensor) else None)
    b = _lift(b, a)

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _record(a.data + b.data, (a, b), backward, "add")


def sub(a, b) -> Tensor:
    a = _lift(a, b if isinstance(b, Tensor) else None)
    b = _lift(b, a)

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _record(a.data - b.data, (a, b), backward, "sub")


def mul(a, b) -> Tensor:
    a = _lift(a, b if isinstance(b, Tensor) else None)
    b = _lift(b, a)

    def backward(g):
        ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _record(a.data * b.data, (a, b), backward, "mul")


def div(a, b) -> Tensor:
    a = _lift(a, b if isinstance(b, Tensor) else None)
    b = _lift(b, a)
    out = a.data / b.data

    def backward(g):
        ga = _unbroadcast(g / b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(-g * out / b.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _record(out, (a, b), backward, "div")


def power(a: Tensor, exponent: float) -> Tensor:
    exponent = float(exponent)

    def backward(g):
        return (g * exponent * a.data ** (exponent - 1),)

    return _record(a.data ** exponent, (a,), backward, "pow")


def absolute(a: Tensor) -> Tensor:
    def backward(g):
        return (g * np.sign(a.data),)

    return _record(np.abs(a.data), (a,), backward, "abs")


def tsum(a: Tensor, axis=None, keepdims=False) -> Tensor:
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _record(np.asarray(out, dtype=a.dtype), (a,), backward, "sum")


def tmean(a: Tensor, axis=None, keepdims=False) -> Tensor:
    out = a.data.mean(axis=axis, keepdims=keepdims)
    count = a.data.size // max(np.asarray(out).size, 1)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / count, a.shape).astype(a.dtype),)

    return _record(np.asarray(out, dtype=a.dtype), (a,), backward, "mean")


def reshape(a: Tensor, shape) -> Tensor:
    def backward(g):
        return (g.reshape(a.shape),)

    return _record(a.data.reshape(shape), (a,), backward, "reshape")


# activations ----------------------------------------------------------------

LEAKY_SLOPE = 0.3


def leaky_relu(x: Tensor, slope: float = LEAKY_SLOPE) -> Tensor:
    pos = x.data > 0
    out = np.where(pos, x.data, x.data * x.dtype.type(slope))

    def backward(g):
        # derivative at exactly 0 is the negative-branch slope
        return (np.where(pos, g, g * x.dtype.type(slope)),)

    return _record(out, (x,), backward, "leaky_relu")


def relu(x: Tensor) -> Tensor:
    pos = x.data > 0
    out = np.where(pos, x.data, x.dtype.type(0))

    def backward(g):
        return (np.where(pos, g, x.dtype.type(0)),)

    return _record(out, (x,), backward, "relu")


def sigmoid(x: Tensor) -> Tensor:
    """Logistic function, clamped to the open interval (0, 1) of the dtype."""
    d = x.data
    z = np.exp(-np.abs(d))
    out = np.where(d >= 0, 1.0 / (1.0 + z), z / (1.0 + z)).astype(x.dtype, copy=False)
    np.clip(out, np.finfo(x.dtype).tiny, np.nextafter(x.dtype.type(1), x.dtype.type(0)), out=out)

    def backward(g):
        return (g * out * (1 - out),)

    return _record(out, (x,), backward, "sigmoid")


_ACTIVATIONS = {"leaky_relu": leaky_relu, "relu": relu, "sigmoid": sigmoid}


def activation(x: Tensor, kind: str) -> Tensor:
    try:
        fn = _ACTIVATIONS[kind]
    except KeyError:
        raise ValueError(f"unknown activation {kind!r}") from None
    return fn(x)


# channel ops ----------------------------------------------------------------

def concat_channels(xs: Sequence[Tensor]) -> Tensor:
    """Concatenate along the last (channel) axis, preserving input order."""
    xs = list(xs)
    if not xs:
        raise ShapeError("concat_channels needs at least one tensor")
    if len(xs) == 1:
        return xs[0]
    lead = xs[0].shape[:-1]
    for t in xs[1:]:
        if t.shape[:-1] != lead:
            raise ShapeError(f"spatial mismatch in concat: {t.shape[:-1]} vs {lead}")
    bounds = np.cumsum([0] + [t.shape[-1] for t in xs])

    def backward(g):
        return tuple(g[..., bounds[i]:bounds[i + 1]] for i in range(len(xs)))

    return _record(np.concatenate([t.data for t in xs], axis=-1), xs, backward, "concat")


def elementwise_mul(a: Tensor, b: Tensor) -> Tensor:
    """Product of ``a`` with ``b``; ``b`` may have a single channel broadcast over ``a``'s."""
    if b.shape[:-1] != a.shape[:-1] or b.shape[-1] not in (1, a.shape[-1]):
        raise ShapeError(f"cannot broadcast {b.shape} over {a.shape}")
    return mul(a, b)


# convolution ----------------------------------------------------------------
#
# Everything reduces to a stride-1 "valid" correlation done as im2col + GEMM.
# Stride-s convolutions whose kernel is a multiple of s are rewritten as a
# stride-1 correlation on the space-to-depth rearranged input; input gradients
# are a correlation of the zero-padded output gradient with the flipped kernel.

def _same_padding(n: int, k: int, s: int):
    out = -(-n // s)
    total = max((out - 1) * s + k - n, 0)
    return out, total // 2, total - total // 2


def _conv_geometry(h, w, kh, kw, stride, padding):
    if padding == "same":
        ho, pt, pb = _same_padding(h, kh, stride)
        wo, pl, pr = _same_padding(w, kw, stride)
    elif padding == "valid":
        if h < kh or w < kw:
            raise ShapeError(f"input {h}x{w} smaller than kernel {kh}x{kw}")
        ho, wo = (h - kh) // stride + 1, (w - kw) // stride + 1
        pt = pb = pl = pr = 0
    else:
        raise ValueError(f"unknown padding {padding!r}")
    return ho, wo, (pt, pb, pl, pr)


def _zero_pad(a: np.ndarray, top: int, bottom: int, left: int, right: int) -> np.ndarray:
    """Zero padding of the two spatial axes of an NHWC array (np.pad is slow on tiny inputs)."""
    n, h, w, c = a.shape
    out = np.zeros((n, h + top + bottom, w + left + right, c), a.dtype)
    out[:, top:top + h, left:left + w] = a
    return out


def _im2col(xp, kh, kw, ho, wo, stride=1):
    # one copy per kernel row: the kw*C values of a window row are contiguous
    xp = np.ascontiguousarray(xp)
    n, _, _, c = xp.shape
    sn, sh, sw, sc = xp.strides
    cols = np.empty((n, ho, wo, kh, kw * c), dtype=xp.dtype)
    for i in range(kh):
        cols[:, :, :, i, :] = as_strided(xp[:, i:], shape=(n, ho, wo, kw * c),
                                         strides=(sn, stride * sh, stride * sw, sc))
    return cols.reshape(n * ho * wo, kh * kw * c)


def _corr_fwd(xp, wd):
    """Stride-1 valid correlation of contiguous NHWC ``xp`` with ``wd``."""
    kh, kw, c, k = wd.shape
    n, h, w, _ = xp.shape
    ho, wo = h - kh + 1, w - kw + 1
    cols = _im2col(xp, kh, kw, ho, wo)
    return (cols @ wd.reshape(-1, k)).reshape(n, ho, wo, k), cols


def _corr_grad_input(g, wd):
    """Gradient of :func:`_corr_fwd` with respect to its input."""
    kh, kw, c, k = wd.shape
    n, ho, wo, _ = g.shape
    gp = _zero_pad(g, kh - 1, kh - 1, kw - 1, kw - 1)
    wf = np.ascontiguousarray(wd[::-1, ::-1].transpose(0, 1, 3, 2)).reshape(kh * kw * k, c)
    h, w = ho + kh - 1, wo + kw - 1
    return (_im2col(gp, kh, kw, h, w) @ wf).reshape(n, h, w, c)


def _s2d(a, s):
    n, h, w, c = a.shape
    return np.ascontiguousarray(
        a.reshape(n, h // s, s, w // s, s, c).transpose(0, 1, 3, 2, 4, 5)).reshape(n, h // s, w // s, s * s * c)


def _d2s(a, s, c):
    n, hs, ws, _ = a.shape
    return a.reshape(n, hs, ws, s, s, c).transpose(0, 1, 3, 2, 4, 5).reshape(n, hs * s, ws * s, c)


def _conv_fwd(xd, wd, bd, stride, padding):
    """NHWC forward; returns the output and what the backward pass needs."""
    n, h, wdt, c = xd.shape
    kh, kw, cin, k = wd.shape
    ho, wo, (pt, pb, pl, pr) = _conv_geometry(h, wdt, kh, kw, stride, padding)
    xp = _zero_pad(xd, pt, pb, pl, pr) if (pt or pb or pl or pr) else xd
    xp = np.ascontiguousarray(xp[:, :stride * (ho - 1) + kh, :stride * (wo - 1) + kw])
    s = stride
    if s == 1:
        wk = wd
    elif kh % s == 0 and kw % s == 0:
        xp_in = xp
        xp = _s2d(xp, s)
        wk = np.ascontiguousarray(
            wd.reshape(kh // s, s, kw // s, s, cin, k).transpose(0, 2, 1, 3, 4, 5)).reshape(kh // s, kw // s, s * s * cin, k)
    else:
        # generic strided path: dilate nothing, just gather strided windows
        cols = _im2col(xp, kh, kw, ho, wo, stride=s)
        out = cols @ wd.reshape(-1, k)
        if bd is not None:
            out += bd
        cache = ("strided", cols, xp.shape, (pt, pl, h, wdt), (kh, kw, s, ho, wo), wd)
        return out.reshape(n, ho, wo, k), cache
    out, cols = _corr_fwd(xp, wk)
    if bd is not None:
        out += bd
    cache = ("corr", cols, wk, (n, h, wdt, c), (pt, pl), s,
             None if s == 1 else xp_in.shape, (kh, kw, cin, k))
    return out, cache


def _conv_bwd(g, cache, need_x=True, need_w=True, need_b=True):
    g = np.ascontiguousarray(g)
    k = g.shape[-1]
    g2 = g.reshape(-1, k)
    gb = g2.sum(axis=0) if need_b else None
    if cache[0] == "strided":
        _, cols, xp_shape, (pt, pl, h, wdt), (kh, kw, s, ho, wo), wd = cache
        gw = (cols.T @ g2).reshape(wd.shape) if need_w else None
        gx = None
        if need_x:
            dcols = (g2 @ wd.reshape(-1, k).T).reshape(g.shape[0], ho, wo, kh, kw, -1)
            gxp = np.zeros(xp_shape, dtype=g.dtype)
            hs, ws = s * (ho - 1) + 1, s * (wo - 1) + 1
            for i in range(kh):
                for j in range(kw):
                    gxp[:, i:i + hs:s, j:j + ws:s, :] += dcols[:, :, :, i, j, :]
            gx = _crop_grad(gxp, (g.shape[0], h, wdt, xp_shape[3]), pt, pl)
        return gx, gw, gb
    _, cols, wk, xshape, (pt, pl), s, xp_in_shape, (kh, kw, cin, _) = cache
    gw = gx = None
    if need_w:
        gw = (cols.T @ g2).reshape(wk.shape)
        if s > 1:
            gw = gw.reshape(kh // s, kw // s, s, s, cin, k).transpose(0, 2, 1, 3, 4, 5).reshape(kh, kw, cin, k)
    if need_x:
        gxp = _corr_grad_input(g, wk)
        if s > 1:
            gxp = _d2s(gxp, s, cin)
        gx = _crop_grad(gxp, xshape, pt, pl)
    return gx, gw, gb


def _crop_grad(gxp, xshape, pt, pl):
    """Gradient of the (padded, possibly truncated) input back on the unpadded input."""
    n, h, w, c = xshape
    gx = np.zeros(xshape, dtype=gxp.dtype)
    hh = min(h, gxp.shape[1] - pt)
    ww = min(w, gxp.shape[2] - pl)
    gx[:, :hh, :ww] = gxp[:, pt:pt + hh, pl:pl + ww]
    return gx


def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None, stride: int = 1, padding: str = "same") -> Tensor:
    """2D cross-correlation.

    ``x`` is ``[N x] H x W x Cin``, ``w`` is ``kh x kw x Cin x k``. ``same``
    padding gives ``ceil(H/stride)`` rows; odd padding goes to the bottom/right.
    """
    if stride < 1:
        raise ShapeError(f"stride must be >= 1, got {stride}")
    single = x.ndim == 3
    xd = x.data[None] if single else x.data
    if xd.ndim != 4 or w.ndim != 4:
        raise ShapeError(f"conv2d expects NHWC input and 4-D filters, got {x.shape}, {w.shape}")
    if w.shape[2] != xd.shape[3]:
        raise ShapeError(f"input has {xd.shape[3]} channels, filters expect {w.shape[2]}")
    if b is not None and b.shape != (w.shape[3],):
        raise ShapeError(f"bias shape {b.shape} != ({w.shape[3]},)")
    out, cache = _conv_fwd(xd, w.data, None if b is None else b.data, stride, padding)

    def backward(g):
        g4 = g[None] if single else g
        gx, gw, gb = _conv_bwd(g4, cache, x.requires_grad, w.requires_grad,
                               b is not None and b.requires_grad)
        if gx is not None and single:
            gx = gx[0]
        return (gx, gw) if b is None else (gx, gw, gb)

    parents = (x, w) if b is None else (x, w, b)
    return _record(out[0] if single else out, parents, backward, "conv2d")


# bilinear upsampling ----------------------------------------------------------

def _up_axis(a: np.ndarray, axis: int) -> np.ndarray:
    # align_corners=False: output 2j samples x[j-1/4], output 2j+1 samples x[j+1/4]
    n = a.shape[axis]

    def at(i):
        idx = [slice(None)] * a.ndim
        idx[axis] = i
        return tuple(idx)

    lo = np.concatenate([a[at(slice(0, 1))], a[at(slice(0, n - 1))]], axis=axis)
    hi = np.concatenate([a[at(slice(1, n))], a[at(slice(n - 1, n))]], axis=axis)
    shape = list(a.shape)
    shape[axis] *= 2
    out = np.empty(shape, a.dtype)
    out[at(slice(0, None, 2))] = 0.75 * a + 0.25 * lo
    out[at(slice(1, None, 2))] = 0.75 * a + 0.25 * hi
    return out


def _up_axis_grad(g: np.ndarray, axis: int) -> np.ndarray:
    shape = list(g.shape)
    n = shape[axis] // 2
    shape[axis:axis + 1] = [n, 2]
    g = g.reshape(shape)
    ge = np.take(g, 0, axis=axis + 1)
    go = np.take(g, 1, axis=axis + 1)
    dx = 0.75 * (ge + go)
    idx = [slice(None)] * dx.ndim

    def sl(s):
        idx[axis] = s
        return tuple(idx)

    # even output j+1 reads x[j] as its left neighbour; odd output j-1 reads x[j] on the right
    dx[sl(slice(0, n - 1))] += 0.25 * ge[sl(slice(1, n))]
    dx[sl(slice(0, 1))] += 0.25 * ge[sl(slice(0, 1))]
    dx[sl(slice(1, n))] += 0.25 * go[sl(slice(0, n - 1))]
    dx[sl(slice(n - 1, n))] += 0.25 * go[sl(slice(n - 1, n))]
    return dx.astype(g.dtype, copy=False)


def upsample_bilinear2x(x: Tensor) -> Tensor:
    """2x bilinear upsampling of ``[N x] H x W x C`` with half-pixel centres."""
    if x.ndim not in (3, 4):
        raise ShapeError(f"upsample expects HWC or NHWC, got {x.shape}")
    ax = x.ndim - 3
    out = _up_axis(_up_axis(x.data, ax), ax + 1)

    def backward(g):
        return (_up_axis_grad(_up_axis_grad(g, ax + 1), ax),)

    return _record(out, (x,), backward, "upsample2x")


# fused 2x upsample + 3x3 convolution -------------------------------------------------
#
# conv3x3(upsample(x)) evaluated at input resolution: output pixel (2j+r, 2m+q)
# is a 3x3 correlation of the edge-replicated input with a phase kernel
# W_rq = M_r w M_q^T. Replication reproduces the upsampler's edge clamp but not
# the conv's zero padding, so the outermost output rows/cols are recomputed
# exactly from two-pixel strips.

# _PHASE[r][d + 1, a]: weight of input offset d under conv tap a for output phase r
_PHASE = np.array([
    [[0.75, 0.25, 0.0], [0.25, 0.75, 0.75], [0.0, 0.0, 0.25]],
    [[0.25, 0.0, 0.0], [0.75, 0.75, 0.25], [0.0, 0.25, 0.75]],
])


def _up2(a):
    return _up_axis(_up_axis(a, 1), 2)


def _up2_grad(g):
    return _up_axis_grad(_up_axis_grad(g, 2), 1)


def _strip_parts(xd):
    """Per border: input slice, U -> Z builder, grad Z -> grad U, output slice.

    Each strip upsamples two input rows (or cols) to four; Z keeps the two
    that border the zero padding.
    """
    n, h, w, c = xd.shape

    def zeros_like_rows(u):
        return np.zeros((n, 1) + u.shape[2:], dtype=u.dtype)

    def zeros_like_cols(u):
        return np.zeros(u.shape[:2] + (1, c), dtype=u.dtype)

    def wpad(z):
        return _zero_pad(z, 0, 0, 1, 1)

    def scatter(gpart, shape, axis, lo):
        gu = np.zeros(shape, dtype=gpart.dtype)
        idx = [slice(None)] * 4
        idx[axis] = slice(lo, lo + 2)
        gu[tuple(idx)] = gpart
        return gu

    rows_u = (n, 4, 2 * w, c)
    cols_u = (n, 2 * h, 4, c)
    return [
        ((slice(None), slice(0, 2)),
         lambda u: wpad(np.concatenate([zeros_like_rows(u), u[:, 0:2]], 1)),
         lambda gz: scatter(gz[:, 1:3, 1:-1], rows_u, 1, 0),
         (slice(None), slice(0, 1))),
        ((slice(None), slice(h - 2, h)),
         lambda u: wpad(np.concatenate([u[:, 2:4], zeros_like_rows(u)], 1)),
         lambda gz: scatter(gz[:, 0:2, 1:-1], rows_u, 1, 2),
         (slice(None), slice(2 * h - 1, 2 * h))),
        ((slice(None), slice(None), slice(0, 2)),
         lambda u: np.concatenate([zeros_like_cols(u), u[:, :, 0:2]], 2),
         lambda gz: scatter(gz[:, :, 1:3], cols_u, 2, 0),
         (slice(None), slice(1, 2 * h - 1), slice(0, 1))),
        ((slice(None), slice(None), slice(w - 2, w)),
         lambda u: np.concatenate([u[:, :, 2:4], zeros_like_cols(u)], 2),
         lambda gz: scatter(gz[:, :, 0:2], cols_u, 2, 2),
         (slice(None), slice(1, 2 * h - 1), slice(2 * w - 1, 2 * w))),
    ]


def upsample_conv3x3(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """``conv2d(upsample_bilinear2x(x), w, b, stride=1, padding='same')`` for 3x3 filters."""
    if x.ndim != 4 or w.shape[:2] != (3, 3):
        raise ShapeError(f"upsample_conv3x3 expects NHWC input and 3x3 filters, got {x.shape}, {w.shape}")
    n, h, wd, c = x.shape
    if w.shape[2] != c:
        raise ShapeError(f"input has {c} channels, filters expect {w.shape[2]}")
    k = w.shape[3]
    xd, wdat = x.data, w.data
    bd = None if b is None else b.data
    need_b = b is not None and b.requires_grad

    if h < 2 or wd < 2:
        u = _up2(xd)
        out, cache = _conv_fwd(u, wdat, bd, 1, "same")

        def backward_small(g):
            gu, gw, gb = _conv_bwd(g, cache, x.requires_grad, w.requires_grad, need_b)
            gx = _up2_grad(gu) if gu is not None else None
            return (gx, gw) if b is None else (gx, gw, gb)

        return _record(out, (x, w) if b is None else (x, w, b), backward_small, "upsample_conv3x3")

    phase = _PHASE.astype(xd.dtype)
    weff = np.einsum("rda,qeb,abck->decrqk", phase, phase, wdat).reshape(9 * c, 4 * k)
    weff = weff.reshape(3, 3, c, 4 * k)
    xe = np.ascontiguousarray(xd[:, np.clip(np.arange(-1, h + 1), 0, h - 1)][:, :, np.clip(np.arange(-1, wd + 1), 0, wd - 1)])
    ph, cols = _corr_fwd(xe, weff)
    out = ph.reshape(n, h, wd, 2, 2, k).transpose(0, 1, 3, 2, 4, 5).reshape(n, 2 * h, 2 * wd, k)
    if bd is not None:
        out += bd

    strips = []
    for sl, build, unbuild, dst in _strip_parts(xd):
        z = build(_up2(xd[sl]))
        s_out, s_cache = _conv_fwd(z, wdat, bd, 1, "valid")
        out[dst] = s_out
        strips.append((sl, z.shape, unbuild, dst, s_cache))

    def backward(g):
        g_main = g.copy()
        g_main[:, 0] = 0
        g_main[:, -1] = 0
        g_main[:, :, 0] = 0
        g_main[:, :, -1] = 0
        gph = g_main.reshape(n, h, 2, wd, 2, k).transpose(0, 1, 3, 2, 4, 5).reshape(n * h * wd, 4 * k)
        gw = gb = gx = None
        if w.requires_grad:
            gweff = (cols.T @ gph).reshape(3, 3, c, 2, 2, k)
            gw = np.einsum("rda,qeb,decrqk->abck", phase, phase, gweff)
        if need_b:
            gb = g.reshape(-1, k).sum(axis=0)
        if x.requires_grad:
            gxe = _corr_grad_input(gph.reshape(n, h, wd, 4 * k), weff)
            gx = gxe[:, 1:-1, 1:-1].copy()
            gx[:, 0] += gxe[:, 0, 1:-1]
            gx[:, -1] += gxe[:, -1, 1:-1]
            gx[:, :, 0] += gxe[:, 1:-1, 0]
            gx[:, :, -1] += gxe[:, 1:-1, -1]
            gx[:, 0, 0] += gxe[:, 0, 0]
            gx[:, 0, -1] += gxe[:, 0, -1]
            gx[:, -1, 0] += gxe[:, -1, 0]
            gx[:, -1, -1] += gxe[:, -1, -1]
        for sl, zshape, unbuild, dst, s_cache in strips:
            gz, sgw, _ = _conv_bwd(np.ascontiguousarray(g[dst]), s_cache, x.requires_grad, w.requires_grad, False)
            if sgw is not None:
                gw += sgw
            if gz is not None:
                gx[sl] += _up2_grad(unbuild(gz))
        return (gx, gw) if b is None else (gx, gw, gb)

    return _record(out, (x, w) if b is None else (x, w, b), backward, "upsample_conv3x3")


# batch normalisation ------------------------------------------------------------

def batch_norm(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    training: bool,
    eps: float = 1e-5,
    momentum: float = 0.1,
    update_stats: bool = True,
) -> Tensor:
    """Per-channel batch normalisation over every axis but the last.

    In training mode the batch statistics (biased variance) normalise the
    input and, when ``update_stats`` is set, the running arrays are updated in
    place as ``running = (1 - momentum) * running + momentum * batch``.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    c = x.shape[-1]
    if gamma.shape != (c,) or beta.shape != (c,) or running_mean.shape != (c,) or running_var.shape != (c,):
        raise ShapeError(f"batch_norm parameters do not match {c} channels")
    axes = tuple(range(x.ndim - 1))
    dt = x.dtype.type
    if training:
        mu = x.data.mean(axis=axes)
        var = x.data.var(axis=axes)
        if update_stats:
            running_mean *= 1 - momentum
            running_mean += momentum * mu
            running_var *= 1 - momentum
            running_var += momentum * var
    else:
        mu = running_mean.astype(x.dtype)
        var = running_var.astype(x.dtype)
    inv = (1.0 / np.sqrt(var + dt(eps))).astype(x.dtype)
    xhat = (x.data - mu) * inv
    out = xhat * gamma.data + beta.data
    m = x.data.size // c

    def backward(g):
        ggamma = (g * xhat).sum(axis=axes) if gamma.requires_grad else None
        gbeta = g.sum(axis=axes) if beta.requires_grad else None
        gx = None
        if x.requires_grad:
            gxhat = g * gamma.data
            if training:
                gx = (inv / m) * (m * gxhat - gxhat.sum(axis=axes) - xhat * (gxhat * xhat).sum(axis=axes))
            else:
                gx = gxhat * inv
            gx = gx.astype(x.dtype, copy=False)
        return gx, ggamma, gbeta

    return _record(out.astype(x.dtype, copy=False), (x, gamma, beta), backward, "batch_norm")


# parameters -----------------------------------------------------------------------

class Parameter:
    """A named tensor owned by a network.

    ``trainable`` marks values the optimiser may touch (batch-norm running
    statistics are not trainable); ``frozen`` is the transfer-learning freeze
    flag and also stops running-statistic updates. ``clip`` bounds are enforced
    by :meth:`clamp_` (frozen values are never touched).
    """

    def __init__(self, name: str, data, trainable: bool = True, clip=None):
        self.name = name
        self.tensor = Tensor(data, requires_grad=trainable)
        self.trainable = trainable
        self.clip = None if clip is None else (float(clip[0]), float(clip[1]))
        self.frozen = False

    @property
    def data(self) -> np.ndarray:
        return self.tensor.data

    @property
    def grad(self):
        return self.tensor.grad

    @property
    def shape(self):
        return self.tensor.shape

    def set_frozen(self, frozen: bool = True):
        self.frozen = bool(frozen)
        self.tensor.requires_grad = self.trainable and not self.frozen

    def clamp_(self):
        if self.clip is not None and not self.frozen:
            np.clip(self.tensor.data, self.clip[0], self.clip[1], out=self.tensor.data)

    def __repr__(self):
        flags = "".join([" trainable" if self.trainable else "", " frozen" if self.frozen else ""])
        return f"Parameter({self.name!r}, shape={self.shape}{flags})"


@contextmanager
def grads_disabled(params: Iterable[Parameter]):
    """Temporarily stop recording gradients for ``params``."""
    params = list(params)
    saved = [p.tensor.requires_grad for p in params]
    for p in params:
        p.tensor.requires_grad = False
    try:
        yield
    finally:
        for p, s in zip(params, saved):
            p.tensor.requires_grad = s


# gradient checking -------------------------------------------------------------------

@dataclass
class GradCheckReport:
    """Max relative error per input; error is ``max|a - n| / max(max|a|, max|n|)``."""

    errors: list = field(default_factory=list)
    tol: float | None = None

    @property
    def max_error(self) -> float:
        return max(self.errors) if self.errors else 0.0

    @property
    def passed(self) -> bool:
        return self.tol is None or self.max_error < self.tol


def numeric_grad(f: Callable[..., Tensor], inputs: Sequence[np.ndarray], h: float = 1e-4) -> list:
    """Central differences of scalar ``f`` in float64, one array per input."""
    base = [np.array(a, dtype=np.float64) for a in inputs]
    grads = []
    with no_grad():
        for arr in base:
            numeric = np.zeros_like(arr)
            flat, nflat = arr.reshape(-1), numeric.reshape(-1)
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + h
                fp = float(f(*[Tensor(b) for b in base]).data.sum())
                flat[i] = orig - h
                fm = float(f(*[Tensor(b) for b in base]).data.sum())
                flat[i] = orig
                nflat[i] = (fp - fm) / (2 * h)
            grads.append(numeric)
    return grads


def grad_check(
    f: Callable[..., Tensor],
    inputs: Sequence[np.ndarray],
    h: float = 1e-4,
    tol: float | None = None,
    dtype=np.float64,
    numeric: list | None = None,
) -> GradCheckReport:
    """Compare reverse-mode gradients of scalar ``f`` against central differences.

    The analytic pass runs in ``dtype``; the finite-difference reference is
    always evaluated in float64 (pass ``numeric`` to reuse one).
    """
    tensors = [Tensor(np.array(a, dtype=dtype), requires_grad=True) for a in inputs]
    out = f(*tensors)
    if out.size != 1:
        raise ShapeError(f"grad_check needs a scalar-valued function, got shape {out.shape}")
    out.backward()
    analytic = [np.zeros(t.shape) if t.grad is None else t.grad.astype(np.float64) for t in tensors]
    if numeric is None:
        numeric = numeric_grad(f, inputs, h)
    report = GradCheckReport(tol=tol)
    for a, n in zip(analytic, numeric):
        scale = max(np.abs(a).max(), np.abs(n).max(), 1e-12)
        report.errors.append(float(np.abs(a - n).max() / scale))
    return report
