"""Dense float64 tensors with reverse-mode automatic differentiation.

Every operation records its inputs and a backward closure; calling
``backward()`` on a scalar result walks the recorded graph in reverse
topological order and accumulates d(loss)/d(leaf) into ``grad`` for every
leaf created with ``requires_grad=True``.

The graph is an implicit DAG: each tensor keeps an ordered tuple of its
parent tensors, so traversal order (and therefore floating-point
accumulation order) is identical between runs with identical inputs.
"""

from __future__ import annotations

import struct
from typing import Callable, Iterable, Optional, Sequence

import numpy as np

TENSOR_MAGIC = b"AUT1"

# when set to a list, relu and max_pool2d report how close the current
# evaluation point sits to one of their non-differentiable kinks
_KINK_TRACE: Optional[list] = None


class kink_trace:
    """Collect per-op distances to the nearest relu/pool kink during forwards."""

    def __enter__(self):
        global _KINK_TRACE
        self._saved = _KINK_TRACE
        _KINK_TRACE = []
        return _KINK_TRACE

    def __exit__(self, *exc):
        global _KINK_TRACE
        _KINK_TRACE = self._saved
        return False


class GradientCheckError(Exception):
    """A finite-difference check produced a non-finite gradient."""


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``grad`` down to ``shape``, undoing numpy broadcasting."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, dim in enumerate(shape):
        if dim == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


class Tensor:
    """A numpy-backed node in the differentiation graph."""

    __slots__ = ("data", "grad", "requires_grad", "_prev", "_backward", "name")

    def __init__(self, data, requires_grad: bool = False, _prev: tuple = (), name: Optional[str] = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = bool(requires_grad)
        self._prev = _prev
        self._backward: Optional[Callable[[np.ndarray], None]] = None
        self.name = name

    # ------------------------------------------------------------------
    # basic introspection

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    @property
    def ndim(self):
        return self.data.ndim

    def __repr__(self):
        head = f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad}"
        if self.name:
            head += f", name={self.name!r}"
        return head + ")"

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError(f"item() requires a single-element tensor, got shape {self.data.shape}")
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def accumulate_grad(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = g.copy() if isinstance(g, np.ndarray) else np.asarray(g, dtype=np.float64)
        else:
            self.grad += g

    # ------------------------------------------------------------------
    # graph construction helpers

    @staticmethod
    def _coerce(other) -> "Tensor":
        if isinstance(other, Tensor):
            return other
        return Tensor(other)

    def _make(self, data, prev, backward) -> "Tensor":
        needs = any(p.requires_grad for p in prev)
        out = Tensor(data, requires_grad=needs, _prev=prev if needs else ())
        if needs:
            out._backward = backward
        return out

    # ------------------------------------------------------------------
    # arithmetic

    def __add__(self, other):
        other = self._coerce(other)
        a, b = self, other

        def backward(g):
            if a.requires_grad:
                a.accumulate_grad(_unbroadcast(g, a.data.shape))
            if b.requires_grad:
                b.accumulate_grad(_unbroadcast(g, b.data.shape))

        return self._make(a.data + b.data, (a, b), backward)

    __radd__ = __add__

    def __mul__(self, other):
        other = self._coerce(other)
        a, b = self, other

        def backward(g):
            if a.requires_grad:
                a.accumulate_grad(_unbroadcast(g * b.data, a.data.shape))
            if b.requires_grad:
                b.accumulate_grad(_unbroadcast(g * a.data, b.data.shape))

        return self._make(a.data * b.data, (a, b), backward)

    __rmul__ = __mul__

    def __neg__(self):
        a = self

        def backward(g):
            if a.requires_grad:
                a.accumulate_grad(-g)

        return self._make(-a.data, (a,), backward)

    def __sub__(self, other):
        return self + (-self._coerce(other))

    def __rsub__(self, other):
        return self._coerce(other) + (-self)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("tensor/tensor division is not supported; multiply by a reciprocal")
        return self * (1.0 / float(other))

    def matmul(self, other: "Tensor") -> "Tensor":
        other = self._coerce(other)
        a, b = self, other
        if a.data.ndim != 2 or b.data.ndim != 2:
            raise ValueError(f"matmul expects 2-d operands, got {a.data.shape} @ {b.data.shape}")
        if a.data.shape[1] != b.data.shape[0]:
            raise ValueError(f"matmul inner dimensions differ: {a.data.shape} @ {b.data.shape}")

        def backward(g):
            if a.requires_grad:
                a.accumulate_grad(g @ b.data.T)
            if b.requires_grad:
                b.accumulate_grad(a.data.T @ g)

        return self._make(a.data @ b.data, (a, b), backward)

    __matmul__ = matmul

    def transpose(self, axes: Optional[Sequence[int]] = None) -> "Tensor":
        a = self
        if axes is None:
            axes = tuple(reversed(range(a.data.ndim)))
        axes = tuple(axes)
        inverse = tuple(np.argsort(axes))

        def backward(g):
            if a.requires_grad:
                a.accumulate_grad(g.transpose(inverse))

        return self._make(a.data.transpose(axes), (a,), backward)

    @property
    def T(self) -> "Tensor":
        return self.transpose()

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        a = self
        old = a.data.shape

        def backward(g):
            if a.requires_grad:
                a.accumulate_grad(g.reshape(old))

        return self._make(a.data.reshape(shape), (a,), backward)

    def flatten_from(self, start_dim: int = 1) -> "Tensor":
        lead = self.data.shape[:start_dim]
        return self.reshape(lead + (-1,))

    def __getitem__(self, idx) -> "Tensor":
        a = self

        def backward(g):
            if a.requires_grad:
                buf = np.zeros_like(a.data)
                buf[idx] = g
                a.accumulate_grad(buf)

        return self._make(a.data[idx], (a,), backward)

    # ------------------------------------------------------------------
    # activations and pointwise functions

    def relu(self) -> "Tensor":
        a = self
        mask = a.data > 0
        if _KINK_TRACE is not None:
            _KINK_TRACE.append(("relu", float(np.abs(a.data).min())))

        def backward(g):
            if a.requires_grad:
                a.accumulate_grad(g * mask)

        return self._make(np.where(mask, a.data, 0.0), (a,), backward)

    def sigmoid(self) -> "Tensor":
        a = self
        x = a.data
        out = np.empty_like(x)
        pos = x >= 0
        out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
        ex = np.exp(x[~pos])
        out[~pos] = ex / (1.0 + ex)

        def backward(g):
            if a.requires_grad:
                a.accumulate_grad(g * out * (1.0 - out))

        return self._make(out, (a,), backward)

    def tanh(self) -> "Tensor":
        a = self
        out = np.tanh(a.data)

        def backward(g):
            if a.requires_grad:
                a.accumulate_grad(g * (1.0 - out * out))

        return self._make(out, (a,), backward)

    def log(self) -> "Tensor":
        a = self

        def backward(g):
            if a.requires_grad:
                a.accumulate_grad(g / a.data)

        return self._make(np.log(a.data), (a,), backward)

    # ------------------------------------------------------------------
    # reductions

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        a = self

        def backward(g):
            if not a.requires_grad:
                return
            if axis is None:
                a.accumulate_grad(np.broadcast_to(g, a.data.shape))
            else:
                gg = g if keepdims else np.expand_dims(g, axis)
                a.accumulate_grad(np.broadcast_to(gg, a.data.shape))

        return self._make(a.data.sum(axis=axis, keepdims=keepdims), (a,), backward)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        if axis is None:
            n = self.data.size
        else:
            n = self.data.shape[axis]
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / n)

    # ------------------------------------------------------------------
    # backward pass

    def backward(self) -> None:
        """Populate ``grad`` for every requires_grad leaf reachable from here."""
        if self.data.size != 1:
            raise ValueError(f"backward() requires a scalar loss, got shape {self.data.shape}")
        if not self.requires_grad:
            return
        order = _toposort(self)
        self.grad = np.ones_like(self.data)
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)


def _toposort(root: Tensor) -> list:
    """Iterative depth-first topological order of the graph below ``root``."""
    order = []
    seen = set()
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
        for parent in node._prev:
            if id(parent) not in seen:
                stack.append((parent, False))
    return order


# ----------------------------------------------------------------------
# structural operations


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [Tensor._coerce(t) for t in tensors]
    if not tensors:
        raise ValueError("concat requires at least one tensor")
    data = np.concatenate([t.data for t in tensors], axis=axis)
    splits = np.cumsum([t.data.shape[axis] for t in tensors])[:-1]

    def backward(g):
        pieces = np.split(g, splits, axis=axis)
        for t, piece in zip(tensors, pieces):
            if t.requires_grad:
                t.accumulate_grad(piece)

    needs = any(t.requires_grad for t in tensors)
    out = Tensor(data, requires_grad=needs, _prev=tuple(tensors) if needs else ())
    if needs:
        out._backward = backward
    return out


def crop(x: Tensor, rows: tuple, cols: tuple) -> Tensor:
    """Rectangular crop on the last two axes; ``rows``/``cols`` are inclusive bounds."""
    r0, r1 = rows
    c0, c1 = cols
    h, w = x.data.shape[-2], x.data.shape[-1]
    if not (0 <= r0 <= r1 < h and 0 <= c0 <= c1 < w):
        raise ValueError(f"crop window rows={rows} cols={cols} outside grid {h}x{w}")
    idx = (Ellipsis, slice(r0, r1 + 1), slice(c0, c1 + 1))
    return x[idx]


def gather_windows(x: Tensor, row0: np.ndarray, col0: np.ndarray, size: int) -> Tensor:
    """Per-sample square crops from a batched feature map.

    ``x`` has shape (N, C, H, W); ``row0``/``col0`` give each sample's
    top-left window corner. Output is (N, C, size, size). The backward
    pass scatter-adds into the source positions, so gradients vanish
    everywhere outside the windows.
    """
    n, c, h, w = x.data.shape
    row0 = np.asarray(row0, dtype=np.intp)
    col0 = np.asarray(col0, dtype=np.intp)
    if row0.shape != (n,) or col0.shape != (n,):
        raise ValueError(f"window corners must have shape ({n},), got {row0.shape} and {col0.shape}")
    if (row0 < 0).any() or (col0 < 0).any() or (row0 + size > h).any() or (col0 + size > w).any():
        raise ValueError(f"{size}x{size} windows fall outside the {h}x{w} grid")
    steps = np.arange(size, dtype=np.intp)
    ni = np.arange(n, dtype=np.intp)[:, None, None, None]
    ci = np.arange(c, dtype=np.intp)[None, :, None, None]
    ri = (row0[:, None] + steps[None, :])[:, None, :, None]
    wi = (col0[:, None] + steps[None, :])[:, None, None, :]
    a = x

    def backward(g):
        if a.requires_grad:
            buf = np.zeros_like(a.data)
            np.add.at(buf, (ni, ci, ri, wi), g)
            a.accumulate_grad(buf)

    return a._make(a.data[ni, ci, ri, wi], (a,), backward)


# ----------------------------------------------------------------------
# convolution, pooling, upsampling


def _im2col(x: np.ndarray, kh: int, kw: int, stride: int, padding: int):
    n, c, h, w = x.shape
    if padding:
        x = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    hp, wp = x.shape[2], x.shape[3]
    ho = (hp - kh) // stride + 1
    wo = (wp - kw) // stride + 1
    s0, s1, s2, s3 = x.strides
    windows = np.lib.stride_tricks.as_strided(
        x,
        shape=(n, c, kh, kw, ho, wo),
        strides=(s0, s1, s2, s3, s2 * stride, s3 * stride),
        writeable=False,
    )
    cols = windows.transpose(0, 4, 5, 1, 2, 3).reshape(n * ho * wo, c * kh * kw)
    return np.ascontiguousarray(cols), ho, wo


def _col2im(cols: np.ndarray, x_shape: tuple, kh: int, kw: int, stride: int, padding: int,
            ho: int, wo: int) -> np.ndarray:
    n, c, h, w = x_shape
    buf = np.zeros((n, c, h + 2 * padding, w + 2 * padding))
    blocks = cols.reshape(n, ho, wo, c, kh, kw).transpose(0, 3, 4, 5, 1, 2)
    for ih in range(kh):
        for iw in range(kw):
            buf[:, :, ih:ih + ho * stride:stride, iw:iw + wo * stride:stride] += blocks[:, :, ih, iw]
    if padding:
        buf = buf[:, :, padding:-padding, padding:-padding]
    return buf


def _padded(x: np.ndarray, ph: int, pw: int) -> np.ndarray:
    if ph == 0 and pw == 0:
        return x
    n, c, h, w = x.shape
    out = np.zeros((n, c, h + 2 * ph, w + 2 * pw))
    out[:, :, ph:ph + h, pw:pw + w] = x
    return out


def _windows(x: np.ndarray, kh: int, kw: int) -> np.ndarray:
    """(N, C, kh, kw, Ho, Wo) sliding view over the last two axes, stride 1."""
    n, c, h, w = x.shape
    s0, s1, s2, s3 = x.strides
    return np.lib.stride_tricks.as_strided(
        x, shape=(n, c, kh, kw, h - kh + 1, w - kw + 1),
        strides=(s0, s1, s2, s3, s2, s3), writeable=False)


def conv2d(x: Tensor, filters: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """2-d cross-correlation of a (N,C,H,W) batch with (F,C,kh,kw) filters.

    A 3-d input (C,H,W) is treated as a single-sample batch and the batch
    axis is squeezed from the result. Stride 1 runs the fast tensordot path;
    larger strides fall back to an im2col formulation.
    """
    if stride < 1:
        raise ValueError(f"stride must be >= 1, got {stride}")
    if padding < 0:
        raise ValueError(f"padding must be >= 0, got {padding}")
    squeeze = x.data.ndim == 3
    xb = x.reshape((1,) + x.data.shape) if squeeze else x
    if xb.data.ndim != 4 or filters.data.ndim != 4:
        raise ValueError(f"conv2d expects (N,C,H,W) input and (F,C,kh,kw) filters, "
                         f"got {x.data.shape} and {filters.data.shape}")
    n, c, h, w = xb.data.shape
    f, cf, kh, kw = filters.data.shape
    if c != cf:
        raise ValueError(f"conv2d channel mismatch: input has {c} channels, filters expect {cf}")
    if h + 2 * padding < kh or w + 2 * padding < kw:
        raise ValueError(f"{kh}x{kw} kernel does not fit padded {h}x{w} input (padding {padding})")
    a, fl = xb, filters

    if stride == 1:
        xp = _padded(xb.data, padding, padding)
        win = _windows(xp, kh, kw)
        out = np.ascontiguousarray(
            np.tensordot(filters.data, win, axes=([1, 2, 3], [1, 2, 3])).transpose(1, 0, 2, 3))
        ho, wo = out.shape[2], out.shape[3]

        def backward(g):
            if fl.requires_grad:
                fl.accumulate_grad(np.tensordot(g, win, axes=([0, 2, 3], [0, 4, 5])))
            if a.requires_grad:
                gp = _padded(g, kh - 1, kw - 1)
                gwin = _windows(gp, kh, kw)
                wflip = filters.data[:, :, ::-1, ::-1]
                dxp = np.tensordot(wflip, gwin, axes=([0, 2, 3], [1, 2, 3])).transpose(1, 0, 2, 3)
                if padding:
                    dxp = dxp[:, :, padding:padding + h, padding:padding + w]
                a.accumulate_grad(np.ascontiguousarray(dxp))

        res = xb._make(out, (a, fl), backward)
        return res.reshape(res.data.shape[1:]) if squeeze else res

    cols, ho, wo = _im2col(xb.data, kh, kw, stride, padding)
    wmat = filters.data.reshape(f, -1)
    out = (cols @ wmat.T).reshape(n, ho, wo, f).transpose(0, 3, 1, 2)

    def backward(g):
        gmat = g.transpose(0, 2, 3, 1).reshape(n * ho * wo, f)
        if fl.requires_grad:
            fl.accumulate_grad((gmat.T @ cols).reshape(f, c, kh, kw))
        if a.requires_grad:
            dcols = gmat @ wmat
            a.accumulate_grad(_col2im(dcols, (n, c, h, w), kh, kw, stride, padding, ho, wo))

    res = xb._make(out, (a, fl), backward)
    return res.reshape(res.data.shape[1:]) if squeeze else res


def max_pool2d(x: Tensor, size: int) -> Tensor:
    """Non-overlapping max pooling; spatial dims must be divisible by ``size``."""
    n, c, h, w = x.data.shape
    if h % size or w % size:
        raise ValueError(f"max_pool2d: {h}x{w} input not divisible by pool size {size}")
    ho, wo = h // size, w // size
    tiles = x.data.reshape(n, c, ho, size, wo, size).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, ho, wo, size * size)
    idx = tiles.argmax(axis=-1)
    out = np.take_along_axis(tiles, idx[..., None], axis=-1)[..., 0]
    if _KINK_TRACE is not None and size > 1:
        top2 = np.partition(tiles, size * size - 2, axis=-1)[..., -2]
        _KINK_TRACE.append(("pool", float((out - top2).min())))
    a = x

    def backward(g):
        if not a.requires_grad:
            return
        buf = np.zeros((n, c, ho, wo, size * size))
        np.put_along_axis(buf, idx[..., None], g[..., None], axis=-1)
        buf = buf.reshape(n, c, ho, wo, size, size).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h, w)
        a.accumulate_grad(buf)

    return a._make(out, (a,), backward)


def upsample_nearest(x: Tensor, factor: int) -> Tensor:
    """Replicate each cell of the last two axes into a factor x factor tile."""
    if factor < 1:
        raise ValueError(f"upsample factor must be >= 1, got {factor}")
    a = x
    data = np.repeat(np.repeat(a.data, factor, axis=-2), factor, axis=-1)
    h, w = a.data.shape[-2], a.data.shape[-1]

    def backward(g):
        if a.requires_grad:
            lead = g.shape[:-2]
            gg = g.reshape(lead + (h, factor, w, factor)).sum(axis=(-3, -1))
            a.accumulate_grad(gg)

    return a._make(data, (a,), backward)


def gather_region_windows(x: Tensor, tops: np.ndarray, size: int) -> Tensor:
    """All regions' square crops at once: (N,C,H,W) -> (R,N,C,size,size).

    ``tops`` holds per-sample, per-region top-left corners, shape (N, R, 2).
    One advanced-indexing gather forward, one scatter-add backward.
    """
    n, c, h, w = x.data.shape
    tops = np.asarray(tops, dtype=np.intp)
    if tops.ndim != 3 or tops.shape[0] != n or tops.shape[2] != 2:
        raise ValueError(f"tops must be (N, R, 2) with N={n}, got {tops.shape}")
    r = tops.shape[1]
    if (tops < 0).any() or (tops[:, :, 0] + size > h).any() or (tops[:, :, 1] + size > w).any():
        raise ValueError(f"{size}x{size} windows fall outside the {h}x{w} grid")
    steps = np.arange(size, dtype=np.intp)
    ni = np.arange(n, dtype=np.intp)[None, :, None, None, None]
    ci = np.arange(c, dtype=np.intp)[None, None, :, None, None]
    ri = tops[:, :, 0].T[:, :, None, None, None] + steps[None, None, None, :, None]
    cj = tops[:, :, 1].T[:, :, None, None, None] + steps[None, None, None, None, :]
    a = x

    def backward(g):
        if a.requires_grad:
            buf = np.zeros_like(a.data)
            np.add.at(buf, (ni, ci, ri, cj), g)
            a.accumulate_grad(buf)

    return a._make(a.data[ni, ci, ri, cj], (a,), backward)


def multi_conv2d(x: Tensor, filters: Sequence[Tensor], padding: int = 0) -> Tensor:
    """Region-private convolution in channels-last layout, stride 1.

    ``x`` is (R, N, H, W, C) with one (F, C, kh, kw) filter bank per region;
    output is (R, N, Ho, Wo, F). The kernel is applied as kh*kw shifted
    batched matmuls, which keeps every copy a contiguous channel run.
    Gradient flow is block-diagonal: region k's bank only sees region k.
    """
    r, n, h, w, c = x.data.shape
    if len(filters) != r:
        raise ValueError(f"{len(filters)} filter banks for {r} regions")
    f, cf, kh, kw = filters[0].data.shape
    for bank in filters:
        if bank.data.shape != (f, cf, kh, kw):
            raise ValueError("filter banks must share one shape")
    if cf != c:
        raise ValueError(f"multi_conv2d channel mismatch: input {c}, filters {cf}")
    if kh != kw:
        raise ValueError(f"multi_conv2d expects square kernels, got {kh}x{kw}")
    wstack = np.stack([bank.data for bank in filters])  # (R, F, C, kh, kw)
    xp = _pad_spatial_nhwc(x.data, padding)
    hp, wp = xp.shape[2], xp.shape[3]
    ho, wo = hp - kh + 1, wp - kw + 1
    s0, s1, s2, s3, s4 = xp.strides
    win = np.lib.stride_tricks.as_strided(
        xp, shape=(r, n, ho, wo, kh, kw, c),
        strides=(s0, s1, s2, s3, s2, s3, s4), writeable=False)
    mat = win.reshape(r, n * ho * wo, kh * kw * c)  # one contiguous-run copy
    bmat = wstack.transpose(0, 3, 4, 2, 1).reshape(r, kh * kw * c, f)
    out = np.matmul(mat, bmat).reshape(r, n, ho, wo, f)
    a = x
    banks = tuple(filters)

    def backward(g):
        gmat = g.reshape(r, n * ho * wo, f)
        if any(b.requires_grad for b in banks):
            dw = np.matmul(mat.transpose(0, 2, 1), gmat)  # (R, kh*kw*C, F)
            dw = dw.reshape(r, kh, kw, c, f).transpose(0, 4, 3, 1, 2)
            for bank, grad in zip(banks, dw):
                if bank.requires_grad:
                    bank.accumulate_grad(np.ascontiguousarray(grad))
        if a.requires_grad:
            gp = _pad_spatial_nhwc(g, kh - 1)
            t0, t1, t2, t3, t4 = gp.strides
            gwin = np.lib.stride_tricks.as_strided(
                gp, shape=(r, n, hp, wp, kh, kw, f),
                strides=(t0, t1, t2, t3, t2, t3, t4), writeable=False)
            ga = gwin.reshape(r, n * hp * wp, kh * kw * f)
            wflip = wstack[:, :, :, ::-1, ::-1].transpose(0, 3, 4, 1, 2)  # (R, kh, kw, F, C)
            dxp = np.matmul(ga, np.ascontiguousarray(wflip.reshape(r, kh * kw * f, c)))
            dxp = dxp.reshape(r, n, hp, wp, c)
            if padding:
                dxp = np.ascontiguousarray(dxp[:, :, padding:padding + h, padding:padding + w, :])
            a.accumulate_grad(dxp)

    return a._make(out, (a,) + banks, backward)


def _pad_spatial_nhwc(x: np.ndarray, p: int) -> np.ndarray:
    if p == 0:
        return x
    r, n, h, w, c = x.shape
    out = np.zeros((r, n, h + 2 * p, w + 2 * p, c))
    out[:, :, p:p + h, p:p + w, :] = x
    return out


def multi_matmul(x: Tensor, weights: Sequence[Tensor]) -> Tensor:
    """Per-region linear maps: (R,N,K) with one (K,M) weight per region."""
    r, n, k = x.data.shape
    if len(weights) != r:
        raise ValueError(f"{len(weights)} weight blocks for {r} regions")
    wstack = np.stack([wt.data for wt in weights])
    if wstack.shape[1] != k:
        raise ValueError(f"weight rows {wstack.shape[1]} != feature width {k}")
    a = x
    blocks = tuple(weights)

    def backward(g):
        if a.requires_grad:
            a.accumulate_grad(np.matmul(g, wstack.transpose(0, 2, 1)))
        if any(b.requires_grad for b in blocks):
            dw = np.matmul(a.data.transpose(0, 2, 1), g)
            for block, grad in zip(blocks, dw):
                if block.requires_grad:
                    block.accumulate_grad(grad)

    return a._make(np.matmul(a.data, wstack), (a,) + blocks, backward)


# ----------------------------------------------------------------------
# serialization: magic "AUT1", u32 rank, u64 dims, little-endian float64 payload


def write_tensor(stream, array: np.ndarray) -> None:
    array = np.asarray(array, dtype=np.float64)
    stream.write(TENSOR_MAGIC)
    stream.write(struct.pack("<I", array.ndim))
    for dim in array.shape:
        stream.write(struct.pack("<Q", dim))
    stream.write(array.astype("<f8").tobytes(order="C"))


def read_tensor(stream) -> np.ndarray:
    magic = stream.read(4)
    if magic != TENSOR_MAGIC:
        raise ValueError(f"bad tensor record: expected magic {TENSOR_MAGIC!r}, got {magic!r}")
    (rank,) = struct.unpack("<I", stream.read(4))
    shape = tuple(struct.unpack("<Q", stream.read(8))[0] for _ in range(rank))
    count = int(np.prod(shape)) if shape else 1
    payload = stream.read(8 * count)
    if len(payload) != 8 * count:
        raise ValueError("truncated tensor record")
    return np.frombuffer(payload, dtype="<f8").reshape(shape).astype(np.float64)


# ----------------------------------------------------------------------
# finite-difference gradient checking


def grad_check(fn: Callable[..., Tensor], inputs: Sequence[np.ndarray], eps: float = 1e-3,
               max_coords: Optional[int] = None, rng: Optional[np.random.Generator] = None) -> float:
    """Compare analytic gradients of ``fn`` against central differences.

    ``fn`` receives one requires_grad Tensor per entry of ``inputs`` and must
    return a scalar Tensor. Returns the maximum over all checked coordinates
    of ``|analytic - numeric| / max(1, |numeric|)``. With ``max_coords`` set,
    a seeded random subset of coordinates is checked per input, which keeps
    large closures affordable.
    """
    if not (0 < eps <= 1e-2):
        raise ValueError(f"eps must lie in (0, 1e-2], got {eps}")
    arrays = [np.asarray(a, dtype=np.float64) for a in inputs]
    tensors = [Tensor(a.copy(), requires_grad=True) for a in arrays]
    out = fn(*tensors)
    if out.data.size != 1:
        raise ValueError(f"grad_check closure must return a scalar, got shape {out.data.shape}")
    out.backward()

    worst = 0.0
    for i, (arr, ten) in enumerate(zip(arrays, tensors)):
        analytic = ten.grad if ten.grad is not None else np.zeros_like(arr)
        flat = arr.reshape(-1)
        coords = np.arange(flat.size)
        if max_coords is not None and flat.size > max_coords:
            gen = rng if rng is not None else np.random.default_rng(0)
            coords = np.sort(gen.choice(flat.size, size=max_coords, replace=False))
        a_flat = analytic.reshape(-1)
        for j in coords:
            j = int(j)
            saved = flat[j]
            flat[j] = saved + eps
            hi = fn(*[Tensor(a) for a in arrays]).item()
            flat[j] = saved - eps
            lo = fn(*[Tensor(a) for a in arrays]).item()
            flat[j] = saved
            numeric = (hi - lo) / (2.0 * eps)
            if not np.isfinite(numeric) or not np.isfinite(a_flat[j]):
                raise GradientCheckError(
                    f"non-finite gradient at input {i}, coordinate {np.unravel_index(j, arr.shape)}: "
                    f"analytic={a_flat[j]}, numeric={numeric}")
            err = abs(a_flat[j] - numeric) / max(1.0, abs(numeric))
            if err > worst:
                worst = err
    return worst


def zero_grads(tensors: Iterable[Tensor]) -> None:
    for t in tensors:
        t.grad = None
