"""Dense NCHW tensors with a reverse-mode gradient tape.

Operations only record themselves while a :class:`Tape` is active, so plain
inference runs without bookkeeping::

    with Tape() as tape:
        loss = model.loss(...)
    grads = tape.backward(loss, params=model.parameters())
"""
from __future__ import annotations

import threading
from contextlib import contextmanager
from typing import Callable, Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "name", "_tape")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float64)
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.name = name
        self._tape: Tape | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{tag}, requires_grad={self.requires_grad})"

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
        return mul(self, -1.0)

    def sum(self) -> Tensor:
        return sum_all(self)

    def mean(self) -> Tensor:
        return mean_all(self)


# --------------------------------------------------------------------------
# tape
# --------------------------------------------------------------------------

_local = threading.local()


def _active_tape() -> Tape | None:
    stack = getattr(_local, "tapes", None)
    return stack[-1] if stack else None


class _Record:
    __slots__ = ("out", "parents", "backward", "op")

    def __init__(self, out, parents, backward, op):
        self.out = out
        self.parents = parents
        self.backward = backward
        self.op = op


class Tape:
    """Ordered record of differentiable operations.

    A tape is thread-local while active; separate threads can each run their
    own tape over a shared, read-only model.
    """

    def __init__(self):
        self.records: list[_Record] = []

    def __enter__(self) -> Tape:
        stack = getattr(_local, "tapes", None)
        if stack is None:
            stack = _local.tapes = []
        stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _local.tapes.pop()

    def record(self, out: Tensor, parents: Sequence[Tensor], backward: Callable, op: str) -> None:
        out.requires_grad = True
        out._tape = self
        self.records.append(_Record(out, tuple(parents), backward, op))

    def backward(self, loss: Tensor, params: Iterable[Tensor] | None = None) -> dict[Tensor, np.ndarray]:
        """Propagate d(loss)/d(.) through every record in reverse order.

        Gradients are accumulated into ``.grad`` of every leaf tensor that
        requires grad; calling twice without ``zero_grad`` accumulates.
        Every tensor in ``params`` receives a gradient, zeros if unused.
        Returns a dict mapping each leaf to the gradient of this call.
        """
        if loss.data.size != 1 or loss.ndim != 0:
            raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
        if loss._tape is not self:
            raise ValueError("loss was not recorded on this tape")
        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        pending: dict[int, list[OuterGrad]] = {}
        leaves: dict[int, Tensor] = {}
        owned: set[int] = set()

        def dense(key: int) -> np.ndarray | None:
            g = grads.pop(key, None)
            parts = pending.pop(key, None)
            if parts:
                low = OuterGrad.merge(parts)
                g = low if g is None else (g + low)
            return g

        for rec in reversed(self.records):
            key = id(rec.out)
            g = dense(key)
            owned.discard(key)
            if g is None:
                continue
            parent_grads = rec.backward(g)
            for p, pg in zip(rec.parents, parent_grads):
                if pg is None or not isinstance(p, Tensor) or not p.requires_grad:
                    continue
                if pg.shape != p.shape:
                    raise ShapeError(f"{rec.op}: gradient shape {pg.shape} != operand shape {p.shape}")
                key = id(p)
                if p._tape is None:
                    leaves[key] = p
                if isinstance(pg, OuterGrad):
                    pending.setdefault(key, []).append(pg)
                elif key not in grads:
                    grads[key] = pg
                elif key in owned:
                    grads[key] += pg
                else:
                    # first gradient may alias another operand's; copy before accumulating
                    grads[key] = grads[key] + pg
                    owned.add(key)
        result: dict[Tensor, np.ndarray] = {}
        for key, leaf in leaves.items():
            result[leaf] = dense(key)
        for p in params or ():
            if p not in result:
                result[p] = np.zeros_like(p.data)
        for leaf, g in result.items():
            # stored without copying: gradients are never mutated in place after this point
            leaf.grad = g if leaf.grad is None else leaf.grad + g
        return result


class OuterGrad:
    """Deferred gradient ``a.T @ b`` reshaped to ``shape``.

    A kernel reused across recurrent steps collects one of these per step;
    merging them into a single matmul over the stacked rows is much cheaper
    than materializing and summing each step's dense gradient.
    """

    __slots__ = ("a", "b", "shape")

    def __init__(self, a: np.ndarray, b: np.ndarray, shape: tuple[int, ...]):
        self.a, self.b, self.shape = a, b, shape

    @staticmethod
    def merge(parts: list[OuterGrad]) -> np.ndarray:
        if len(parts) == 1:
            a, b = parts[0].a, parts[0].b
        else:
            a = np.concatenate([q.a for q in parts])
            b = np.concatenate([q.b for q in parts])
        return (a.T @ b).reshape(parts[0].shape)


def backward(loss: Tensor, params: Iterable[Tensor] | None = None) -> dict[Tensor, np.ndarray]:
    if loss._tape is None:
        raise ValueError("loss is not connected to a gradient tape")
    return loss._tape.backward(loss, params)


def _make(data: np.ndarray, parents: Sequence, backward: Callable, op: str) -> Tensor:
    out = Tensor(data)
    tape = _active_tape()
    if tape is not None and any(isinstance(p, Tensor) and p.requires_grad for p in parents):
        tape.record(out, parents, backward, op)
    return out


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))


# --------------------------------------------------------------------------
# flop accounting
# --------------------------------------------------------------------------


class FlopCounter:
    """Collects multiply-accumulate counts of every op run while active."""

    def __init__(self):
        self.macs_by_scope: dict[str, int] = {}
        self._scope: list[str] = ["other"]

    @contextmanager
    def scope(self, name: str):
        self._scope.append(name)
        try:
            yield
        finally:
            self._scope.pop()

    def add(self, macs: int) -> None:
        key = self._scope[-1]
        self.macs_by_scope[key] = self.macs_by_scope.get(key, 0) + int(macs)

    @property
    def total_macs(self) -> int:
        return sum(self.macs_by_scope.values())


def _counter() -> FlopCounter | None:
    return getattr(_local, "counter", None)


@contextmanager
def count_macs():
    prev = _counter()
    counter = _local.counter = FlopCounter()
    try:
        yield counter
    finally:
        _local.counter = prev


@contextmanager
def flop_scope(name: str):
    counter = _counter()
    if counter is None:
        yield
    else:
        with counter.scope(name):
            yield


def _count(macs: int) -> None:
    counter = _counter()
    if counter is not None:
        counter.add(macs)


# --------------------------------------------------------------------------
# elementwise
# --------------------------------------------------------------------------


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _binary_operands(x, y):
    xd = x.data if isinstance(x, Tensor) else x
    yd = y.data if isinstance(y, Tensor) else y
    try:
        shape = np.broadcast_shapes(np.shape(xd), np.shape(yd))
    except ValueError:
        raise ShapeError(f"cannot combine shapes {np.shape(xd)} and {np.shape(yd)}") from None
    return xd, yd, shape


def add(x, y) -> Tensor:
    xd, yd, _ = _binary_operands(x, y)
    xs, ys = np.shape(xd), np.shape(yd)

    def bw(g):
        return _unbroadcast(g, xs), _unbroadcast(g, ys)

    return _make(xd + yd, (x, y), bw, "add")


def sub(x, y) -> Tensor:
    xd, yd, _ = _binary_operands(x, y)
    xs, ys = np.shape(xd), np.shape(yd)

    def bw(g):
        return _unbroadcast(g, xs), _unbroadcast(-g, ys)

    return _make(xd - yd, (x, y), bw, "sub")


def mul(x, y) -> Tensor:
    xd, yd, _ = _binary_operands(x, y)
    xs, ys = np.shape(xd), np.shape(yd)

    def bw(g):
        return _unbroadcast(g * yd, xs), _unbroadcast(g * xd, ys)

    return _make(xd * yd, (x, y), bw, "mul")


def sigmoid(x: Tensor) -> Tensor:
    # split by sign so exp never overflows
    d = x.data
    e = np.exp(-np.abs(d))
    out = np.where(d >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(d.dtype, copy=False)

    def bw(g):
        return (g * out * (1.0 - out),)

    return _make(out, (x,), bw, "sigmoid")


def tanh(x: Tensor) -> Tensor:
    out = np.tanh(x.data)

    def bw(g):
        return (g * (1.0 - out * out),)

    return _make(out, (x,), bw, "tanh")


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    out = np.where(mask, x.data, 0).astype(x.dtype, copy=False)

    def bw(g):
        return (g * mask,)

    return _make(out, (x,), bw, "relu")


def softmax_channels(x: Tensor) -> Tensor:
    d = x.data
    e = np.exp(d - d.max(axis=1, keepdims=True))
    out = e / e.sum(axis=1, keepdims=True)

    def bw(g):
        return (out * (g - (g * out).sum(axis=1, keepdims=True)),)

    return _make(out, (x,), bw, "softmax_channels")


def sum_all(x: Tensor) -> Tensor:
    shape = x.shape

    def bw(g):
        return (np.broadcast_to(g, shape).copy(),)

    return _make(np.asarray(x.data.sum()), (x,), bw, "sum")


def mean_all(x: Tensor) -> Tensor:
    shape, n = x.shape, x.data.size

    def bw(g):
        return (np.full(shape, g / n, dtype=x.dtype),)

    return _make(np.asarray(x.data.mean()), (x,), bw, "mean")


# --------------------------------------------------------------------------
# structural
# --------------------------------------------------------------------------


def concat(xs: Sequence[Tensor], axis: int = 1) -> Tensor:
    if not xs:
        raise ShapeError("concat of an empty list")
    ref = xs[0].shape
    for t in xs[1:]:
        if t.ndim != len(ref) or any(a != b for i, (a, b) in enumerate(zip(t.shape, ref)) if i != axis):
            raise ShapeError(f"concat along axis {axis}: shape {t.shape} incompatible with {ref}")
    sizes = [t.shape[axis] for t in xs]
    bounds = np.cumsum([0] + sizes)

    def bw(g):
        return tuple(
            np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=axis) for i in range(len(xs))
        )

    return _make(np.concatenate([t.data for t in xs], axis=axis), tuple(xs), bw, "concat")


def concat_channels(xs: Sequence[Tensor]) -> Tensor:
    """Channel-wise concatenation; batch and spatial dims must agree."""
    return concat(xs, axis=1)


def split(x: Tensor, sizes: Sequence[int], axis: int = 1) -> list[Tensor]:
    if sum(sizes) != x.shape[axis]:
        raise ShapeError(f"split sizes {list(sizes)} do not cover axis of length {x.shape[axis]}")
    outs = []
    start = 0
    for n in sizes:
        sl = [slice(None)] * x.ndim
        sl[axis] = slice(start, start + n)
        sl = tuple(sl)

        def bw(g, sl=sl):
            full = np.zeros_like(x.data)
            full[sl] = g
            return (full,)

        outs.append(_make(x.data[sl].copy(), (x,), bw, "split"))
        start += n
    return outs


# --------------------------------------------------------------------------
# convolution
# --------------------------------------------------------------------------


def conv_output_size(n: int, k: int, stride: int, padding: int) -> int:
    return (n + 2 * padding - k) // stride + 1


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation of an NCHW input with an (out, in, kh, kw) kernel, zero padded."""
    if x.ndim != 4 or weight.ndim != 4:
        raise ShapeError(f"conv2d expects 4-D input and weight, got {x.shape} and {weight.shape}")
    B, C, H, W = x.shape
    O, Cw, kh, kw = weight.shape
    if Cw != C:
        raise ShapeError(f"conv2d: weight expects {Cw} input channels, input has {C}")
    if bias is not None and bias.shape != (O,):
        raise ShapeError(f"conv2d: bias shape {bias.shape} != ({O},)")
    Ho = conv_output_size(H, kh, stride, padding)
    Wo = conv_output_size(W, kw, stride, padding)
    if Ho < 1 or Wo < 1:
        raise ShapeError(f"conv2d: kernel {kh}x{kw} does not fit input {H}x{W} with padding {padding}")
    _count(B * Ho * Wo * O * C * kh * kw)

    xd, wd = x.data, weight.data
    wmat = wd.reshape(O, C * kh * kw)
    if kh == 1 and kw == 1 and padding == 0:
        xs = xd[:, :, ::stride, ::stride]
        cols = xs.transpose(0, 2, 3, 1).reshape(B * Ho * Wo, C)
    else:
        xp = np.pad(xd, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else xd
        win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :Ho, :Wo]
        cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(B * Ho * Wo, C * kh * kw)
    out = cols @ wmat.T
    if bias is not None:
        out += bias.data
    out = np.ascontiguousarray(out.reshape(B, Ho, Wo, O).transpose(0, 3, 1, 2))

    def bw(g):
        g2 = g.transpose(0, 2, 3, 1).reshape(B * Ho * Wo, O)
        gw = OuterGrad(g2, cols, wd.shape) if weight.requires_grad else None
        gb = g2.sum(axis=0) if bias is not None and bias.requires_grad else None
        gx = None
        if x.requires_grad:
            # (W^T g^T)^T is several times faster than g @ W for short g in OpenBLAS
            dcols = (wmat.T @ g2.T).T.reshape(B, Ho, Wo, C, kh, kw)
            if kh == 1 and kw == 1 and padding == 0:
                gx = np.zeros_like(xd)
                gx[:, :, ::stride, ::stride] = dcols[..., 0, 0].transpose(0, 3, 1, 2)
            else:
                gxp = np.zeros((B, C, H + 2 * padding, W + 2 * padding), dtype=xd.dtype)
                for i in range(kh):
                    for j in range(kw):
                        gxp[:, :, i:i + stride * Ho:stride, j:j + stride * Wo:stride] += (
                            dcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
                        )
                gx = gxp[:, :, padding:padding + H, padding:padding + W]
        return gx, gw, gb

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _make(out, parents, bw, "conv2d")


# --------------------------------------------------------------------------
# resampling
# --------------------------------------------------------------------------


def bilinear_matrix(n_in: int, n_out: int, dtype=np.float64) -> np.ndarray:
    """(n_out, n_in) interpolation matrix with align-corners sampling."""
    m = np.zeros((n_out, n_in), dtype=dtype)
    if n_in == 1 or n_out == 1:
        m[:, 0] = 1.0
        return m
    pos = np.arange(n_out) * (n_in - 1) / (n_out - 1)
    lo = np.minimum(np.floor(pos).astype(int), n_in - 2)
    frac = pos - lo
    m[np.arange(n_out), lo] = 1.0 - frac
    m[np.arange(n_out), lo + 1] += frac
    return m


def bilinear_resize(x: Tensor, out_h: int, out_w: int) -> Tensor:
    if out_h < 1 or out_w < 1:
        raise ShapeError(f"bilinear_resize: target size must be positive, got {out_h}x{out_w}")
    B, C, H, W = x.shape
    if (H, W) == (out_h, out_w):
        return _make(x.data.copy(), (x,), lambda g: (g,), "bilinear_resize")
    ry = bilinear_matrix(H, out_h, x.dtype)
    rx = bilinear_matrix(W, out_w, x.dtype)
    _count(B * C * out_h * out_w * 4)
    out = np.matmul(np.matmul(ry, x.data), rx.T)

    def bw(g):
        return (np.matmul(np.matmul(ry.T, g), rx),)

    return _make(out, (x,), bw, "bilinear_resize")
