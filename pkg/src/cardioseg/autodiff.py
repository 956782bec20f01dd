"""Reverse-mode automatic differentiation on dense numpy arrays.

A ``Tensor`` wraps an ndarray; every differentiable operation records an
entry on the active ``Tape`` (inputs, output, backward rule). ``backward``
replays the tape in exact reverse recording order, accumulating gradients
additively, so fan-out sums and a second ``backward`` call without zeroing
doubles the gradients.

Activations use the layout (batch, channels, height, width). Training runs
in float32; gradient checking constructs float64 tensors and the ops keep
whatever float dtype they are given.

Tapes are confined to a single thread. Long-running loops should scope each
iteration in its own ``with Tape():`` block so recorded operations (and the
intermediate arrays they retain) can be released.
"""

from __future__ import annotations

from typing import Callable, NamedTuple, Sequence

import numpy as np
from numpy.lib.stride_tricks import as_strided

from .errors import ShapeError

DEFAULT_DTYPE = np.float32


class Tensor:
    """A dense array plus gradient bookkeeping for the tape."""

    __slots__ = ("data", "grad", "requires_grad", "node_id", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(data)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(DEFAULT_DTYPE)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self.node_id: int | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False, name=self.name)

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a scalar, got shape {self.shape}")
        return float(self.data.reshape(()))

    def backward(self) -> None:
        backward(self)

    def sum(self) -> "Tensor":
        return tensor_sum(self)

    def mean(self) -> "Tensor":
        return tensor_mean(self)

    # arithmetic; `other` may be a Tensor of identical shape or a python scalar
    def __add__(self, other):
        if isinstance(other, Tensor):
            return add(self, other)
        return add_scalar(self, other)

    __radd__ = __add__

    def __neg__(self):
        return mul_scalar(self, -1.0)

    def __sub__(self, other):
        if isinstance(other, Tensor):
            return add(self, mul_scalar(other, -1.0))
        return add_scalar(self, -other)

    def __rsub__(self, other):
        return add_scalar(mul_scalar(self, -1.0), other)

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return mul_scalar(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            return div(self, other)
        return mul_scalar(self, 1.0 / other)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        tag = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={tuple(self.shape)}, dtype={self.data.dtype}{flag}{tag})"


class TapeOp(NamedTuple):
    inputs: tuple[Tensor, ...]
    output: Tensor
    # rule(grad_wrt_output) -> per-input gradients (None where not needed).
    # Rules must treat the incoming array as read-only and may return views;
    # the accumulator in backward() copies before mutating shared buffers.
    rule: Callable[[np.ndarray], tuple]


class Tape:
    """Ordered record of operations; backward replays it in reverse."""

    def __init__(self):
        self._ops: list[TapeOp] = []
        self._next_id = 0

    def __len__(self) -> int:
        return len(self._ops)

    @property
    def operations(self) -> tuple[TapeOp, ...]:
        return tuple(self._ops)

    def record(self, inputs: tuple[Tensor, ...], output: Tensor, rule) -> None:
        for t in inputs:
            if t.node_id is None:
                t.node_id = self._next_id
                self._next_id += 1
        output.node_id = self._next_id
        self._next_id += 1
        self._ops.append(TapeOp(inputs, output, rule))

    def clear(self) -> None:
        self._ops.clear()
        self._next_id = 0

    def __enter__(self) -> "Tape":
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, *exc) -> None:
        popped = _TAPE_STACK.pop()
        assert popped is self, "tape stack corrupted"


_TAPE_STACK: list[Tape] = [Tape()]
_GRAD_ENABLED = True


def active_tape() -> Tape:
    return _TAPE_STACK[-1]


class no_grad:
    """Disable recording; ops inside produce requires_grad=False outputs."""

    def __enter__(self):
        global _GRAD_ENABLED
        self._prev = _GRAD_ENABLED
        _GRAD_ENABLED = False
        return self

    def __exit__(self, *exc):
        global _GRAD_ENABLED
        _GRAD_ENABLED = self._prev


def _emit(data: np.ndarray, inputs: Sequence[Tensor], rule) -> Tensor:
    req = _GRAD_ENABLED and any(t.requires_grad for t in inputs)
    out = Tensor(data, requires_grad=req)
    if req:
        active_tape().record(tuple(inputs), out, rule)
    return out


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/dt into t.grad for every requires_grad tensor.

    Walks the active tape in exact reverse recording order. Gradients add
    across fan-out and across repeated backward calls; zero grads between
    steps with ``zero_grads``.
    """
    if loss.data.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")

    grads: dict[Tensor, np.ndarray] = {loss: np.ones_like(loss.data)}
    owned: set[Tensor] = set()

    def accumulate(t: Tensor, g: np.ndarray) -> None:
        cur = grads.get(t)
        if cur is None:
            grads[t] = g
        elif t in owned:
            cur += g
        else:
            grads[t] = cur + g  # copy before mutating: cur may alias another buffer
            owned.add(t)

    for op in reversed(active_tape()._ops):
        g_out = grads.pop(op.output, None)
        owned.discard(op.output)
        if g_out is None:
            continue
        if op.output.requires_grad:
            op.output.grad = g_out if op.output.grad is None else op.output.grad + g_out
        for t, g in zip(op.inputs, op.rule(g_out)):
            if g is not None:
                accumulate(t, g)

    # whatever remains was never produced on this tape: leaves (parameters, inputs)
    for t, g in grads.items():
        if t.requires_grad:
            t.grad = g if t.grad is None else t.grad + g


def zero_grads(tensors: Sequence[Tensor]) -> None:
    for t in tensors:
        t.grad = None


# ---------------------------------------------------------------------------
# elementwise and reduction ops


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"add shape mismatch: {a.shape} vs {b.shape}")
    na, nb = a.requires_grad, b.requires_grad
    return _emit(a.data + b.data, (a, b),
                 lambda g: (g if na else None, g if nb else None))


def add_scalar(a: Tensor, c: float) -> Tensor:
    return _emit(a.data + a.data.dtype.type(c), (a,), lambda g: (g,))


def mul(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"mul shape mismatch: {a.shape} vs {b.shape}")
    na, nb = a.requires_grad, b.requires_grad
    ad, bd = a.data, b.data
    return _emit(ad * bd, (a, b),
                 lambda g: (g * bd if na else None, g * ad if nb else None))


def mul_scalar(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return _emit(a.data * a.data.dtype.type(c), (a,), lambda g: (g * c,))


def div(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"div shape mismatch: {a.shape} vs {b.shape}")
    na, nb = a.requires_grad, b.requires_grad
    ad, bd = a.data, b.data
    out = ad / bd
    return _emit(out, (a, b),
                 lambda g: (g / bd if na else None, -g * out / bd if nb else None))


def log(a: Tensor) -> Tensor:
    ad = a.data
    return _emit(np.log(ad), (a,), lambda g: (g / ad,))


def clamp(a: Tensor, lo: float | None = None, hi: float | None = None) -> Tensor:
    ad = a.data
    out = np.clip(ad, lo, hi)
    inside = np.ones(ad.shape, dtype=bool)
    if lo is not None:
        inside &= ad >= lo
    if hi is not None:
        inside &= ad <= hi
    return _emit(out, (a,), lambda g: (g * inside,))


def relu(a: Tensor) -> Tensor:
    ad = a.data
    pos = ad > 0
    return _emit(np.where(pos, ad, ad.dtype.type(0)), (a,), lambda g: (g * pos,))


def sigmoid(a: Tensor) -> Tensor:
    ad = a.data
    out = np.empty_like(ad)
    pos = ad >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-ad[pos]))
    ex = np.exp(ad[~pos])  # stabilized: exp of non-positive values only
    out[~pos] = ex / (1.0 + ex)
    return _emit(out, (a,), lambda g: (g * out * (1.0 - out),))


def tensor_sum(a: Tensor) -> Tensor:
    shape, dt = a.shape, a.data.dtype
    return _emit(a.data.sum(dtype=dt), (a,),
                 lambda g: (np.full(shape, g.reshape(())[()], dtype=g.dtype),))


def tensor_mean(a: Tensor) -> Tensor:
    shape, dt = a.shape, a.data.dtype
    n = a.size
    return _emit(a.data.mean(dtype=dt).astype(dt), (a,),
                 lambda g: (np.full(shape, g.reshape(())[()] / n, dtype=g.dtype),))


def softmax_channels(a: Tensor) -> Tensor:
    """Per-pixel distribution over the channel axis of a (B,C,H,W) tensor."""
    if a.data.ndim != 4 or a.shape[1] < 2:
        raise ShapeError(f"softmax_channels needs (B,C>=2,H,W), got {a.shape}")
    ad = a.data
    e = np.exp(ad - ad.max(axis=1, keepdims=True))
    y = e / e.sum(axis=1, keepdims=True)

    def rule(g):
        dot = (g * y).sum(axis=1, keepdims=True)
        return (y * (g - dot),)

    return _emit(y, (a,), rule)


# ---------------------------------------------------------------------------
# structural ops


def concat_channels(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 4 or b.data.ndim != 4:
        raise ShapeError(f"concat_channels needs 4-d tensors, got {a.shape}, {b.shape}")
    ba, ca, ha, wa = a.shape
    bb, cb, hb, wb = b.shape
    if (ba, ha, wa) != (bb, hb, wb):
        raise ShapeError(f"concat_channels spatial/batch mismatch: {a.shape} vs {b.shape}")
    na, nb = a.requires_grad, b.requires_grad
    out = np.concatenate([a.data, b.data], axis=1)
    return _emit(out, (a, b),
                 lambda g: (g[:, :ca].copy() if na else None,
                            g[:, ca:].copy() if nb else None))


def select_channel(a: Tensor, c: int) -> Tensor:
    shape = a.shape

    def rule(g):
        full = np.zeros(shape, dtype=g.dtype)
        full[:, c] = g
        return (full,)

    return _emit(a.data[:, c].copy(), (a,), rule)


def take_batch(a: Tensor, indices) -> Tensor:
    idx = np.asarray(indices, dtype=np.intp)
    shape = a.shape

    def rule(g):
        full = np.zeros(shape, dtype=g.dtype)
        np.add.at(full, idx, g)
        return (full,)

    return _emit(a.data[idx].copy(), (a,), rule)


def global_avg_pool(a: Tensor) -> Tensor:
    """(B,C,H,W) -> (B,C) mean over the spatial axes."""
    if a.data.ndim != 4:
        raise ShapeError(f"global_avg_pool needs a 4-d tensor, got {a.shape}")
    _, _, h, w = a.shape
    n = h * w
    return _emit(a.data.mean(axis=(2, 3)), (a,),
                 lambda g: (np.broadcast_to((g / n)[:, :, None, None], a.shape),))


def upsample2x_nearest(a: Tensor) -> Tensor:
    """Replicate each value into a 2x2 block; backward sums each block."""
    if a.data.ndim != 4:
        raise ShapeError(f"upsample2x_nearest needs a 4-d tensor, got {a.shape}")
    b, c, h, w = a.shape
    out = a.data.repeat(2, axis=2).repeat(2, axis=3)
    return _emit(out, (a,),
                 lambda g: (g.reshape(b, c, h, 2, w, 2).sum(axis=(3, 5)),))


def maxpool2d(a: Tensor) -> Tensor:
    """2x2 max pooling with stride 2; gradient goes to the first maximum in
    row-major window order."""
    if a.data.ndim != 4:
        raise ShapeError(f"maxpool2d needs a 4-d tensor, got {a.shape}")
    b, c, h, w = a.shape
    if h % 2 or w % 2:
        raise ShapeError(f"maxpool2d needs even extents, got {h}x{w}")
    h2, w2 = h // 2, w // 2
    windows = a.data.reshape(b, c, h2, 2, w2, 2).transpose(0, 1, 2, 4, 3, 5)
    flat = windows.reshape(b, c, h2, w2, 4)
    idx = flat.argmax(axis=-1)  # argmax picks the first occurrence on ties
    out = np.take_along_axis(flat, idx[..., None], axis=-1)[..., 0]

    def rule(g):
        gw = np.zeros((b, c, h2, w2, 4), dtype=g.dtype)
        np.put_along_axis(gw, idx[..., None], g[..., None], axis=-1)
        return (gw.reshape(b, c, h2, w2, 2, 2).transpose(0, 1, 2, 4, 3, 5)
                .reshape(b, c, h, w),)

    return _emit(out, (a,), rule)


# ---------------------------------------------------------------------------
# convolution and affine ops

def conv_output_extent(extent: int, kernel: int, stride: int, dilation: int,
                       padding: int) -> int:
    return (extent + 2 * padding - dilation * (kernel - 1) - 1) // stride + 1


def _im2col(xp: np.ndarray, kh: int, kw: int, stride: int, dilation: int,
            ho: int, wo: int) -> np.ndarray:
    """Patch matrix (B*Ho*Wo, kh*kw*C) from a padded channels-last array."""
    b, _, _, c = xp.shape
    sb, sh, sw, sc = xp.strides
    view = as_strided(
        xp,
        shape=(b, ho, wo, kh, kw, c),
        strides=(sb, sh * stride, sw * stride, sh * dilation, sw * dilation, sc),
    )
    return view.reshape(b * ho * wo, kh * kw * c)


def conv2d(x: Tensor, w: Tensor, b: Tensor, stride: int = 1, dilation: int = 1,
           padding: int = 0) -> Tensor:
    """2-d cross-correlation over (B,Cin,H,W) with dilation support.

    Internally runs channels-last im2col + one GEMM; the logical layout of
    inputs and outputs stays (batch, channels, height, width).
    """
    if x.data.ndim != 4 or w.data.ndim != 4:
        raise ShapeError(f"conv2d needs 4-d input/weight, got {x.shape}, {w.shape}")
    bs, cin, h, wi = x.shape
    cout, cin_w, kh, kw = w.shape
    if cin != cin_w:
        raise ShapeError(
            f"conv2d channel mismatch: input has Cin={cin} (shape {x.shape}), "
            f"weight expects Cin={cin_w} (shape {w.shape})")
    if b.shape != (cout,):
        raise ShapeError(f"conv2d bias shape {b.shape} != ({cout},)")
    if kh < 1 or kw < 1 or dilation < 1 or stride < 1 or padding < 0:
        raise ShapeError("conv2d needs kernel/stride/dilation >= 1 and padding >= 0")
    eff_h = dilation * (kh - 1) + 1
    eff_w = dilation * (kw - 1) + 1
    if eff_h > h + 2 * padding or eff_w > wi + 2 * padding:
        raise ShapeError(
            f"effective kernel {eff_h}x{eff_w} exceeds padded input "
            f"{h + 2 * padding}x{wi + 2 * padding}")

    ho = conv_output_extent(h, kh, stride, dilation, padding)
    wo = conv_output_extent(wi, kw, stride, dilation, padding)

    xt = np.ascontiguousarray(x.data.transpose(0, 2, 3, 1))
    xp = np.pad(xt, ((0, 0), (padding, padding), (padding, padding), (0, 0)))
    cols = _im2col(xp, kh, kw, stride, dilation, ho, wo)
    wm = w.data.transpose(2, 3, 1, 0).reshape(kh * kw * cin, cout)
    out2 = cols @ wm
    out2 += b.data
    out = np.ascontiguousarray(out2.reshape(bs, ho, wo, cout).transpose(0, 3, 1, 2))

    need_x, need_w, need_b = x.requires_grad, w.requires_grad, b.requires_grad

    def rule(g):
        g2 = np.ascontiguousarray(g.transpose(0, 2, 3, 1)).reshape(bs * ho * wo, cout)
        gw = gb = gx = None
        if need_w:
            # rebuild cols instead of caching it: trades bandwidth for memory
            cols_b = _im2col(xp, kh, kw, stride, dilation, ho, wo)
            gw = (cols_b.T @ g2).reshape(kh, kw, cin, cout).transpose(3, 2, 0, 1)
            gw = np.ascontiguousarray(gw)
        if need_b:
            gb = g2.sum(axis=0)
        if need_x:
            prod = (g2 @ wm.T).reshape(bs, ho, wo, kh, kw, cin)
            gxp = np.zeros_like(xp)
            for i in range(kh):
                rows = slice(i * dilation, i * dilation + (ho - 1) * stride + 1, stride)
                for j in range(kw):
                    cols_sl = slice(j * dilation, j * dilation + (wo - 1) * stride + 1,
                                    stride)
                    gxp[:, rows, cols_sl, :] += prod[:, :, :, i, j, :]
            if padding:
                gxp = gxp[:, padding:-padding, padding:-padding, :]
            gx = np.ascontiguousarray(gxp.transpose(0, 3, 1, 2))
        return (gx, gw, gb)

    return _emit(out, (x, w, b), rule)


def dense(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """Affine map (B,F) @ (F,O) + (O,)."""
    if x.data.ndim != 2 or w.data.ndim != 2:
        raise ShapeError(f"dense needs 2-d input/weight, got {x.shape}, {w.shape}")
    if x.shape[1] != w.shape[0]:
        raise ShapeError(f"dense feature mismatch: input {x.shape} vs weight {w.shape}")
    if b.shape != (w.shape[1],):
        raise ShapeError(f"dense bias shape {b.shape} != ({w.shape[1]},)")
    xd, wd = x.data, w.data
    need_x, need_w, need_b = x.requires_grad, w.requires_grad, b.requires_grad

    def rule(g):
        return (g @ wd.T if need_x else None,
                xd.T @ g if need_w else None,
                g.sum(axis=0) if need_b else None)

    return _emit(xd @ wd + b.data, (x, w, b), rule)


# ---------------------------------------------------------------------------
# debug dump


def dump_tensor(t: Tensor, path) -> None:
    """Write the tensor as little-endian float32 raw bytes plus a one-line
    text header (shape, dtype) at <path>.hdr."""
    path = str(path)
    with open(path, "wb") as f:
        f.write(np.ascontiguousarray(t.data, dtype="<f4").tobytes())
    with open(path + ".hdr", "w") as f:
        f.write(f"shape={','.join(str(s) for s in t.shape)} dtype=float32\n")
