"""Dense tensors, the conv/norm/resize kernels, and a reverse-mode tape.

Conventions (fixed once, relied on everywhere):
  * image layout is [B, C, H, W], row-major float32 at runtime; float64 is
    reserved for gradient checking
  * convolution is cross-correlation (no kernel flip)
  * "same" padding = floor(effective_kernel / 2) per side; even effective
    kernels are rejected
  * bilinear resize uses the align-corners=false sample mapping with edge
    clamping

Ops are pure functions of their inputs. While a `Tape` is active (used as a
context manager) every op additionally records a backward closure, saving
its forward intermediates eagerly; `backward(tape, loss)` replays the
records once, in reverse, and returns gradients for the tensors marked
`requires_grad`.
"""

import math
from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import NumericalError, ValidationError

FLOAT_DTYPES = (np.float32, np.float64)


def _as_float_dtype(dtype):
    dt = np.dtype(dtype)
    if dt.type not in FLOAT_DTYPES:
        raise ValidationError(f"unsupported dtype {dt}; use float32 or float64")
    return dt


class Tensor:
    """Dense N-d array of float32 or float64 scalars.

    Immutable by convention after construction (ops never write into their
    inputs). `requires_grad` marks trainable parameters; intermediates get
    tracked automatically while a tape is active. Hashing/equality are by
    identity so tensors can key gradient maps.
    """

    __slots__ = ("data", "requires_grad", "name")

    def __init__(self, data, dtype=None, requires_grad=False, name=None):
        if dtype is not None:
            arr = np.asarray(data, dtype=_as_float_dtype(dtype))
        else:
            arr = np.asarray(data)
            if arr.dtype.type not in FLOAT_DTYPES:
                arr = arr.astype(np.float32)
        if any(s < 1 for s in arr.shape):
            raise ValidationError(f"all dimension sizes must be >= 1, got {arr.shape}")
        self.data = np.ascontiguousarray(arr)
        self.requires_grad = bool(requires_grad)
        self.name = name

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

    def item(self):
        if self.data.size != 1:
            raise ValidationError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def astype(self, dtype):
        return Tensor(self.data.astype(_as_float_dtype(dtype)), requires_grad=self.requires_grad, name=self.name)

    def sum(self):
        return tensor_sum(self)

    def mean(self):
        return tensor_mean(self)

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(_wrap(other, self), self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_wrap(other, self), self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(_wrap(other, self), self)

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def __repr__(self):
        grad = ", requires_grad=True" if self.requires_grad else ""
        nm = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={tuple(self.shape)}, dtype={self.data.dtype}{grad}{nm})"


def _wrap(value, like):
    """Promote a python scalar / ndarray to a constant Tensor with `like`'s dtype."""
    if isinstance(value, Tensor):
        return value
    return Tensor(np.asarray(value, dtype=like.dtype))


@dataclass(frozen=True)
class ConvSpec:
    """Geometry of one conv2d call: kernel, stride, dilation, groups, padding."""

    kernel_h: int
    kernel_w: int
    stride: int = 1
    dilation: int = 1
    groups: int = 1
    padding: int = 0

    def __post_init__(self):
        for field in ("kernel_h", "kernel_w", "stride", "dilation", "groups"):
            if int(getattr(self, field)) < 1:
                raise ValidationError(f"ConvSpec.{field} must be >= 1")
        if self.padding < 0:
            raise ValidationError("ConvSpec.padding must be >= 0")

    def effective_kernel(self):
        """Extent of the dilated kernel per axis: k + (k-1)(r-1)."""
        r = self.dilation
        return (self.kernel_h + (self.kernel_h - 1) * (r - 1),
                self.kernel_w + (self.kernel_w - 1) * (r - 1))

    def with_same_padding(self):
        """Padding that keeps spatial dims at stride 1. Odd effective kernels only."""
        eff_h, eff_w = self.effective_kernel()
        if eff_h % 2 == 0 or eff_w % 2 == 0:
            raise ValidationError(
                f"same padding needs odd effective kernels, got {eff_h}x{eff_w}")
        if eff_h != eff_w:
            raise ValidationError("same padding needs a square effective kernel")
        return ConvSpec(self.kernel_h, self.kernel_w, self.stride,
                        self.dilation, self.groups, eff_h // 2)


# ---------------------------------------------------------------------------
# Tape


class Tape:
    """Ordered record of primitive ops for one backward pass.

    Single-writer: one tape per training step. Entering the context pushes
    it on the active stack; ops append records in execution order, which is
    a topological order of the dataflow by construction.
    """

    def __init__(self):
        self.records = []
        self._tracked = set()

    def __enter__(self):
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        popped = _TAPE_STACK.pop()
        assert popped is self
        return False

    def is_tracked(self, t):
        return t.requires_grad or id(t) in self._tracked


_TAPE_STACK = []


def _active_tape():
    return _TAPE_STACK[-1] if _TAPE_STACK else None


class _Record:
    __slots__ = ("out", "inputs", "needs", "backward_fn")

    def __init__(self, out, inputs, needs, backward_fn):
        self.out = out
        self.inputs = inputs
        self.needs = needs
        self.backward_fn = backward_fn


def _emit(out, inputs, make_backward):
    """Record `out = op(inputs)` on the active tape if any input is tracked.

    `make_backward` is called lazily (only when recording) and must return
    `fn(grad_out, needs) -> list of per-input gradients or None`.
    """
    tape = _active_tape()
    if tape is None:
        return out
    needs = tuple(tape.is_tracked(t) for t in inputs)
    if not any(needs):
        return out
    tape._tracked.add(id(out))
    tape.records.append(_Record(out, inputs, needs, make_backward()))
    return out


def backward(tape, loss):
    """Reverse sweep over the tape; returns {parameter Tensor: gradient Tensor}.

    Gradients are produced for every tensor with requires_grad that the loss
    actually depends on; each recorded op is visited exactly once.
    """
    if not isinstance(loss, Tensor) or loss.size != 1:
        raise ValidationError("backward() needs a scalar loss tensor")
    if id(loss) not in tape._tracked and not loss.requires_grad:
        raise ValidationError("loss was not produced on this tape")
    grads = {id(loss): np.ones_like(loss.data)}
    holders = {id(loss): loss}
    for rec in reversed(tape.records):
        gout = grads.pop(id(rec.out), None)
        holders.pop(id(rec.out), None)
        if gout is None:
            continue
        gins = rec.backward_fn(gout, rec.needs)
        for t, need, g in zip(rec.inputs, rec.needs, gins):
            if not need or g is None:
                continue
            key = id(t)
            if key in grads:
                grads[key] = grads[key] + g
            else:
                grads[key] = g
                holders[key] = t
    out = {}
    for key, t in holders.items():
        if t.requires_grad:
            out[t] = Tensor(grads[key])
    return out


# ---------------------------------------------------------------------------
# Elementwise ops


def _unbroadcast(grad, shape):
    """Sum `grad` down to `shape` (inverse of numpy broadcasting)."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _check_broadcast(a, b, op):
    if a.dtype != b.dtype:
        raise ValidationError(f"{op}: mixed dtypes {a.dtype} vs {b.dtype}")
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ValidationError(f"{op}: incompatible shapes {a.shape} vs {b.shape}") from None


def add(a, b):
    if not isinstance(a, Tensor):
        a = _wrap(a, b)
    b = _wrap(b, a)
    _check_broadcast(a, b, "add")
    out = Tensor(a.data + b.data)

    def make():
        ash, bsh = a.shape, b.shape

        def back(g, needs):
            return (_unbroadcast(g, ash) if needs[0] else None,
                    _unbroadcast(g, bsh) if needs[1] else None)
        return back
    return _emit(out, (a, b), make)


def sub(a, b):
    if not isinstance(a, Tensor):
        a = _wrap(a, b)
    b = _wrap(b, a)
    _check_broadcast(a, b, "sub")
    out = Tensor(a.data - b.data)

    def make():
        ash, bsh = a.shape, b.shape

        def back(g, needs):
            return (_unbroadcast(g, ash) if needs[0] else None,
                    _unbroadcast(-g, bsh) if needs[1] else None)
        return back
    return _emit(out, (a, b), make)


def mul(a, b):
    if not isinstance(a, Tensor):
        a = _wrap(a, b)
    b = _wrap(b, a)
    _check_broadcast(a, b, "mul")
    out = Tensor(a.data * b.data)

    def make():
        ad, bd = a.data, b.data

        def back(g, needs):
            return (_unbroadcast(g * bd, ad.shape) if needs[0] else None,
                    _unbroadcast(g * ad, bd.shape) if needs[1] else None)
        return back
    return _emit(out, (a, b), make)


# spec-facing aliases: the elementwise product/sum used by the decoder
elementwise_mul = mul
elementwise_add = add


def div(a, b):
    if not isinstance(a, Tensor):
        a = _wrap(a, b)
    b = _wrap(b, a)
    _check_broadcast(a, b, "div")
    out = Tensor(a.data / b.data)

    def make():
        ad, bd = a.data, b.data

        def back(g, needs):
            ga = _unbroadcast(g / bd, ad.shape) if needs[0] else None
            gb = _unbroadcast(-g * ad / (bd * bd), bd.shape) if needs[1] else None
            return ga, gb
        return back
    return _emit(out, (a, b), make)


def relu(x):
    out = Tensor(np.maximum(x.data, 0))

    def make():
        mask = x.data > 0

        def back(g, needs):
            return (g * mask,)
        return back
    return _emit(out, (x,), make)


def sigmoid(x):
    """Logistic function, clamped into the open interval (0, 1).

    The clamp only touches deeply saturated entries (|x| beyond the float
    rounding point) so the documented strict-bounds contract holds.
    """
    s = 1.0 / (1.0 + np.exp(-np.clip(x.data, -60.0, 60.0)))
    tiny = np.finfo(x.dtype).tiny
    eps1 = np.finfo(x.dtype).epsneg
    s = np.clip(s, tiny, 1.0 - eps1)
    out = Tensor(s.astype(x.dtype, copy=False))

    def make():
        sd = out.data

        def back(g, needs):
            return (g * sd * (1.0 - sd),)
        return back
    return _emit(out, (x,), make)


def tanh(x):
    out = Tensor(np.tanh(x.data))

    def make():
        td = out.data

        def back(g, needs):
            return (g * (1.0 - td * td),)
        return back
    return _emit(out, (x,), make)


def tensor_sum(x):
    out = Tensor(np.asarray(x.data.sum(), dtype=x.dtype))

    def make():
        shape, dt = x.shape, x.dtype

        def back(g, needs):
            return (np.full(shape, g, dtype=dt),)
        return back
    return _emit(out, (x,), make)


def tensor_mean(x):
    out = Tensor(np.asarray(x.data.mean(), dtype=x.dtype))

    def make():
        shape, dt, n = x.shape, x.dtype, x.size

        def back(g, needs):
            return (np.full(shape, g / n, dtype=dt),)
        return back
    return _emit(out, (x,), make)


def tile_channels(v, h, w):
    """Broadcast a channel vector [C] (or [1,C,1,1]) to a plane [1,C,h,w]."""
    if v.ndim == 1:
        c = v.shape[0]
    elif v.ndim == 4 and v.shape[0] == 1 and v.shape[2] == v.shape[3] == 1:
        c = v.shape[1]
    else:
        raise ValidationError(f"tile_channels expects [C] or [1,C,1,1], got {v.shape}")
    out = Tensor(np.broadcast_to(v.data.reshape(1, c, 1, 1), (1, c, h, w)).copy())

    def make():
        vshape = v.shape

        def back(g, needs):
            return (g.sum(axis=(0, 2, 3)).reshape(vshape),)
        return back
    return _emit(out, (v,), make)


def stack_pair(a, b):
    """Stack two [B,C,H,W] tensors into a depth-2 pair [B,2,C,H,W]."""
    if a.shape != b.shape or a.ndim != 4:
        raise ValidationError(f"stack_pair: shapes {a.shape} vs {b.shape}")
    if a.dtype != b.dtype:
        raise ValidationError("stack_pair: mixed dtypes")
    out = Tensor(np.stack([a.data, b.data], axis=1))

    def make():
        def back(g, needs):
            return (g[:, 0] if needs[0] else None,
                    g[:, 1] if needs[1] else None)
        return back
    return _emit(out, (a, b), make)


def concat_channels(tensors):
    """Concatenate [B,C_i,H,W] tensors along the channel axis."""
    if not tensors:
        raise ValidationError("concat_channels of nothing")
    base = tensors[0]
    for t in tensors[1:]:
        if t.ndim != 4 or t.shape[0] != base.shape[0] or t.shape[2:] != base.shape[2:]:
            raise ValidationError("concat_channels: mismatched shapes")
        if t.dtype != base.dtype:
            raise ValidationError("concat_channels: mixed dtypes")
    out = Tensor(np.concatenate([t.data for t in tensors], axis=1))

    def make():
        sizes = [t.shape[1] for t in tensors]

        def back(g, needs):
            grads, start = [], 0
            for n, need in zip(sizes, needs):
                grads.append(g[:, start:start + n] if need else None)
                start += n
            return grads
        return back
    return _emit(out, tuple(tensors), make)


# ---------------------------------------------------------------------------
# Convolution


def _check_image(x, op):
    if x.ndim != 4:
        raise ValidationError(f"{op}: expected [B,C,H,W], got {x.shape}")


def _conv_geometry(h, w, spec):
    eff_h, eff_w = spec.effective_kernel()
    out_h = (h + 2 * spec.padding - eff_h) // spec.stride + 1
    out_w = (w + 2 * spec.padding - eff_w) // spec.stride + 1
    if h + 2 * spec.padding < eff_h or w + 2 * spec.padding < eff_w or out_h < 1 or out_w < 1:
        raise ValidationError(
            f"zero-size conv output: input {h}x{w}, pad {spec.padding}, "
            f"effective kernel {eff_h}x{eff_w}")
    return out_h, out_w


def _im2col(xd, spec, out_h, out_w):
    """[B,C,H,W] -> column matrix [B, G, out_h*out_w, (C/G)*kh*kw]."""
    b, c, _, _ = xd.shape
    p, s, r = spec.padding, spec.stride, spec.dilation
    kh, kw = spec.kernel_h, spec.kernel_w
    g = spec.groups
    if p:
        xd = np.pad(xd, ((0, 0), (0, 0), (p, p), (p, p)))
    eff_h, eff_w = spec.effective_kernel()
    win = sliding_window_view(xd, (eff_h, eff_w), axis=(2, 3))
    # output positions stride over axes 2,3; dilated taps stride inside the window
    win = win[:, :, ::s, ::s, ::r, ::r]
    cols = win.reshape(b, g, c // g, out_h, out_w, kh, kw)
    cols = cols.transpose(0, 1, 3, 4, 2, 5, 6).reshape(b, g, out_h * out_w, (c // g) * kh * kw)
    return np.ascontiguousarray(cols)


def _col2im(dcols, x_shape, spec, out_h, out_w):
    """Adjoint of _im2col: scatter column grads back onto the input."""
    b, c, h, w = x_shape
    p, s, r = spec.padding, spec.stride, spec.dilation
    kh, kw = spec.kernel_h, spec.kernel_w
    g = spec.groups
    dc = dcols.reshape(b, g, out_h, out_w, c // g, kh, kw).transpose(0, 1, 4, 2, 3, 5, 6)
    dc = dc.reshape(b, c, out_h, out_w, kh, kw)
    dxp = np.zeros((b, c, h + 2 * p, w + 2 * p), dtype=dcols.dtype)
    for i in range(kh):
        for j in range(kw):
            dxp[:, :, i * r: i * r + out_h * s: s,
                j * r: j * r + out_w * s: s] += dc[:, :, :, :, i, j]
    if p:
        return dxp[:, :, p:-p, p:-p]
    return dxp


def _validate_conv(x, weight, bias, spec):
    _check_image(x, "conv2d")
    if weight.ndim != 4:
        raise ValidationError(f"conv2d: weight must be [Cout,Cin/g,kh,kw], got {weight.shape}")
    cout, cin_g, kh, kw = weight.shape
    _, cin, _, _ = x.shape
    if (kh, kw) != (spec.kernel_h, spec.kernel_w):
        raise ValidationError(f"conv2d: weight kernel {kh}x{kw} != spec {spec.kernel_h}x{spec.kernel_w}")
    if cin % spec.groups or cout % spec.groups:
        raise ValidationError(f"conv2d: groups={spec.groups} must divide Cin={cin} and Cout={cout}")
    if cin_g != cin // spec.groups:
        raise ValidationError(f"conv2d: weight Cin/g={cin_g} but input gives {cin // spec.groups}")
    if x.dtype != weight.dtype or (bias is not None and bias.dtype != x.dtype):
        raise ValidationError("conv2d: mixed dtypes")
    if bias is not None and bias.shape != (cout,):
        raise ValidationError(f"conv2d: bias must be [Cout], got {bias.shape}")


def _conv2d_core(xd, wd, bd, spec):
    """Numeric conv2d on ndarrays; returns (out, back(g, needs) -> (dx, dw, db))."""
    b, cin, h, w = xd.shape
    cout = wd.shape[0]
    g = spec.groups
    out_h, out_w = _conv_geometry(h, w, spec)

    cols = _im2col(xd, spec, out_h, out_w)                        # [B,G,N,K]
    w_r = wd.reshape(g, cout // g, -1)                            # [G,Og,K]
    o = np.matmul(cols, w_r.transpose(0, 2, 1)[None])             # [B,G,N,Og]
    o = np.ascontiguousarray(o.transpose(0, 1, 3, 2)).reshape(b, cout, out_h, out_w)
    if bd is not None:
        o = o + bd.reshape(1, cout, 1, 1)

    def back(g_out, needs):
        dout_r = np.ascontiguousarray(
            g_out.reshape(b, g, cout // g, out_h * out_w).transpose(0, 1, 3, 2))
        dx = dw = db = None
        if needs[0]:
            dcols = np.matmul(dout_r, w_r[None])                  # [B,G,N,K]
            dx = _col2im(dcols, xd.shape, spec, out_h, out_w)
        if needs[1]:
            dw = np.einsum("bgnk,bgno->gok", cols, dout_r).reshape(wd.shape)
        if needs[2]:
            db = g_out.sum(axis=(0, 2, 3))
        return dx, dw, db

    return o, back


def conv2d(x, weight, bias=None, spec=None):
    """Grouped, strided, dilated cross-correlation.

    x [B,Cin,H,W], weight [Cout,Cin/groups,kh,kw], bias [Cout] or None.
    Output spatial dims: floor((H + 2p - (k + (k-1)(r-1))) / stride) + 1.
    """
    if spec is None:
        spec = ConvSpec(weight.shape[2], weight.shape[3])
    _validate_conv(x, weight, bias, spec)
    o, core_back = _conv2d_core(x.data, weight.data,
                                None if bias is None else bias.data, spec)
    out = Tensor(o)
    inputs = (x, weight) if bias is None else (x, weight, bias)

    def make():
        def back(g_out, needs):
            n3 = needs if len(needs) == 3 else (needs[0], needs[1], False)
            dx, dw, db = core_back(g_out, n3)
            return (dx, dw) if bias is None else (dx, dw, db)
        return back
    return _emit(out, inputs, make)


def conv3d_fuse(stacked, weight, bias=None, spec=None):
    """Collapse a (prototype, query) plane pair with a depth-2 3D convolution.

    stacked [B,2,C,H,W]; weight [Cout,2,Cin_eff,kh,kw] where Cin_eff is C
    (full channel mixing) or 1 (per-channel). Spatial padding is "same", so
    the output is [B,Cout,H,W]. Algebraically this is a 2D convolution over
    the 2C-channel concatenation of the planes.
    """
    if stacked.ndim != 5:
        raise ValidationError(f"conv3d_fuse: expected [B,2,C,H,W], got {stacked.shape}")
    b, depth, c, h, w = stacked.shape
    if weight.ndim != 5:
        raise ValidationError(f"conv3d_fuse: weight must be [Cout,2,Cin_eff,kh,kw], got {weight.shape}")
    cout, kd, cin_eff, kh, kw = weight.shape
    if kd != depth:
        raise ValidationError(f"conv3d_fuse: depth {depth} != kernel depth {kd}")
    if depth != 2:
        raise ValidationError(f"conv3d_fuse: depth axis must be 2, got {depth}")
    if cin_eff not in (c, 1):
        raise ValidationError(f"conv3d_fuse: Cin_eff must be {c} or 1, got {cin_eff}")
    if cin_eff == 1 and cout != c:
        raise ValidationError("conv3d_fuse: per-channel variant needs Cout == C")
    if stacked.dtype != weight.dtype or (bias is not None and bias.dtype != stacked.dtype):
        raise ValidationError("conv3d_fuse: mixed dtypes")

    if spec is None:
        spec = ConvSpec(kh, kw)
    if cin_eff == c:
        # plane-major flatten: channel index = plane*C + c
        x2 = stacked.data.reshape(b, 2 * c, h, w)
        w2 = weight.data.reshape(cout, 2 * c, kh, kw)
        spec2 = ConvSpec(kh, kw, spec.stride, spec.dilation, 1, 0).with_same_padding()

        def unflatten_x(gx):
            return gx.reshape(b, 2, c, h, w)
    else:
        # one group per channel: taps ordered (plane0_c, plane1_c)
        x2 = np.ascontiguousarray(stacked.data.transpose(0, 2, 1, 3, 4)).reshape(b, 2 * c, h, w)
        w2 = weight.data.reshape(cout, 2, kh, kw)
        spec2 = ConvSpec(kh, kw, spec.stride, spec.dilation, c, 0).with_same_padding()

        def unflatten_x(gx):
            return np.ascontiguousarray(gx.reshape(b, c, 2, h, w).transpose(0, 2, 1, 3, 4))

    o, core_back = _conv2d_core(x2, w2, None if bias is None else bias.data, spec2)
    out = Tensor(o)
    inputs = (stacked, weight) if bias is None else (stacked, weight, bias)

    def make():
        def back(g_out, needs):
            n3 = needs if len(needs) == 3 else (needs[0], needs[1], False)
            dx2, dw2, db = core_back(g_out, n3)
            dx = unflatten_x(dx2) if n3[0] else None
            dw = dw2.reshape(weight.shape) if n3[1] else None
            return (dx, dw) if bias is None else (dx, dw, db)
        return back
    return _emit(out, inputs, make)


# ---------------------------------------------------------------------------
# Batch norm


class BatchNormState:
    """Per-channel affine parameters plus running statistics.

    `running_mean`/`running_var` hold the biased batch statistics blended
    with `momentum` (new = (1-m)*old + m*batch); storing the biased variance
    makes momentum=1.0 reproduce train-mode output exactly in infer mode.
    """

    def __init__(self, channels, dtype=np.float32, eps=1e-5, momentum=0.1,
                 init_running=True):
        dt = _as_float_dtype(dtype)
        self.gamma = Tensor(np.ones(channels, dtype=dt), requires_grad=True)
        self.beta = Tensor(np.zeros(channels, dtype=dt), requires_grad=True)
        self.running_mean = np.zeros(channels, dtype=dt) if init_running else None
        self.running_var = np.ones(channels, dtype=dt) if init_running else None
        self.eps = float(eps)
        self.momentum = float(momentum)

    @property
    def channels(self):
        return self.gamma.shape[0]


def batchnorm2d(x, state, mode="train"):
    """Channel-wise batch normalization over (B, H, W).

    Train mode normalizes with batch statistics and updates the running
    stats in place; infer mode uses the stored running stats and raises if
    they were never initialized.
    """
    _check_image(x, "batchnorm2d")
    if mode not in ("train", "infer"):
        raise ValidationError(f"batchnorm2d: mode must be train|infer, got {mode!r}")
    c = x.shape[1]
    if state.channels != c:
        raise ValidationError(f"batchnorm2d: state has {state.channels} channels, input {c}")
    if x.dtype != state.gamma.dtype:
        raise ValidationError("batchnorm2d: dtype mismatch between input and state")

    gamma, beta = state.gamma, state.beta
    if mode == "train":
        mean = x.data.mean(axis=(0, 2, 3))
        var = x.data.var(axis=(0, 2, 3))
        m = state.momentum
        if state.running_mean is None:
            state.running_mean = mean.copy()
            state.running_var = var.copy()
        else:
            state.running_mean = ((1.0 - m) * state.running_mean + m * mean).astype(x.dtype)
            state.running_var = ((1.0 - m) * state.running_var + m * var).astype(x.dtype)
    else:
        if state.running_mean is None or state.running_var is None:
            raise ValidationError("batchnorm2d: infer mode with uninitialized running stats")
        mean = state.running_mean
        var = state.running_var

    ivstd = 1.0 / np.sqrt(var + state.eps)
    xhat = (x.data - mean.reshape(1, c, 1, 1)) * ivstd.reshape(1, c, 1, 1)
    o = gamma.data.reshape(1, c, 1, 1) * xhat + beta.data.reshape(1, c, 1, 1)
    out = Tensor(o.astype(x.dtype, copy=False))

    def make():
        n = x.shape[0] * x.shape[2] * x.shape[3]
        ivr = ivstd.reshape(1, c, 1, 1)
        gr = gamma.data.reshape(1, c, 1, 1)

        def back(g, needs):
            dgamma = (g * xhat).sum(axis=(0, 2, 3)) if needs[1] else None
            dbeta = g.sum(axis=(0, 2, 3)) if needs[2] else None
            dx = None
            if needs[0]:
                if mode == "train":
                    sum_g = g.sum(axis=(0, 2, 3), keepdims=True)
                    sum_gx = (g * xhat).sum(axis=(0, 2, 3), keepdims=True)
                    dx = (gr * ivr / n) * (n * g - sum_g - xhat * sum_gx)
                else:
                    dx = g * gr * ivr
                dx = dx.astype(x.dtype, copy=False)
            return dx, dgamma, dbeta
        return back
    return _emit(out, (x, gamma, beta), make)


# ---------------------------------------------------------------------------
# Bilinear resize


def _resize_weights(n_in, n_out, dtype):
    """Row-interpolation matrix [n_out, n_in], align-corners=false, edge clamp."""
    ratio = n_in / n_out
    dst = np.arange(n_out, dtype=np.float64)
    src = (dst + 0.5) * ratio - 0.5
    lo = np.floor(src).astype(np.int64)
    frac = src - lo
    i0 = np.clip(lo, 0, n_in - 1)
    i1 = np.clip(lo + 1, 0, n_in - 1)
    mat = np.zeros((n_out, n_in), dtype=np.float64)
    rows = np.arange(n_out)
    np.add.at(mat, (rows, i0), 1.0 - frac)
    np.add.at(mat, (rows, i1), frac)
    return mat.astype(dtype)


def bilinear_resize(x, out_h, out_w):
    """Resize [B,C,H,W] to [B,C,out_h,out_w]; exact passthrough at equal size."""
    _check_image(x, "bilinear_resize")
    if out_h < 1 or out_w < 1:
        raise ValidationError("bilinear_resize: output dims must be >= 1")
    _, _, h, w = x.shape
    ry = _resize_weights(h, out_h, x.dtype)
    rx = _resize_weights(w, out_w, x.dtype)
    t = np.tensordot(x.data, rx, axes=([3], [1]))      # [B,C,H,out_w]
    o = np.tensordot(t, ry, axes=([2], [1]))           # [B,C,out_w,out_h]
    out = Tensor(np.ascontiguousarray(o.transpose(0, 1, 3, 2)))

    def make():
        def back(g, needs):
            t2 = np.tensordot(g, rx, axes=([3], [0]))  # [B,C,out_h,W]
            dx = np.tensordot(t2, ry, axes=([2], [0])) # [B,C,W,H]
            return (np.ascontiguousarray(dx.transpose(0, 1, 3, 2)),)
        return back
    return _emit(out, (x,), make)


# ---------------------------------------------------------------------------
# Losses


def bce_with_logits(logits, targets):
    """Mean binary cross-entropy from logits, log-sum-exp stabilized."""
    t = _wrap(targets, logits)
    if t.shape != logits.shape:
        raise ValidationError(f"bce_with_logits: shapes {logits.shape} vs {t.shape}")
    z, y = logits.data, t.data
    per = np.maximum(z, 0) - z * y + np.log1p(np.exp(-np.abs(z)))
    out = Tensor(np.asarray(per.mean(), dtype=logits.dtype))

    def make():
        n = z.size

        def back(g, needs):
            s = 1.0 / (1.0 + np.exp(-z))
            dz = ((s - y) * (g / n)).astype(z.dtype, copy=False) if needs[0] else None
            dy = (-z * (g / n)).astype(z.dtype, copy=False) if needs[1] else None
            return dz, dy
        return back
    return _emit(out, (logits, t), make)


# ---------------------------------------------------------------------------
# Gradient checking


def grad_check(builder, seed, h=1e-5):
    """Compare tape gradients against central finite differences.

    `builder(rng)` must return `(params, forward)` where `forward()` is a
    deterministic float64 scalar-loss closure over `params`. Returns the max
    over all parameter entries of |analytic - numeric| / max(|a|, |n|, 1e-8).
    """
    rng = np.random.default_rng(seed)
    params, forward = builder(rng)
    for p in params:
        if p.dtype != np.float64:
            raise ValidationError("grad_check runs in 64-bit mode; got float32 parameter")
        if not p.requires_grad:
            raise ValidationError("grad_check parameter without requires_grad")

    with Tape() as tape:
        loss = forward()
    if loss.size != 1:
        raise ValidationError("grad_check builder must produce a scalar loss")
    grads = backward(tape, loss)
    if not math.isfinite(loss.item()):
        raise NumericalError("grad_check: non-finite loss")

    worst = 0.0
    for p in params:
        analytic = grads[p].data if p in grads else np.zeros_like(p.data)
        if not np.all(np.isfinite(analytic)):
            raise NumericalError("grad_check: non-finite analytic gradient")
        flat = p.data.reshape(-1)
        aflat = analytic.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            lp = forward().item()
            flat[i] = orig - h
            lm = forward().item()
            flat[i] = orig
            if not (math.isfinite(lp) and math.isfinite(lm)):
                raise NumericalError("grad_check: non-finite loss during finite differences")
            numeric = (lp - lm) / (2.0 * h)
            denom = max(abs(aflat[i]), abs(numeric), 1e-8)
            worst = max(worst, abs(aflat[i] - numeric) / denom)
    return worst
