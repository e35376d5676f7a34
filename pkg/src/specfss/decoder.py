"""Query decoder: cross large-kernel attention plus multi-scale attention gates.

Four blocks walk the pyramid deep to shallow. Every block fuses the support
prototype into the query features (depth-2 3D convolution + ReLU) and
multiplies in a large-kernel attention map; the three junctions gate the
upsampled deeper output with an additive-attention sigmoid gate built from
an atrous bank, then a 3x3 conv + BN + ReLU changes channels to the current
level. A 1x1 head emits single-channel logits at the shallowest resolution.

Both attention mechanisms can be switched off independently: no-CLKA passes
the fused features through untouched, no-MS-AG replaces the gate with
channel concatenation + 1x1 convolution.
"""

import json
import os
from dataclasses import dataclass, field

import numpy as np

from . import tensorkit as tk
from .errors import ValidationError
from .formats import read_npy, write_npy
from .spectral import PrototypeSet
from .tensorkit import BatchNormState, ConvSpec, Tensor

CKPT_FORMAT = "specfss-ckpt-v1"


def _he(rng, shape, fan_in, dtype):
    return Tensor(rng.standard_normal(shape) * np.sqrt(2.0 / fan_in),
                  dtype=dtype, requires_grad=True)


def _zeros(shape, dtype):
    return Tensor(np.zeros(shape), dtype=dtype, requires_grad=True)


def odd_ceil(a, b):
    """ceil(a/b) bumped to the next odd integer when even."""
    k = -(-a // b)
    return k if k % 2 == 1 else k + 1


@dataclass
class LKAParams:
    """Decomposed large-kernel attention: depthwise local, depthwise dilated,
    pointwise. Kernel sizes derive from the target size K and dilation d."""

    dw: Tensor                # [C,1,2d-1,2d-1]
    dwd: Tensor               # [C,1,k_dwd,k_dwd], dilation d
    pw: Tensor                # [C,C,1,1]
    kernel_size: int
    dilation: int

    @classmethod
    def create(cls, channels, kernel_size, dilation, rng, dtype=np.float32):
        if kernel_size < 1 or dilation < 1:
            raise ValidationError("LKA kernel size and dilation must be >= 1")
        k_local = 2 * dilation - 1
        k_dwd = odd_ceil(kernel_size, dilation)
        dw = _he(rng, (channels, 1, k_local, k_local), k_local * k_local, dtype)
        dwd = _he(rng, (channels, 1, k_dwd, k_dwd), k_dwd * k_dwd, dtype)
        pw = _he(rng, (channels, channels, 1, 1), channels, dtype)
        return cls(dw, dwd, pw, kernel_size, dilation)

    def support(self):
        """Impulse-response extent per axis: (2d-1) + d*(k_dwd - 1)."""
        k_dwd = self.dwd.shape[2]
        return (2 * self.dilation - 1) + self.dilation * (k_dwd - 1)


@dataclass
class CLKABlockParams:
    """Per-level fusion (3D conv collapsing the prototype/query pair) + LKA."""

    fusion_w: Tensor          # [C,2,C,1,1]
    fusion_b: Tensor          # [C]
    lka: LKAParams
    level: int

    @classmethod
    def create(cls, channels, level, kernel_size, dilation, rng, dtype=np.float32):
        w = _he(rng, (channels, 2, channels, 1, 1), 2 * channels, dtype)
        b = _zeros(channels, dtype)
        lka = LKAParams.create(channels, kernel_size, dilation, rng, dtype)
        return cls(w, b, lka, level)

    @property
    def channels(self):
        return self.fusion_w.shape[0]


@dataclass
class MSAGParams:
    """Additive attention gate with an atrous bank; emits one gate channel."""

    ce_w: Tensor              # [Ci,Ce,1,1]
    bn_e: BatchNormState
    cd_w: Tensor              # [Ci,Cd,1,1]
    bn_d: BatchNormState
    atrous_w: list            # each [Ci,Ci,3,3]
    atrous_b: list            # each [Ci]
    rates: tuple
    gate_w: Tensor            # [1,Ci,1,1]
    bn_g: BatchNormState

    @classmethod
    def create(cls, c_skip, c_deep, c_int, rates, rng, dtype=np.float32,
               bn_eps=1e-5, bn_momentum=0.1):
        ce = _he(rng, (c_int, c_skip, 1, 1), c_skip, dtype)
        cd = _he(rng, (c_int, c_deep, 1, 1), c_deep, dtype)
        at_w = [_he(rng, (c_int, c_int, 3, 3), 9 * c_int, dtype) for _ in rates]
        at_b = [_zeros(c_int, dtype) for _ in rates]
        gw = _he(rng, (1, c_int, 1, 1), c_int, dtype)
        mk_bn = lambda c: BatchNormState(c, dtype=dtype, eps=bn_eps, momentum=bn_momentum)
        return cls(ce, mk_bn(c_int), cd, mk_bn(c_int), at_w, at_b, tuple(rates),
                   gw, mk_bn(1))


@dataclass
class ConcatFuseParams:
    """Ablation junction: concat(skip, upsampled) + 1x1 conv to Cd channels."""

    w: Tensor                 # [Cd, Ce+Cd, 1, 1]
    b: Tensor                 # [Cd]

    @classmethod
    def create(cls, c_skip, c_deep, rng, dtype=np.float32):
        w = _he(rng, (c_deep, c_skip + c_deep, 1, 1), c_skip + c_deep, dtype)
        return cls(w, _zeros(c_deep, dtype))


@dataclass
class RefineParams:
    """3x3 conv + BN changing channels between levels after each junction."""

    w: Tensor                 # [C_level, C_deep, 3, 3]
    bn: BatchNormState

    @classmethod
    def create(cls, c_in, c_out, rng, dtype=np.float32, bn_eps=1e-5, bn_momentum=0.1):
        w = _he(rng, (c_out, c_in, 3, 3), 9 * c_in, dtype)
        return cls(w, BatchNormState(c_out, dtype=dtype, eps=bn_eps, momentum=bn_momentum))


@dataclass(frozen=True)
class DecoderConfig:
    channels: tuple = (16, 24, 32, 48)   # shallow -> deep, like the encoder
    lka_kernel: int = 21
    lka_dilation: int = 3
    atrous_rates: tuple = (1, 2, 3)
    use_clka: bool = True
    use_msag: bool = True
    bn_eps: float = 1e-5
    bn_momentum: float = 0.1

    def __post_init__(self):
        if len(self.channels) != 4:
            raise ValidationError("decoder needs exactly 4 pyramid levels")

    def gate_channels(self, c_skip):
        return max(c_skip // 2, 4)


@dataclass
class DecoderParams:
    """All trainable state, deep-first: blocks[0] is the deepest level."""

    config: DecoderConfig
    blocks: list              # 4 CLKABlockParams
    junctions: list           # 3 MSAGParams or ConcatFuseParams
    refines: list             # 3 RefineParams
    head_w: Tensor
    head_b: Tensor
    dtype: object = np.float32

    @classmethod
    def create(cls, config, rng, dtype=np.float32):
        deep_first = list(reversed(config.channels))          # [C4,C3,C2,C1]
        blocks = [CLKABlockParams.create(c, 4 - i, config.lka_kernel,
                                         config.lka_dilation, rng, dtype)
                  for i, c in enumerate(deep_first)]
        junctions, refines = [], []
        for i in range(3):
            c_deep = deep_first[i]
            c_skip = deep_first[i + 1]
            if config.use_msag:
                junctions.append(MSAGParams.create(
                    c_skip, c_deep, config.gate_channels(c_skip), config.atrous_rates,
                    rng, dtype, config.bn_eps, config.bn_momentum))
            else:
                junctions.append(ConcatFuseParams.create(c_skip, c_deep, rng, dtype))
            refines.append(RefineParams.create(c_deep, c_skip, rng, dtype,
                                               config.bn_eps, config.bn_momentum))
        c1 = config.channels[0]
        head_w = _he(rng, (1, c1, 1, 1), c1, dtype)
        head_b = _zeros(1, dtype)
        return cls(config, blocks, junctions, refines, head_w, head_b, dtype)

    def named_parameters(self):
        out = []
        for i, blk in enumerate(self.blocks):
            out.append((f"block{i}.fusion_w", blk.fusion_w))
            out.append((f"block{i}.fusion_b", blk.fusion_b))
            out.append((f"block{i}.lka.dw", blk.lka.dw))
            out.append((f"block{i}.lka.dwd", blk.lka.dwd))
            out.append((f"block{i}.lka.pw", blk.lka.pw))
        for i, jn in enumerate(self.junctions):
            if isinstance(jn, MSAGParams):
                out.append((f"junction{i}.ce_w", jn.ce_w))
                out.append((f"junction{i}.bn_e.gamma", jn.bn_e.gamma))
                out.append((f"junction{i}.bn_e.beta", jn.bn_e.beta))
                out.append((f"junction{i}.cd_w", jn.cd_w))
                out.append((f"junction{i}.bn_d.gamma", jn.bn_d.gamma))
                out.append((f"junction{i}.bn_d.beta", jn.bn_d.beta))
                for r, (w, b) in enumerate(zip(jn.atrous_w, jn.atrous_b)):
                    out.append((f"junction{i}.atrous{r}.w", w))
                    out.append((f"junction{i}.atrous{r}.b", b))
                out.append((f"junction{i}.gate_w", jn.gate_w))
                out.append((f"junction{i}.bn_g.gamma", jn.bn_g.gamma))
                out.append((f"junction{i}.bn_g.beta", jn.bn_g.beta))
            else:
                out.append((f"junction{i}.concat_w", jn.w))
                out.append((f"junction{i}.concat_b", jn.b))
        for i, rf in enumerate(self.refines):
            out.append((f"refine{i}.w", rf.w))
            out.append((f"refine{i}.bn.gamma", rf.bn.gamma))
            out.append((f"refine{i}.bn.beta", rf.bn.beta))
        out.append(("head_w", self.head_w))
        out.append(("head_b", self.head_b))
        return out

    def named_buffers(self):
        out = []
        for i, jn in enumerate(self.junctions):
            if isinstance(jn, MSAGParams):
                for tag, bn in (("bn_e", jn.bn_e), ("bn_d", jn.bn_d), ("bn_g", jn.bn_g)):
                    out.append((f"junction{i}.{tag}.running_mean", bn))
            # running_var handled alongside mean at save time
        for i, rf in enumerate(self.refines):
            out.append((f"refine{i}.bn.running_mean", rf.bn))
        return out

    def parameters(self):
        return [t for _, t in self.named_parameters()]


def _depthwise_same(x, weight, dilation):
    c, _, k, _ = weight.shape
    spec = ConvSpec(k, k, dilation=dilation, groups=c).with_same_padding()
    return tk.conv2d(x, weight, spec=spec)


def fuse_support_query(prototype, f_q, block):
    """F = ReLU(conv3d_fuse(stack(prototype plane, query)))."""
    if not isinstance(prototype, Tensor):
        prototype = Tensor(np.asarray(prototype), dtype=f_q.dtype)
    if prototype.ndim != 1 or prototype.shape[0] != f_q.shape[1]:
        raise ValidationError(
            f"prototype has {prototype.shape} channels, query level has {f_q.shape[1]}")
    if block.channels != f_q.shape[1]:
        raise ValidationError("fusion weights do not match this level's channels")
    plane = tk.tile_channels(prototype, f_q.shape[2], f_q.shape[3])
    stacked = tk.stack_pair(plane, f_q)
    return tk.relu(tk.conv3d_fuse(stacked, block.fusion_w, block.fusion_b))


def lka_attention(f, lka):
    """Attention = pointwise(dw_dilated(dw(F))); no output normalization."""
    a = _depthwise_same(f, lka.dw, 1)
    a = _depthwise_same(a, lka.dwd, lka.dilation)
    return tk.conv2d(a, lka.pw)


def clka_block(f, block, use_clka=True):
    """Output = Attention (x) F, or F itself when CLKA is ablated."""
    if not use_clka:
        return f
    return tk.mul(lka_attention(f, block.lka), f)


def msag_gate(x_e, x_d, params, training=False):
    """Gate the upsampled deep features by multi-scale additive attention.

    Gated path: q = C_at(relu(BN(Ce x_e) + BN(Cd x_d))) summed over atrous
    rates, gate = sigmoid(BN(C q)) broadcast over channels, output
    x_d (x) gate. ConcatFuseParams instead concatenates and mixes 1x1.
    """
    if x_e.shape[2:] != x_d.shape[2:]:
        raise ValidationError(f"msag_gate: spatial mismatch {x_e.shape} vs {x_d.shape}")
    mode = "train" if training else "infer"
    if isinstance(params, ConcatFuseParams):
        return tk.conv2d(tk.concat_channels([x_e, x_d]), params.w, params.b)
    pre = tk.add(tk.batchnorm2d(tk.conv2d(x_e, params.ce_w), params.bn_e, mode),
                 tk.batchnorm2d(tk.conv2d(x_d, params.cd_w), params.bn_d, mode))
    act = tk.relu(pre)
    q = None
    for rate, w, b in zip(params.rates, params.atrous_w, params.atrous_b):
        spec = ConvSpec(3, 3, dilation=rate).with_same_padding()
        branch = tk.conv2d(act, w, b, spec)
        q = branch if q is None else tk.add(q, branch)
    gate = tk.sigmoid(tk.batchnorm2d(tk.conv2d(q, params.gate_w), params.bn_g, mode))
    return tk.mul(x_d, gate)


def decoder_forward(prototypes, query_pyramid, params, training=False):
    """Run the 4-block decoder; returns logits [1,1,H_1,W_1].

    `query_pyramid` and `prototypes` are ordered deep (smallest) to shallow
    (largest); spatial sizes must strictly increase along the chain and
    prototype channels must match each level.
    """
    if len(query_pyramid) != 4:
        raise ValidationError(f"decoder needs 4 pyramid levels, got {len(query_pyramid)}")
    vectors = prototypes.vectors if isinstance(prototypes, PrototypeSet) else list(prototypes)
    if len(vectors) != 4:
        raise ValidationError("decoder needs 4 prototype vectors")
    sizes = [t.shape[2] * t.shape[3] for t in query_pyramid]
    if any(b <= a for a, b in zip(sizes, sizes[1:])):
        raise ValidationError("pyramid must be ordered deep (smallest) -> shallow (largest)")

    cfg = params.config
    x = None
    for i in range(4):
        f_q = query_pyramid[i]
        blk = params.blocks[i]
        e = clka_block(fuse_support_query(vectors[i], f_q, blk), blk, cfg.use_clka)
        if i == 0:
            x = e
            continue
        up = tk.bilinear_resize(x, f_q.shape[2], f_q.shape[3])
        g = msag_gate(e, up, params.junctions[i - 1], training)
        rf = params.refines[i - 1]
        spec = ConvSpec(3, 3).with_same_padding()
        x = tk.relu(tk.batchnorm2d(tk.conv2d(g, rf.w, spec=spec), rf.bn,
                                   "train" if training else "infer"))
    return tk.add(tk.conv2d(x, params.head_w), tk.tile_channels(
        params.head_b, x.shape[2], x.shape[3]))


def predict_mask(logits, threshold=0.5, out_h=None, out_w=None):
    """sigmoid(logits) resized to (out_h, out_w), strictly-greater threshold."""
    if logits.ndim != 4 or logits.shape[0] != 1 or logits.shape[1] != 1:
        raise ValidationError(f"predict_mask expects [1,1,H,W] logits, got {logits.shape}")
    if out_h is None:
        out_h, out_w = logits.shape[2], logits.shape[3]
    probs = tk.sigmoid(logits)
    probs = tk.bilinear_resize(probs, out_h, out_w)
    return probs.data[0, 0] > threshold


DICE_SMOOTH = 1.0


def seg_loss(logits, gt_mask):
    """Mean BCE-from-logits plus (1 - soft Dice); returns (loss, parts).

    gt_mask must be strictly binary at the logit resolution; parts reports
    the two terms separately for the training log.
    """
    gt = gt_mask.data if isinstance(gt_mask, Tensor) else np.asarray(gt_mask)
    gt = gt.reshape(logits.shape[2], logits.shape[3]) if gt.ndim == 2 else gt
    if gt.shape != tuple(logits.shape[2:]) and gt.shape != tuple(logits.shape):
        raise ValidationError(f"seg_loss: gt shape {gt.shape} vs logits {logits.shape}")
    vals = np.unique(gt)
    if not np.all(np.isin(vals, (0.0, 1.0))):
        raise ValidationError("seg_loss: gt mask must contain only 0/1")
    gt_t = Tensor(np.broadcast_to(gt, logits.shape).astype(logits.dtype.type))

    bce = tk.bce_with_logits(logits, gt_t)
    p = tk.sigmoid(logits)
    inter = tk.mul(p, gt_t).sum()
    denom = tk.add(tk.add(p.sum(), gt_t.sum()), DICE_SMOOTH)
    dice = tk.div(tk.add(tk.mul(inter, 2.0), DICE_SMOOTH), denom)
    dice_term = tk.sub(1.0, dice)
    loss = tk.add(bce, dice_term)
    return loss, {"bce": bce.item(), "dice": dice_term.item()}


# ---------------------------------------------------------------------------
# Checkpoints: directory of NPY arrays + JSON manifest


def save_params(params, out_dir, extra=None):
    os.makedirs(out_dir, exist_ok=True)
    names = []
    for name, t in params.named_parameters():
        write_npy(os.path.join(out_dir, name + ".npy"), t)
        names.append(name)
    buffers = []
    for name, bn in params.named_buffers():
        stem = name.rsplit(".", 1)[0]
        if bn.running_mean is None:
            raise ValidationError(f"cannot checkpoint uninitialized BN stats at {stem}")
        write_npy(os.path.join(out_dir, stem + ".running_mean.npy"), bn.running_mean)
        write_npy(os.path.join(out_dir, stem + ".running_var.npy"), bn.running_var)
        buffers.extend([stem + ".running_mean", stem + ".running_var"])
    cfg = params.config
    manifest = {
        "format": CKPT_FORMAT,
        "channels": list(cfg.channels),
        "lka_kernel": cfg.lka_kernel,
        "lka_dilation": cfg.lka_dilation,
        "atrous_rates": list(cfg.atrous_rates),
        "use_clka": cfg.use_clka,
        "use_msag": cfg.use_msag,
        "bn_eps": cfg.bn_eps,
        "bn_momentum": cfg.bn_momentum,
        "dtype": "float64" if params.dtype == np.float64 else "float32",
        "params": names,
        "buffers": buffers,
    }
    if extra:
        manifest.update(extra)
    with open(os.path.join(out_dir, "manifest.json"), "w") as fh:
        json.dump(manifest, fh, indent=1, sort_keys=True)
        fh.write("\n")
    return manifest


def load_params(ckpt_dir):
    """Rebuild DecoderParams from a checkpoint directory; returns (params, manifest)."""
    path = os.path.join(ckpt_dir, "manifest.json")
    try:
        with open(path) as fh:
            manifest = json.load(fh)
    except FileNotFoundError:
        raise ValidationError(f"no manifest.json in {ckpt_dir}") from None
    except json.JSONDecodeError as exc:
        raise ValidationError(f"{path}: invalid JSON: {exc}") from None
    if manifest.get("format") != CKPT_FORMAT:
        raise ValidationError(f"{path}: unknown checkpoint format {manifest.get('format')!r}")

    cfg = DecoderConfig(
        channels=tuple(manifest["channels"]),
        lka_kernel=manifest["lka_kernel"],
        lka_dilation=manifest["lka_dilation"],
        atrous_rates=tuple(manifest["atrous_rates"]),
        use_clka=manifest["use_clka"],
        use_msag=manifest["use_msag"],
        bn_eps=manifest["bn_eps"],
        bn_momentum=manifest["bn_momentum"],
    )
    dtype = np.float64 if manifest["dtype"] == "float64" else np.float32
    params = DecoderParams.create(cfg, np.random.default_rng(0), dtype)

    by_name = dict(params.named_parameters())
    if set(by_name) != set(manifest["params"]):
        raise ValidationError(f"{ckpt_dir}: parameter names do not match manifest")
    for name in manifest["params"]:
        t = read_npy(os.path.join(ckpt_dir, name + ".npy"))
        if t.shape != by_name[name].shape:
            raise ValidationError(f"{ckpt_dir}: shape mismatch for {name}")
        by_name[name].data[...] = t.data.astype(dtype)
    for name, bn in params.named_buffers():
        stem = name.rsplit(".", 1)[0]
        bn.running_mean = read_npy(
            os.path.join(ckpt_dir, stem + ".running_mean.npy")).data.astype(dtype)
        bn.running_var = read_npy(
            os.path.join(ckpt_dir, stem + ".running_var.npy")).data.astype(dtype)
    return params, manifest
