"""Two-branch guided super-resolution network.

The low-resolution thermal frame is bicubically upsampled to guide
resolution, then both it and the RGB guide pass through a 3x3 conv and a
chain of windowed self-attention units. A stack of fusion blocks follows:
inside each, every branch first refines itself (intra unit) and then queries
the other branch's refined features with cross-attention (inter unit, both
directions reading the pre-cross features so the exchange is symmetric).
The branches are concatenated, merged by a 3x3 conv, refined by further
self-attention units, and a small conv head predicts a residual that is
added to the bicubic upsample. The final conv starts at zero, so a freshly
initialised model is exactly the bicubic baseline.

Parameters live in a flat name -> array dict. Attention runs channel-last;
convs run channel-first; stages transpose at the boundaries. Spatial sizes
are reflect-padded up to window multiples on entry and cropped at the end.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ShapeError
from .resample import bicubic_resize_t
from .swin import BlockParams, AttnParams, WindowSpec, cross_stl_block, stl_block
from .tensor import Tensor


@dataclass(frozen=True)
class ModelConfig:
    scale: int = 8
    embed: int = 60
    heads: int = 6
    window: int = 9
    n_stl: int = 2      # shallow self-attention units per branch
    n_acf: int = 3      # fusion blocks
    n_rec: int = 3      # reconstruction self-attention units
    stl_depth: int = 6  # attention blocks per unit
    mlp_ratio: float = 2.0
    ir_channels: int = 1
    guide_channels: int = 3

    def __post_init__(self):
        if self.scale < 1:
            raise ShapeError(f"scale must be >= 1, got {self.scale}")
        if self.embed < 1 or self.heads < 1 or self.embed % self.heads:
            raise ShapeError(f"embed {self.embed} must be a positive multiple of heads {self.heads}")
        if self.window < 1:
            raise ShapeError(f"window must be >= 1, got {self.window}")
        for name in ("n_stl", "n_acf", "n_rec", "stl_depth"):
            if getattr(self, name) < 1:
                raise ShapeError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.ir_channels < 1 or self.guide_channels < 1:
            raise ShapeError("channel counts must be >= 1")
        hid = self.embed * self.mlp_ratio
        if hid <= 0 or abs(hid - round(hid)) > 1e-9:
            raise ShapeError(f"embed * mlp_ratio = {hid} must be a positive integer")

    @property
    def hidden(self) -> int:
        return int(round(self.embed * self.mlp_ratio))


# ---------------------------------------------------------------------------
# parameter table


def _block_specs(prefix: str, cfg: ModelConfig, cross: bool):
    e, hid = cfg.embed, cfg.hidden
    rows = (2 * cfg.window - 1) ** 2
    specs = [(f"{prefix}.ln1.g", (e,), "one"), (f"{prefix}.ln1.b", (e,), "zero")]
    if cross:
        specs += [(f"{prefix}.lnkv.g", (e,), "one"), (f"{prefix}.lnkv.b", (e,), "zero")]
    for leaf in ("wq", "wk", "wv", "wo"):
        specs += [(f"{prefix}.att.{leaf}", (e, e), "trunc"),
                  (f"{prefix}.att.b{leaf[1]}", (e,), "zero")]
    specs += [(f"{prefix}.att.bias_table", (rows, cfg.heads), "trunc"),
              (f"{prefix}.ln2.g", (e,), "one"), (f"{prefix}.ln2.b", (e,), "zero"),
              (f"{prefix}.mlp.w1", (e, hid), "trunc"), (f"{prefix}.mlp.b1", (hid,), "zero"),
              (f"{prefix}.mlp.w2", (hid, e), "trunc"), (f"{prefix}.mlp.b2", (e,), "zero")]
    return specs


def _unit_specs(prefix: str, cfg: ModelConfig, cross: bool):
    specs = []
    for k in range(cfg.stl_depth):
        specs += _block_specs(f"{prefix}.b{k}", cfg, cross)
    return specs


def param_specs(cfg: ModelConfig):
    """Ordered (name, shape, init_kind) for every parameter in the model."""
    e = cfg.embed
    specs = [("shallow.ir.conv.w", (e, cfg.ir_channels, 3, 3), "he"),
             ("shallow.ir.conv.b", (e,), "zero"),
             ("shallow.rgb.conv.w", (e, cfg.guide_channels, 3, 3), "he"),
             ("shallow.rgb.conv.b", (e,), "zero")]
    for branch in ("ir", "rgb"):
        for u in range(cfg.n_stl):
            specs += _unit_specs(f"shallow.{branch}.stl{u}", cfg, cross=False)
    for l in range(cfg.n_acf):
        for branch in ("ir", "rgb"):
            specs += _unit_specs(f"acf{l}.{branch}.intra", cfg, cross=False)
            specs += _unit_specs(f"acf{l}.{branch}.inter", cfg, cross=True)
    specs += [("merge.conv.w", (e, 2 * e, 3, 3), "he"), ("merge.conv.b", (e,), "zero")]
    for u in range(cfg.n_rec):
        specs += _unit_specs(f"rec.stl{u}", cfg, cross=False)
    specs += [("rec.conv1.w", (e, e, 3, 3), "he"), ("rec.conv1.b", (e,), "zero"),
              ("rec.conv2.w", (e, e, 3, 3), "he"), ("rec.conv2.b", (e,), "zero"),
              ("rec.conv3.w", (cfg.ir_channels, e, 3, 3), "final"),
              ("rec.conv3.b", (cfg.ir_channels,), "zero")]
    return specs


def count_params(cfg: ModelConfig) -> int:
    """Closed-form total parameter count; cross-checked against init sizes."""
    e, hid, heads = cfg.embed, cfg.hidden, cfg.heads
    rows = (2 * cfg.window - 1) ** 2
    self_block = 4 * e + 4 * (e * e + e) + rows * heads + 2 * e * hid + hid + e
    cross_block = self_block + 2 * e
    self_units = 2 * cfg.n_stl + 2 * cfg.n_acf + cfg.n_rec
    cross_units = 2 * cfg.n_acf
    blocks = cfg.stl_depth * (self_units * self_block + cross_units * cross_block)
    convs = (e * cfg.ir_channels * 9 + e) + (e * cfg.guide_channels * 9 + e) \
        + (e * 2 * e * 9 + e) + 2 * (e * e * 9 + e) \
        + (cfg.ir_channels * e * 9 + cfg.ir_channels)
    return blocks + convs


def _trunc_normal(rng: np.random.Generator, shape, std: float = 0.02) -> np.ndarray:
    # Redraw anything outside +-2 std until none remain.
    out = rng.normal(0.0, std, size=shape)
    bad = np.abs(out) > 2 * std
    while bad.any():
        out[bad] = rng.normal(0.0, std, size=int(bad.sum()))
        bad = np.abs(out) > 2 * std
    return out


def init_params(cfg: ModelConfig, seed: int = 0, dtype=np.float32) -> dict[str, np.ndarray]:
    """Fresh parameter dict; deterministic in (cfg, seed)."""
    rng = np.random.default_rng(seed)
    params: dict[str, np.ndarray] = {}
    for name, shape, kind in param_specs(cfg):
        if kind == "zero" or kind == "final":
            arr = np.zeros(shape)
        elif kind == "one":
            arr = np.ones(shape)
        elif kind == "trunc":
            arr = _trunc_normal(rng, shape)
        elif kind == "he":
            fan_in = shape[1] * shape[2] * shape[3]
            arr = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape)
        else:
            raise ValueError(f"unknown init kind {kind}")
        params[name] = np.ascontiguousarray(arr, dtype=dtype)
    return params


def lift_params(arrays: dict[str, np.ndarray], tape=None) -> dict[str, Tensor]:
    """Wrap raw arrays as Tensors, as tape leaves when a tape is given."""
    if tape is None:
        return {k: Tensor(v) for k, v in arrays.items()}
    return {k: tape.leaf(v) for k, v in arrays.items()}


# ---------------------------------------------------------------------------
# forward pass


def _block_params(params: dict[str, Tensor], prefix: str, heads: int,
                  cross: bool) -> BlockParams:
    def g(leaf):
        return params[f"{prefix}.{leaf}"]

    attn = AttnParams(heads=heads, wq=g("att.wq"), bq=g("att.bq"),
                      wk=g("att.wk"), bk=g("att.bk"), wv=g("att.wv"), bv=g("att.bv"),
                      wo=g("att.wo"), bo=g("att.bo"), bias_table=g("att.bias_table"))
    return BlockParams(ln1_g=g("ln1.g"), ln1_b=g("ln1.b"), attn=attn,
                       ln2_g=g("ln2.g"), ln2_b=g("ln2.b"),
                       fc1_w=g("mlp.w1"), fc1_b=g("mlp.b1"),
                       fc2_w=g("mlp.w2"), fc2_b=g("mlp.b2"),
                       lnkv_g=g("lnkv.g") if cross else None,
                       lnkv_b=g("lnkv.b") if cross else None)


def _run_unit(x: Tensor, params, cfg: ModelConfig, prefix: str, parity: int,
              kv: Tensor | None = None) -> Tensor:
    for k in range(cfg.stl_depth):
        shift = 0 if (parity + k) % 2 == 0 else cfg.window // 2
        spec = WindowSpec(cfg.window, shift)
        bp = _block_params(params, f"{prefix}.b{k}", cfg.heads, cross=kv is not None)
        if kv is None:
            x = stl_block(x, bp, spec)
        else:
            x = cross_stl_block(x, kv, bp, spec)
    return x


def _nhwc(x: Tensor) -> Tensor:
    return T.transpose(x, (0, 2, 3, 1))


def _nchw(x: Tensor) -> Tensor:
    return T.transpose(x, (0, 3, 1, 2))


def pad_to_window(x: Tensor, window: int) -> Tensor:
    """Reflect-pad a channel-last grid up to the next window multiple."""
    _, h, w, _ = x.shape
    ph = (-h) % window
    pw = (-w) % window
    return T.pad2d_reflect(x, ph, pw)


def shallow_extract(params, cfg: ModelConfig, ir_up: Tensor, guide: Tensor):
    """Conv + self-attention chains on the padded inputs; returns channel-last
    feature pairs (thermal, guide)."""
    fi = _nhwc(T.conv2d(ir_up, params["shallow.ir.conv.w"], params["shallow.ir.conv.b"]))
    fg = _nhwc(T.conv2d(guide, params["shallow.rgb.conv.w"], params["shallow.rgb.conv.b"]))
    for u in range(cfg.n_stl):
        parity = u * cfg.stl_depth
        fi = _run_unit(fi, params, cfg, f"shallow.ir.stl{u}", parity)
        fg = _run_unit(fg, params, cfg, f"shallow.rgb.stl{u}", parity)
    return fi, fg


def acf_block(params, cfg: ModelConfig, l: int, fi: Tensor, fg: Tensor):
    """One fusion block: per-branch self refinement, then symmetric
    cross-attention where each branch queries the other's refined features."""
    parity = (cfg.n_stl + 2 * l) * cfg.stl_depth
    ai = _run_unit(fi, params, cfg, f"acf{l}.ir.intra", parity)
    ag = _run_unit(fg, params, cfg, f"acf{l}.rgb.intra", parity)
    parity += cfg.stl_depth
    bi = _run_unit(ai, params, cfg, f"acf{l}.ir.inter", parity, kv=ag)
    bg = _run_unit(ag, params, cfg, f"acf{l}.rgb.inter", parity, kv=ai)
    return bi, bg


def fuse_and_reconstruct(params, cfg: ModelConfig, fi: Tensor, fg: Tensor) -> Tensor:
    """Concatenate branches, merge, refine, and predict the channel-first
    residual on the padded canvas."""
    cat = _nchw(T.concat([fi, fg], axis=-1))
    x = _nhwc(T.conv2d(cat, params["merge.conv.w"], params["merge.conv.b"]))
    for u in range(cfg.n_rec):
        x = _run_unit(x, params, cfg, f"rec.stl{u}", parity=u * cfg.stl_depth)
    x = T.conv2d(_nchw(x), params["rec.conv1.w"], params["rec.conv1.b"])
    x = T.conv2d(T.gelu(x), params["rec.conv2.w"], params["rec.conv2.b"])
    return T.conv2d(T.gelu(x), params["rec.conv3.w"], params["rec.conv3.b"])


def forward(params: dict[str, Tensor], cfg: ModelConfig, ir_lr: Tensor,
            guide: Tensor) -> Tensor:
    """Super-resolve [b, c_ir, h, w] thermal input with a [b, c_g, s*h, s*w]
    guide; returns [b, c_ir, s*h, s*w]."""
    ir_lr = T.as_tensor(ir_lr)
    guide = T.as_tensor(guide)
    b, ci, h, w = ir_lr.shape
    bg, cg, gh, gw = guide.shape
    if ci != cfg.ir_channels or cg != cfg.guide_channels:
        raise ShapeError(f"channel mismatch: got ({ci},{cg}), "
                         f"config expects ({cfg.ir_channels},{cfg.guide_channels})")
    if bg != b:
        raise ShapeError(f"batch mismatch: {b} vs {bg}")
    if (gh, gw) != (cfg.scale * h, cfg.scale * w):
        raise ShapeError(f"guide is {gh}x{gw}, expected {cfg.scale * h}x{cfg.scale * w} "
                         f"for scale {cfg.scale}")
    up = bicubic_resize_t(ir_lr, gh, gw)
    ir_pad = _nchw(pad_to_window(_nhwc(up), cfg.window))
    guide_pad = _nchw(pad_to_window(_nhwc(guide), cfg.window))
    fi, fg = shallow_extract(params, cfg, ir_pad, guide_pad)
    for l in range(cfg.n_acf):
        fi, fg = acf_block(params, cfg, l, fi, fg)
    residual = fuse_and_reconstruct(params, cfg, fi, fg)
    residual = _nchw(T.crop2d(_nhwc(residual), gh, gw))
    return T.add(residual, up)
