"""Dataset layout, patch sampling, augmentation, batching, guide dropout,
and a procedural synthesizer for paired thermal/RGB samples.

A dataset root holds three directories with matching filenames:

    <root>/ir_hr/<id>.png   single channel, the target
    <root>/ir_lr/<id>.png   single channel, exactly 1/8 size per axis
    <root>/rgb/<id>.png     three channels, same size as ir_hr

Images are normalized to [0, 1] float32 in channel-first layout.
"""

from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np
from PIL import Image

from .errors import DataError
from .resample import downsample_x8

SCALE = 8
SUBDIRS = ("ir_hr", "ir_lr", "rgb")


@dataclass
class Sample:
    ir_hr: np.ndarray  # [1, h, w]
    ir_lr: np.ndarray  # [1, h//8, w//8]
    rgb: np.ndarray    # [3, h, w]
    id: str


@dataclass
class Batch:
    ir_lr: np.ndarray          # [b, 1, p//8, p//8]
    rgb: np.ndarray            # [b, 3, p, p]
    ir_hr: np.ndarray          # [b, 1, p, p]
    guide_dropped: np.ndarray  # [b] bool; True <=> rgb slice zeroed


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 1
    batch: int = 16
    patch: int = 128
    p_th: float = 0.0
    t: int = 3300           # joint loss/lr switch epoch
    lr_hi: float = 4e-4
    lr_lo: float = 1e-4
    seed: int = 0
    t_loss: int | None = None  # override the loss switch alone
    t_lr: int | None = None    # override the lr switch alone
    eval_every: int = 0        # 0: evaluate only after the last epoch
    ckpt_every: int = 1
    augment: bool = True
    per_batch_dropout: bool = False
    clip_norm: float | None = None

    def __post_init__(self):
        if not 0.0 <= self.p_th <= 1.0:
            raise DataError(f"p_th must lie in [0, 1], got {self.p_th}")
        if self.patch <= 0 or self.patch % SCALE:
            raise DataError(f"patch {self.patch} must be a positive multiple of {SCALE}")
        if self.batch < 1:
            raise DataError(f"batch must be >= 1, got {self.batch}")
        if self.epochs < 0:
            raise DataError(f"epochs must be >= 0, got {self.epochs}")
        for name in ("t", "t_loss", "t_lr"):
            v = getattr(self, name)
            if v is not None and v < 0:
                raise DataError(f"{name} must be >= 0, got {v}")
        if self.lr_hi <= 0 or self.lr_lo <= 0:
            raise DataError("learning rates must be positive")
        if self.seed < 0:
            raise DataError(f"seed must be >= 0, got {self.seed}")
        if self.eval_every < 0 or self.ckpt_every < 1:
            raise DataError("bad eval_every/ckpt_every")
        if self.clip_norm is not None and self.clip_norm <= 0:
            raise DataError(f"clip_norm must be positive, got {self.clip_norm}")

    @property
    def loss_t(self) -> int:
        return self.t if self.t_loss is None else self.t_loss

    @property
    def lr_t(self) -> int:
        return self.t if self.t_lr is None else self.t_lr


# ---------------------------------------------------------------------------
# image files


def load_image(path: str) -> np.ndarray:
    """PNG -> float32 [c, h, w] in [0, 1]; 8-bit color, 8- or 16-bit gray."""
    try:
        img = Image.open(path)
        img.load()
    except OSError as exc:
        raise DataError(f"cannot read image {path}: {exc}") from exc
    arr = np.asarray(img)
    if arr.ndim == 2:
        peak = 65535.0 if arr.dtype == np.uint16 or img.mode.startswith("I") else 255.0
        out = (arr.astype(np.float64) / peak).astype(np.float32)
        return out[None]
    if arr.ndim == 3 and arr.shape[2] == 3 and arr.dtype == np.uint8:
        return (arr.astype(np.float64) / 255.0).astype(np.float32).transpose(2, 0, 1)
    raise DataError(f"unsupported image format in {path}: mode {img.mode}")


def save_image(path: str, arr: np.ndarray, bits: int = 8) -> None:
    """Write [1|3, h, w] values in [0, 1]; 16-bit only for single channel."""
    if arr.ndim != 3 or arr.shape[0] not in (1, 3):
        raise DataError(f"save_image expects [1|3, h, w], got {arr.shape}")
    if bits not in (8, 16):
        raise DataError(f"bits must be 8 or 16, got {bits}")
    if bits == 16 and arr.shape[0] != 1:
        raise DataError("16-bit output is only supported for single-channel images")
    peak = (1 << bits) - 1
    q = np.round(np.clip(arr, 0.0, 1.0) * peak)
    if arr.shape[0] == 1:
        img = Image.fromarray(q[0].astype(np.uint16 if bits == 16 else np.uint8))
    else:
        img = Image.fromarray(q.transpose(1, 2, 0).astype(np.uint8))
    img.save(path, format="PNG")


def load_dataset(root: str) -> list[Sample]:
    """All samples under ``root``, sorted by id; validates pairing and sizes."""
    listing = {}
    for sub in SUBDIRS:
        d = os.path.join(root, sub)
        if not os.path.isdir(d):
            raise DataError(f"dataset directory missing: {d}")
        listing[sub] = {f for f in os.listdir(d) if not f.startswith(".")}
    for sub in SUBDIRS:
        for name in sorted(listing["ir_hr"] ^ listing[sub]):
            raise DataError(f"unpaired file: {name} present in only one of ir_hr/{sub}")

    samples = []
    for name in sorted(listing["ir_hr"]):
        ir_hr = load_image(os.path.join(root, "ir_hr", name))
        ir_lr = load_image(os.path.join(root, "ir_lr", name))
        rgb = load_image(os.path.join(root, "rgb", name))
        sid = os.path.splitext(name)[0]
        if ir_hr.shape[0] != 1 or ir_lr.shape[0] != 1:
            raise DataError(f"{sid}: thermal images must be single channel")
        if rgb.shape[0] != 3:
            raise DataError(f"{sid}: guide must have 3 channels, got {rgb.shape[0]}")
        h, w = ir_hr.shape[1:]
        if rgb.shape[1:] != (h, w):
            raise DataError(f"{sid}: guide is {rgb.shape[1:]}, expected {(h, w)}")
        if h % SCALE or w % SCALE or ir_lr.shape[1:] != (h // SCALE, w // SCALE):
            raise DataError(f"{sid}: low-res is {ir_lr.shape[1:]}, "
                            f"expected {(h // SCALE, w // SCALE)} for {(h, w)}")
        samples.append(Sample(ir_hr=ir_hr, ir_lr=ir_lr, rgb=rgb, id=sid))
    return samples


# ---------------------------------------------------------------------------
# patches, augmentation, batching


def extract_patch(s: Sample, patch: int, rng: np.random.Generator):
    """Aligned random crop: (ir_lr, rgb, ir_hr) at hr_offset = 8 * lr_offset."""
    h, w = s.ir_hr.shape[1:]
    if patch % SCALE:
        raise DataError(f"patch {patch} not divisible by {SCALE}")
    if patch > min(h, w):
        raise DataError(f"patch {patch} exceeds image size {(h, w)} in sample {s.id}")
    lp = patch // SCALE
    ly = int(rng.integers(0, h // SCALE - lp + 1))
    lx = int(rng.integers(0, w // SCALE - lp + 1))
    hy, hx = SCALE * ly, SCALE * lx
    return (s.ir_lr[:, ly:ly + lp, lx:lx + lp],
            s.rgb[:, hy:hy + patch, hx:hx + patch],
            s.ir_hr[:, hy:hy + patch, hx:hx + patch])


def _dihedral(img: np.ndarray, j: int) -> np.ndarray:
    out = np.rot90(img, j % 4, axes=(1, 2))
    if j >= 4:
        out = out[:, :, ::-1]
    return np.ascontiguousarray(out)


def augment(triple, rng: np.random.Generator):
    """One random dihedral-group element applied to all three patches."""
    for p in triple:
        if p.shape[1] != p.shape[2]:
            raise DataError(f"augmentation needs square patches, got {p.shape}")
    j = int(rng.integers(0, 8))
    return tuple(_dihedral(p, j) for p in triple)


def apply_modality_dropout(batch: Batch, p_th: float, rng: np.random.Generator,
                           per_batch: bool = False) -> Batch:
    """Zero each guide with probability p_th and flag it; p_th = 0 never
    drops, p_th = 1 always drops."""
    if not 0.0 <= p_th <= 1.0:
        raise DataError(f"p_th must lie in [0, 1], got {p_th}")
    n = batch.rgb.shape[0]
    if per_batch:
        dropped = np.full(n, bool(rng.random() < p_th))
    else:
        dropped = np.array([bool(rng.random() < p_th) for _ in range(n)])
    rgb = batch.rgb.copy()
    rgb[dropped] = 0.0
    return Batch(ir_lr=batch.ir_lr, rgb=rgb, ir_hr=batch.ir_hr,
                 guide_dropped=dropped)


def make_batch(samples: list[Sample], indices, config: TrainConfig,
               rng: np.random.Generator) -> Batch:
    """Crop, augment, and stack the given samples, then apply guide dropout.

    Each sample consumes its own child RNG stream, so assembly order (or a
    parallel implementation) cannot change the result.
    """
    for i in indices:
        if not 0 <= i < len(samples):
            raise DataError(f"sample index {i} out of range 0..{len(samples) - 1}")
    streams = rng.spawn(len(indices) + 1)
    lrs, rgbs, hrs = [], [], []
    for child, i in zip(streams, indices):
        triple = extract_patch(samples[i], config.patch, child)
        if config.augment:
            triple = augment(triple, child)
        lrs.append(triple[0])
        rgbs.append(triple[1])
        hrs.append(triple[2])
    batch = Batch(ir_lr=np.stack(lrs).astype(np.float32),
                  rgb=np.stack(rgbs).astype(np.float32),
                  ir_hr=np.stack(hrs).astype(np.float32),
                  guide_dropped=np.zeros(len(indices), dtype=bool))
    return apply_modality_dropout(batch, config.p_th, streams[-1],
                                  per_batch=config.per_batch_dropout)


# ---------------------------------------------------------------------------
# synthetic data


def _render_field(rng: np.random.Generator, h: int, w: int) -> np.ndarray:
    """Smooth gradients + Gaussian blobs + sharp-ish edges, in [0.05, 0.95]."""
    yy, xx = np.mgrid[0:h, 0:w]
    y = yy / max(h - 1, 1)
    x = xx / max(w - 1, 1)
    f = rng.uniform(-0.5, 0.5) * x + rng.uniform(-0.5, 0.5) * y
    f = f + 0.3 * np.sin(2 * np.pi * (rng.uniform(0.5, 1.5) * x + rng.uniform(-1, 1) * y)
                         + rng.uniform(0, 2 * np.pi))
    for _ in range(int(rng.integers(5, 10))):
        cx, cy = rng.uniform(0, 1, 2)
        s = rng.uniform(0.03, 0.15)
        f = f + rng.uniform(-0.7, 0.7) * np.exp(-((x - cx) ** 2 + (y - cy) ** 2) / (2 * s * s))
    for _ in range(int(rng.integers(2, 5))):
        theta = rng.uniform(0, np.pi)
        c = rng.uniform(0.2, 0.8)
        d = np.cos(theta) * x + np.sin(theta) * y - c
        width = rng.uniform(0.003, 0.02)
        f = f + rng.uniform(-0.5, 0.5) / (1.0 + np.exp(-d / width))
    lo, hi = f.min(), f.max()
    return 0.05 + 0.9 * (f - lo) / max(hi - lo, 1e-9)


def synth_dataset(n: int, h: int, w: int, seed: int, root: str) -> list[str]:
    """Write n procedural samples under ``root``; byte-reproducible in seed.

    The guide channels are deterministic functions of the thermal field, so
    the full-resolution guide genuinely carries the detail lost in ir_lr.
    The stored ir_lr is computed from the quantized ir_hr exactly as a reader
    would see it, keeping the downsample self-check exact.
    """
    if h % SCALE or w % SCALE:
        raise DataError(f"size {h}x{w} must be divisible by {SCALE}")
    if n < 0:
        raise DataError(f"n must be >= 0, got {n}")
    for sub in SUBDIRS:
        os.makedirs(os.path.join(root, sub), exist_ok=True)
    ids = []
    for i in range(n):
        rng = np.random.default_rng([seed, i])
        f = _render_field(rng, h, w)
        sid = f"{i:05d}"
        save_image(os.path.join(root, "ir_hr", sid + ".png"), f[None], bits=16)
        # Round-trip through the 16-bit grid before downsampling so that
        # downsample_x8(load(ir_hr)) reproduces the stored ir_lr bit for bit.
        hr_q = (np.round(f * 65535.0) / 65535.0).astype(np.float32)
        lr = downsample_x8(hr_q[None])
        save_image(os.path.join(root, "ir_lr", sid + ".png"), lr, bits=16)
        rgb = np.stack([f, f * f, 1.0 - f])
        save_image(os.path.join(root, "rgb", sid + ".png"), rgb, bits=8)
        ids.append(sid)
    return ids
