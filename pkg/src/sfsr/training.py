"""Adam optimizer, the training loop, evaluation, and checkpoint files.

Reproducibility contract: all randomness inside an epoch derives from the
generator seeded with [seed, epoch], so a run can be resumed from any epoch
boundary given only the serialized parameters, Adam moments, and the epoch
number; the subsequent trajectory is bit-identical to an uninterrupted run.

Checkpoint file layout (little-endian):

    magic b"SFSR1" | uint64 header length | JSON header | float32 blobs

The header carries both configs, the optimizer step counter, the resume
epoch, and a manifest of (name, shape) pairs; blobs follow in manifest
order: parameters, then (if present) Adam first and second moments.
"""

from __future__ import annotations

import csv
import json
import os
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass

import numpy as np

from .data import Sample, TrainConfig, make_batch
from .errors import CheckpointError, DataError, NumericError, ShapeError
from .metrics import LossSchedule, psnr, scheduled_loss, ssim
from .model import ModelConfig, forward, init_params, lift_params
from .tensor import Tape, Tensor, backward

MAGIC = b"SFSR1"
REPORT_HEADER = ["epoch", "loss", "loss_kind", "lr", "psnr_g", "ssim_g", "psnr_u", "ssim_u"]


@dataclass
class AdamState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    t: int = 0


def init_adam(params: dict[str, np.ndarray]) -> AdamState:
    return AdamState(m={k: np.zeros_like(p) for k, p in params.items()},
                     v={k: np.zeros_like(p) for k, p in params.items()},
                     t=0)


def adam_step(params: dict[str, np.ndarray], grads, state: AdamState, lr: float,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> None:
    """One bias-corrected Adam update, in place, in sorted parameter order."""
    state.t += 1
    c1 = 1.0 - beta1 ** state.t
    c2 = 1.0 - beta2 ** state.t
    for name in sorted(params):
        p = params[name]
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p)
        elif g.shape != p.shape:
            raise ShapeError(f"gradient shape {g.shape} != parameter shape "
                             f"{p.shape} for {name}")
        m = state.m[name]
        v = state.v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * (g * g)
        p -= lr * (m / c1) / (np.sqrt(v / c2) + eps)


def lr_at(epoch: int, cfg: TrainConfig) -> float:
    return cfg.lr_hi if epoch < cfg.lr_t else cfg.lr_lo


def clip_global_norm(grads: dict, clip: float) -> None:
    total = 0.0
    for g in grads.values():
        if g is not None:
            total += float(np.sum(g.astype(np.float64) ** 2))
    norm = np.sqrt(total)
    if norm > clip:
        scale = clip / norm
        for g in grads.values():
            if g is not None:
                g *= scale


# ---------------------------------------------------------------------------
# evaluation


def _worker_count() -> int:
    env = os.environ.get("SFSR_THREADS")
    if env is None:
        return 1
    try:
        return max(1, int(env))
    except ValueError:
        raise DataError(f"SFSR_THREADS must be an integer, got {env!r}") from None


def evaluate(params: dict[str, np.ndarray], model_cfg: ModelConfig,
             samples: list[Sample], mode: str) -> tuple[float, float]:
    """Mean full-image (PSNR, SSIM); unguided mode zeroes the guide.

    Outputs are clamped to [0, 1] before scoring. Per-sample work may fan
    out to SFSR_THREADS workers; results are reduced in index order, so the
    thread count never changes the value.
    """
    if mode not in ("guided", "unguided"):
        raise DataError(f"mode must be guided or unguided, got {mode!r}")
    if not samples:
        raise DataError("cannot evaluate an empty dataset")
    tensors = lift_params(params)

    def score(i: int):
        s = samples[i]
        guide = np.zeros_like(s.rgb) if mode == "unguided" else s.rgb
        out = forward(tensors, model_cfg, Tensor(s.ir_lr[None]),
                      Tensor(guide[None])).data[0, 0]
        out = np.clip(out, 0.0, 1.0)
        return psnr(out, s.ir_hr[0]), ssim(out, s.ir_hr[0])

    workers = _worker_count()
    if workers == 1:
        scores = [score(i) for i in range(len(samples))]
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            scores = list(pool.map(score, range(len(samples))))
    psnrs = [p for p, _ in scores]
    ssims = [s for _, s in scores]
    return float(np.mean(psnrs)), float(np.mean(ssims))


# ---------------------------------------------------------------------------
# checkpoints


@dataclass
class Checkpoint:
    params: dict[str, np.ndarray]
    model_cfg: ModelConfig
    train_cfg: TrainConfig
    state: AdamState | None
    next_epoch: int
    best_psnr: float | None


def save_checkpoint(path: str, params: dict[str, np.ndarray],
                    model_cfg: ModelConfig, train_cfg: TrainConfig,
                    state: AdamState | None = None, next_epoch: int = 0,
                    best_psnr: float | None = None) -> None:
    names = sorted(params)
    header = {"model": asdict(model_cfg), "train": asdict(train_cfg),
              "adam_t": state.t if state is not None else 0,
              "next_epoch": next_epoch, "best_psnr": best_psnr,
              "params": [[n, list(params[n].shape)] for n in names],
              "has_moments": state is not None}
    blob = json.dumps(header).encode("utf-8")
    chunks = [MAGIC, struct.pack("<Q", len(blob)), blob]
    chunks += [np.ascontiguousarray(params[n], dtype="<f4").tobytes() for n in names]
    if state is not None:
        chunks += [np.ascontiguousarray(state.m[n], dtype="<f4").tobytes() for n in names]
        chunks += [np.ascontiguousarray(state.v[n], dtype="<f4").tobytes() for n in names]
    tmp = path + ".tmp"
    with open(tmp, "wb") as f:
        for c in chunks:
            f.write(c)
    os.replace(tmp, path)


def load_checkpoint(path: str, expect_model_cfg: ModelConfig | None = None) -> Checkpoint:
    try:
        with open(path, "rb") as f:
            raw = f.read()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    if len(raw) < len(MAGIC) + 8 or raw[:len(MAGIC)] != MAGIC:
        raise CheckpointError(f"{path} is not a checkpoint (bad magic)")
    (hlen,) = struct.unpack_from("<Q", raw, len(MAGIC))
    body_at = len(MAGIC) + 8 + hlen
    if len(raw) < body_at:
        raise CheckpointError(f"{path} is truncated inside the header")
    try:
        header = json.loads(raw[len(MAGIC) + 8:body_at].decode("utf-8"))
        manifest = [(str(n), tuple(int(d) for d in shape))
                    for n, shape in header["params"]]
        model_cfg = ModelConfig(**header["model"])
        train_cfg = TrainConfig(**header["train"])
        has_moments = bool(header["has_moments"])
        adam_t = int(header["adam_t"])
        next_epoch = int(header["next_epoch"])
        best = header["best_psnr"]
    except (KeyError, TypeError, ValueError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path} has a corrupt header: {exc}") from exc

    if expect_model_cfg is not None:
        want, got = asdict(expect_model_cfg), asdict(model_cfg)
        for key in want:
            if want[key] != got[key]:
                raise CheckpointError(
                    f"{path} was written with {key}={got[key]}, expected {want[key]}")

    n_values = sum(int(np.prod(s)) for _, s in manifest)
    copies = 3 if has_moments else 1
    expect_len = body_at + 4 * n_values * copies
    if len(raw) != expect_len:
        raise CheckpointError(f"{path} has {len(raw)} bytes, expected {expect_len} "
                              "(truncated or trailing garbage)")

    def read_group(offset: int) -> tuple[dict[str, np.ndarray], int]:
        out = {}
        for name, shape in manifest:
            count = int(np.prod(shape))
            arr = np.frombuffer(raw, dtype="<f4", count=count, offset=offset)
            out[name] = arr.reshape(shape).astype(np.float32, copy=True)
            offset += 4 * count
        return out, offset

    params, offset = read_group(body_at)
    state = None
    if has_moments:
        m, offset = read_group(offset)
        v, offset = read_group(offset)
        state = AdamState(m=m, v=v, t=adam_t)
    return Checkpoint(params=params, model_cfg=model_cfg, train_cfg=train_cfg,
                      state=state, next_epoch=next_epoch,
                      best_psnr=None if best is None else float(best))


# ---------------------------------------------------------------------------
# report


@dataclass
class ReportRow:
    epoch: int
    loss: float
    loss_kind: str
    lr: float
    psnr_g: float | None = None
    ssim_g: float | None = None
    psnr_u: float | None = None
    ssim_u: float | None = None


def write_report(rows: list[ReportRow], path: str) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(REPORT_HEADER)
        for r in rows:
            w.writerow([r.epoch, repr(r.loss), r.loss_kind, repr(r.lr)]
                       + ["" if v is None else repr(v)
                          for v in (r.psnr_g, r.ssim_g, r.psnr_u, r.ssim_u)])


# ---------------------------------------------------------------------------
# the loop


def train(samples: list[Sample], model_cfg: ModelConfig, cfg: TrainConfig,
          out_dir: str | None = None, resume: Checkpoint | None = None,
          log=None):
    """Run the training loop; returns (params, report rows).

    Per epoch: seeded shuffle, batches through crop/augment/dropout, forward,
    the scheduled L1/L2 loss, backward, Adam at the scheduled rate. The
    dataset is evaluated (guided and unguided) every ``eval_every`` epochs
    and after the last one. With ``out_dir`` set, writes report.csv plus
    rolling ``last.ckpt`` and best-guided-PSNR ``best.ckpt``.
    """
    if not samples:
        raise DataError("cannot train on an empty dataset")
    if resume is not None:
        params = {k: v.copy() for k, v in resume.params.items()}
        state = resume.state if resume.state is not None else init_adam(params)
        start_epoch = resume.next_epoch
        best = -np.inf if resume.best_psnr is None else resume.best_psnr
    else:
        params = init_params(model_cfg, seed=cfg.seed)
        state = init_adam(params)
        start_epoch = 0
        best = -np.inf
    if out_dir:
        os.makedirs(out_dir, exist_ok=True)

    schedule = LossSchedule(cfg.loss_t)
    rows: list[ReportRow] = []
    for epoch in range(start_epoch, cfg.epochs):
        rng = np.random.default_rng([cfg.seed, epoch])
        perm = rng.permutation(len(samples))
        batches = [perm[i:i + cfg.batch] for i in range(0, len(perm), cfg.batch)]
        streams = rng.spawn(len(batches))
        kind, loss_fn = scheduled_loss(epoch, schedule)
        lr = lr_at(epoch, cfg)

        batch_losses = []
        for bi, (idx, brng) in enumerate(zip(batches, streams)):
            batch = make_batch(samples, [int(i) for i in idx], cfg, brng)
            tape = Tape()
            tparams = lift_params(params, tape)
            pred = forward(tparams, model_cfg, Tensor(batch.ir_lr), Tensor(batch.rgb))
            loss = loss_fn(pred, Tensor(batch.ir_hr))
            value = float(loss.data)
            if not np.isfinite(value):
                raise NumericError(f"non-finite loss {value} at epoch {epoch}, batch {bi}")
            backward(loss)
            grads = {k: t.grad for k, t in tparams.items()}
            tape.close()  # free the forward graph before the next batch
            if cfg.clip_norm is not None:
                clip_global_norm(grads, cfg.clip_norm)
            adam_step(params, grads, state, lr)
            batch_losses.append(value)

        row = ReportRow(epoch=epoch, loss=float(np.mean(batch_losses)),
                        loss_kind=kind, lr=lr)
        is_last = epoch == cfg.epochs - 1
        if is_last or (cfg.eval_every and (epoch + 1) % cfg.eval_every == 0):
            row.psnr_g, row.ssim_g = evaluate(params, model_cfg, samples, "guided")
            row.psnr_u, row.ssim_u = evaluate(params, model_cfg, samples, "unguided")
            if out_dir and row.psnr_g > best:
                best = row.psnr_g
                save_checkpoint(os.path.join(out_dir, "best.ckpt"), params,
                                model_cfg, cfg, state, epoch + 1, best)
        rows.append(row)
        if log is not None:
            log(row)
        if out_dir and ((epoch + 1) % cfg.ckpt_every == 0 or is_last):
            save_checkpoint(os.path.join(out_dir, "last.ckpt"), params,
                            model_cfg, cfg, state, epoch + 1,
                            None if best == -np.inf else best)

    if out_dir:
        write_report(rows, os.path.join(out_dir, "report.csv"))
    return params, rows
