"""Command-line interface.

Subcommands: synth, train, infer, eval, gradcheck, sweep. Exit codes:
0 success, 1 invalid input or configuration, 2 runtime/numeric failure.
Training options may come from a flat key=value config file; explicit
command-line flags win over file values, and unknown keys are rejected.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import replace

import numpy as np

from . import tensor as T
from .data import (TrainConfig, load_dataset, load_image, save_image,
                   synth_dataset)
from .errors import DataError, NumericError
from .metrics import l2_loss
from .model import ModelConfig, forward, init_params, lift_params
from .tensor import Tensor, finite_diff_check
from .training import (evaluate, load_checkpoint, save_checkpoint, train,
                       write_report)

OP_THRESHOLD = 1e-6
MODEL_THRESHOLD = 1e-4


class _Parser(argparse.ArgumentParser):
    """argparse exits with status 2 on bad flags; here that's a validation
    failure, which the interface contract maps to exit status 1."""

    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        sys.exit(1)


# ---------------------------------------------------------------------------
# config plumbing


def _bool(text: str) -> bool:
    low = text.strip().lower()
    if low in ("true", "1", "yes"):
        return True
    if low in ("false", "0", "no"):
        return False
    raise ValueError(f"expected a boolean, got {text!r}")


def _opt_int(text: str):
    return None if text.strip().lower() == "none" else int(text)


def _opt_float(text: str):
    return None if text.strip().lower() == "none" else float(text)


MODEL_CASTS = {"scale": int, "embed": int, "heads": int, "window": int,
               "n_stl": int, "n_acf": int, "n_rec": int, "stl_depth": int,
               "mlp_ratio": float, "ir_channels": int, "guide_channels": int}
TRAIN_CASTS = {"epochs": int, "batch": int, "patch": int, "p_th": float,
               "t": int, "t_loss": _opt_int, "t_lr": _opt_int,
               "lr_hi": float, "lr_lo": float, "seed": int,
               "eval_every": int, "ckpt_every": int, "augment": _bool,
               "per_batch_dropout": _bool, "clip_norm": _opt_float}


def read_config_file(path: str) -> dict[str, str]:
    if not os.path.isfile(path):
        raise DataError(f"config file not found: {path}")
    out = {}
    with open(path) as f:
        for ln, line in enumerate(f, 1):
            text = line.split("#", 1)[0].strip()
            if not text:
                continue
            if "=" not in text:
                raise DataError(f"{path}:{ln}: expected key=value, got {text!r}")
            key, value = text.split("=", 1)
            out[key.strip()] = value.strip()
    return out


def build_configs(args) -> tuple[ModelConfig, TrainConfig]:
    """Merge config-file values and CLI flags into validated configs."""
    m_kw, t_kw = {}, {}
    if getattr(args, "config", None):
        for key, raw in read_config_file(args.config).items():
            casts, target = ((MODEL_CASTS, m_kw) if key in MODEL_CASTS
                             else (TRAIN_CASTS, t_kw) if key in TRAIN_CASTS
                             else (None, None))
            if casts is None:
                raise DataError(f"unknown config key: {key}")
            try:
                target[key] = casts[key](raw)
            except ValueError as exc:
                raise DataError(f"config key {key}: {exc}") from exc
    for key in MODEL_CASTS:
        if getattr(args, key, None) is not None:
            m_kw[key] = getattr(args, key)
    for key in TRAIN_CASTS:
        if getattr(args, key, None) is not None:
            t_kw[key] = getattr(args, key)
    return ModelConfig(**m_kw), TrainConfig(**t_kw)


def _parse_size(text: str) -> tuple[int, int]:
    parts = text.lower().split("x")
    if len(parts) != 2:
        raise DataError(f"size must look like 128x128, got {text!r}")
    try:
        h, w = int(parts[0]), int(parts[1])
    except ValueError:
        raise DataError(f"size must look like 128x128, got {text!r}") from None
    return h, w


# ---------------------------------------------------------------------------
# commands


def cmd_synth(args) -> int:
    h, w = _parse_size(args.size)
    ids = synth_dataset(args.n, h, w, args.seed, args.out)
    print(f"wrote {len(ids)} samples ({h}x{w}) to {args.out}")
    return 0


def cmd_train(args) -> int:
    model_cfg, train_cfg = build_configs(args)
    if model_cfg.scale != 8:
        raise DataError(f"datasets are x8 pairs; model scale {model_cfg.scale} unsupported here")
    samples = load_dataset(args.data)
    resume = None
    if args.resume:
        resume = load_checkpoint(args.resume, expect_model_cfg=model_cfg)
    params, rows = train(samples, model_cfg, train_cfg, out_dir=args.out,
                         resume=resume,
                         log=None if args.quiet else _print_row)
    if rows:
        last = rows[-1]
        print(f"done: {len(rows)} epochs, final loss {last.loss:.6f} "
              f"({last.loss_kind}), guided psnr {last.psnr_g:.4f}")
    else:
        save_checkpoint(os.path.join(args.out, "last.ckpt"), params,
                        model_cfg, train_cfg)
        write_report([], os.path.join(args.out, "report.csv"))
        print("done: 0 epochs (initial parameters saved)")
    return 0


def _print_row(row) -> None:
    msg = f"epoch {row.epoch}: loss={row.loss:.6f} kind={row.loss_kind} lr={row.lr:g}"
    if row.psnr_g is not None:
        msg += f" psnr_g={row.psnr_g:.4f} psnr_u={row.psnr_u:.4f}"
    print(msg)


def cmd_infer(args) -> int:
    ck = load_checkpoint(args.ckpt)
    cfg = ck.model_cfg
    ir = load_image(args.ir)
    if ir.shape[0] != cfg.ir_channels:
        raise DataError(f"input has {ir.shape[0]} channels, model expects {cfg.ir_channels}")
    h, w = ir.shape[1:]
    want = (cfg.scale * h, cfg.scale * w)
    if args.rgb == "none":
        guide = np.zeros((cfg.guide_channels,) + want, dtype=np.float32)
    else:
        guide = load_image(args.rgb)
        if guide.shape[0] != cfg.guide_channels:
            raise DataError(f"guide has {guide.shape[0]} channels, model expects {cfg.guide_channels}")
        if guide.shape[1:] != want:
            raise DataError(f"guide is {guide.shape[1:]}, expected {want} "
                            f"for a {h}x{w} input at scale {cfg.scale}")
    out = forward(lift_params(ck.params), cfg, Tensor(ir[None]), Tensor(guide[None]))
    img = np.clip(out.data[0], 0.0, 1.0)
    save_image(args.out, img, bits=args.bits)
    print(f"wrote {args.out} ({img.shape[1]}x{img.shape[2]})")
    return 0


def cmd_eval(args) -> int:
    ck = load_checkpoint(args.ckpt)
    samples = load_dataset(args.data)
    modes = ("guided", "unguided") if args.mode == "both" else (args.mode,)
    results = {}
    for mode in modes:
        p, s = evaluate(ck.params, ck.model_cfg, samples, mode)
        results[mode] = {"psnr": p, "ssim": s}
        print(f"{mode}: psnr={p:.6f} ssim={s:.6f}")
    if args.json:
        with open(args.json, "w") as f:
            json.dump(results, f, indent=2)
    return 0


def cmd_gradcheck(args) -> int:
    rows = []
    if args.level in ("op", "both"):
        rows += [(name, err, OP_THRESHOLD) for name, err in run_op_gradchecks()]
    if args.level in ("model", "both"):
        rows.append(("model end-to-end", run_model_gradcheck(), MODEL_THRESHOLD))
    width = max(len(n) for n, _, _ in rows)
    failures = []
    for name, err, thresh in rows:
        ok = err < thresh
        if not ok:
            failures.append((name, err, thresh))
        print(f"{name:<{width}}  {err:12.3e}  < {thresh:g}  {'pass' if ok else 'FAIL'}")
    if failures:
        worst = max(failures, key=lambda r: r[1] / r[2] if r[2] > 0 else np.inf)
        print(f"FAIL: worst offender {worst[0]} at rel err {worst[1]:.3e} "
              f"(threshold {worst[2]:g})", file=sys.stderr)
        return 2
    print(f"all {len(rows)} checks passed")
    return 0


def cmd_sweep(args) -> int:
    try:
        probs = [float(p) for p in args.p_th_list.split(",") if p.strip() != ""]
    except ValueError:
        raise DataError(f"bad p_th list: {args.p_th_list!r}") from None
    if not probs:
        raise DataError("p_th list is empty")
    for p in probs:
        if not 0.0 <= p <= 1.0:
            raise DataError(f"p_th {p} outside [0, 1]")
    model_cfg, base_cfg = build_configs(args)
    if model_cfg.scale != 8:
        raise DataError(f"datasets are x8 pairs; model scale {model_cfg.scale} unsupported here")
    samples = load_dataset(args.data)
    os.makedirs(args.out, exist_ok=True)

    lines = ["p_th,psnr_g,ssim_g,psnr_u,ssim_u,drop_psnr,drop_ssim"]
    for p in probs:
        cfg = replace(base_cfg, p_th=p)
        run_dir = os.path.join(args.out, f"p{p:g}")
        params, _ = train(samples, model_cfg, cfg, out_dir=run_dir)
        pg, sg = evaluate(params, model_cfg, samples, "guided")
        pu, su = evaluate(params, model_cfg, samples, "unguided")
        lines.append(f"{p:g},{pg!r},{sg!r},{pu!r},{su!r},"
                     f"{(pg - pu) / pg!r},{(sg - su) / sg!r}")
        print(f"p_th={p:g}: guided {pg:.4f}/{sg:.4f} unguided {pu:.4f}/{su:.4f}")
    path = os.path.join(args.out, "sweep.csv")
    with open(path, "w") as f:
        f.write("\n".join(lines) + "\n")
    print(f"wrote {path}")
    return 0


# ---------------------------------------------------------------------------
# gradient check suites


def run_op_gradchecks() -> list[tuple[str, float]]:
    """Finite-difference error for every differentiable tensor op."""
    rng = np.random.default_rng(0)

    def w_like(shape):  # fixed weights so structural ops see non-uniform grads
        return Tensor(rng.standard_normal(shape))

    x34 = rng.standard_normal((3, 4))
    y34 = rng.standard_normal((3, 4))
    x_off_kink = np.sign(rng.standard_normal((3, 4))) * (0.2 + rng.random((3, 4)))
    a_mm = rng.standard_normal((3, 4))
    b_mm = rng.standard_normal((4, 5))
    grid = rng.standard_normal((2, 4, 5, 3))
    tokens = rng.standard_normal((2, 5, 6))
    table = rng.standard_normal((7, 3))
    idx = np.array([[0, 2, 6], [1, 1, 5]])
    cx = rng.standard_normal((1, 2, 6, 6))
    cw = rng.standard_normal((3, 2, 3, 3)) * 0.4
    cb = rng.standard_normal(3) * 0.1
    ln_x = rng.standard_normal((4, 6))
    ln_g = 1.0 + 0.2 * rng.standard_normal(6)
    ln_b = 0.2 * rng.standard_normal(6)

    wg = w_like(grid.shape)
    wp = w_like((2, 5, 6, 3))  # bottom/right pad of 1 each on a 4x5 grid
    wc = w_like((2, 3, 4, 3))
    wt = w_like((4, 3))
    wcat = w_like((3, 8))
    wsm = w_like(tokens.shape)
    wln = w_like(ln_x.shape)
    wgr = w_like(idx.shape + (3,))

    checks = [
        ("add", lambda a, b: T.mean_all(T.add(a, b)), [x34, y34]),
        ("sub", lambda a, b: T.mean_all(T.sub(a, b)), [x34, y34]),
        ("mul", lambda a, b: T.mean_all(T.mul(a, b)), [x34, y34]),
        ("absolute", lambda a: T.mean_all(T.absolute(a)), [x_off_kink]),
        ("sum_all", lambda a: T.sum_all(a), [x34]),
        ("mean_all", lambda a: T.mean_all(a), [x34]),
        ("matmul", lambda a, b: T.mean_all(T.matmul(a, b)), [a_mm, b_mm]),
        ("reshape", lambda a: T.mean_all(T.mul(T.reshape(a, (4, 3)), wt)), [x34]),
        ("transpose", lambda a: T.mean_all(T.mul(T.transpose(a, (1, 0)), wt)), [x34]),
        ("concat", lambda a, b: T.mean_all(T.mul(T.concat([a, b], 1), wcat)), [x34, y34]),
        ("roll2d", lambda a: T.mean_all(T.mul(T.roll2d(a, 1, -2), wg)), [grid]),
        ("pad2d_reflect", lambda a: T.mean_all(T.mul(T.pad2d_reflect(a, 1, 1), wp)), [grid]),
        ("crop2d", lambda a: T.mean_all(T.mul(T.crop2d(a, 3, 4), wc)), [grid]),
        ("gather_rows", lambda t: T.mean_all(T.mul(T.gather_rows(t, idx), wgr)), [table]),
        ("softmax", lambda a: T.mean_all(T.mul(T.softmax(a), wsm)), [tokens]),
        ("layer_norm", lambda a, g, b: T.mean_all(T.mul(T.layer_norm(a, g, b), wln)),
         [ln_x, ln_g, ln_b]),
        ("gelu", lambda a: T.mean_all(T.mul(T.gelu(a), wln)), [ln_x]),
        ("conv2d", lambda x, w, b: T.mean_all(T.conv2d(x, w, b)), [cx, cw, cb]),
    ]
    return [(name, finite_diff_check(f, inputs)) for name, f, inputs in checks]


def run_model_gradcheck() -> float:
    """Loss-gradient check through a tiny end-to-end model on a 12x12 guide."""
    cfg = ModelConfig(scale=2, embed=8, heads=2, window=3, n_stl=1, n_acf=1,
                      n_rec=1, stl_depth=1)
    arrays = {k: v.astype(np.float64) for k, v in init_params(cfg, seed=0).items()}
    rng = np.random.default_rng(1)
    # A zero-initialized final conv would make upstream gradients vanish and
    # the quotient round-off dominated; give it healthy magnitudes.
    arrays["rec.conv3.w"] = rng.normal(0, 0.5, arrays["rec.conv3.w"].shape)
    ir = rng.random((1, 1, 6, 6))
    guide = rng.random((1, 3, 12, 12))
    target = Tensor(rng.random((1, 1, 12, 12)))
    names = sorted(arrays)

    def f(ir_t, guide_t, *vals):
        params = dict(zip(names, vals))
        return l2_loss(forward(params, cfg, ir_t, guide_t), target)

    # Typical gradients here are ~1e-2; a 1e-6 floor keeps difference-quotient
    # noise (~1e-9 absolute) from failing coordinates whose true gradient
    # happens to cancel to ~1e-8, while still catching any real discrepancy.
    return finite_diff_check(f, [ir, guide] + [arrays[n] for n in names],
                             eps=3e-4, max_coords_per_input=3, denom_floor=1e-6)


# ---------------------------------------------------------------------------
# parser


def _add_model_flags(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("model options (defaults in parentheses)")
    g.add_argument("--embed", type=int, help="feature channels per branch (60)")
    g.add_argument("--heads", type=int, help="attention heads (6)")
    g.add_argument("--window", type=int, help="attention window side (9)")
    g.add_argument("--n-stl", type=int, help="shallow self-attention units per branch (2)")
    g.add_argument("--n-acf", type=int, help="fusion blocks (3)")
    g.add_argument("--n-rec", type=int, help="reconstruction units (3)")
    g.add_argument("--stl-depth", type=int, help="attention blocks per unit (6)")
    g.add_argument("--mlp-ratio", type=float, help="MLP expansion ratio (2.0)")


def _add_train_flags(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("training options (defaults in parentheses)")
    g.add_argument("--epochs", type=int, help="training epochs (1)")
    g.add_argument("--batch", type=int, help="batch size (16)")
    g.add_argument("--patch", type=int, help="HR patch side, multiple of 8 (128)")
    g.add_argument("--p-th", type=float, help="guide dropout probability (0.0)")
    g.add_argument("--t", type=int, help="loss/lr switch epoch (3300)")
    g.add_argument("--lr-hi", type=float, help="learning rate before the switch (4e-4)")
    g.add_argument("--lr-lo", type=float, help="learning rate after the switch (1e-4)")
    g.add_argument("--seed", type=int, help="seed for all randomness (0)")
    g.add_argument("--eval-every", type=int, help="evaluate every k epochs; 0 = final only (0)")
    g.add_argument("--ckpt-every", type=int, help="write last.ckpt every k epochs (1)")
    g.add_argument("--augment", type=_bool, metavar="BOOL",
                   help="random flips/rotations (true)")
    g.add_argument("--clip-norm", type=_opt_float, metavar="FLOAT|none",
                   help="global gradient-norm clip (none)")
    g.add_argument("--config", help="key=value config file; flags override it")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="sfsr", description="Guided thermal super-resolution toolkit.")
    sub = p.add_subparsers(dest="command", required=True, metavar="command")

    ps = sub.add_parser("synth", help="write a synthetic paired dataset")
    ps.add_argument("--out", required=True, help="dataset root to create")
    ps.add_argument("--n", type=int, required=True, help="number of samples")
    ps.add_argument("--size", required=True, help="HxW, both divisible by 8 (e.g. 128x128)")
    ps.add_argument("--seed", type=int, default=0, help="generation seed (0)")
    ps.set_defaults(func=cmd_synth)

    pt = sub.add_parser("train", help="train a model on a dataset")
    pt.add_argument("--data", required=True, help="dataset root")
    pt.add_argument("--out", required=True, help="output dir for checkpoints and report.csv")
    pt.add_argument("--resume", help="checkpoint to continue from")
    pt.add_argument("--quiet", action="store_true", help="suppress per-epoch lines")
    _add_model_flags(pt)
    _add_train_flags(pt)
    pt.set_defaults(func=cmd_train)

    pi = sub.add_parser("infer", help="super-resolve one image")
    pi.add_argument("--ckpt", required=True, help="model checkpoint")
    pi.add_argument("--ir", required=True, help="low-resolution input image")
    pi.add_argument("--rgb", required=True, help="guide image path, or 'none' for a zero guide")
    pi.add_argument("--out", required=True, help="output image path")
    pi.add_argument("--bits", type=int, choices=(8, 16), default=8,
                    help="output bit depth (8)")
    pi.set_defaults(func=cmd_infer)

    pe = sub.add_parser("eval", help="compute dataset metrics for a checkpoint")
    pe.add_argument("--ckpt", required=True, help="model checkpoint")
    pe.add_argument("--data", required=True, help="dataset root")
    pe.add_argument("--mode", choices=("guided", "unguided", "both"), default="both",
                    help="evaluation mode (both)")
    pe.add_argument("--json", help="also write results to this JSON file")
    pe.set_defaults(func=cmd_eval)

    pg = sub.add_parser("gradcheck", help="finite-difference gradient checks")
    pg.add_argument("--level", choices=("op", "model", "both"), default="both",
                    help="which suite to run (both)")
    pg.set_defaults(func=cmd_gradcheck)

    pw = sub.add_parser("sweep", help="train across guide-dropout probabilities")
    pw.add_argument("--data", required=True, help="dataset root")
    pw.add_argument("--out", required=True, help="output dir; writes sweep.csv and per-run subdirs")
    pw.add_argument("--p-th-list", required=True,
                    help="comma-separated probabilities, e.g. 0,0.1,0.2,0.3,0.5")
    _add_model_flags(pw)
    _add_train_flags(pw)
    pw.set_defaults(func=cmd_sweep)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except NumericError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except ValueError as exc:  # DataError, ShapeError, CheckpointError, bad values
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (RuntimeError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
