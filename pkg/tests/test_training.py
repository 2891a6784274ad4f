import csv
import os
from dataclasses import replace

import numpy as np
import pytest

from sfsr import training
from sfsr.data import Sample, TrainConfig
from sfsr.errors import CheckpointError, DataError, NumericError, ShapeError
from sfsr.metrics import psnr, ssim
from sfsr.model import ModelConfig, forward, init_params, lift_params
from sfsr.resample import bicubic_resize, downsample_x8
from sfsr.tensor import Tensor
from sfsr.training import (AdamState, Checkpoint, ReportRow, adam_step,
                           clip_global_norm, evaluate, init_adam, load_checkpoint,
                           lr_at, save_checkpoint, train, write_report)

MODEL8 = ModelConfig(scale=8, embed=4, heads=2, window=3, n_stl=1, n_acf=1,
                     n_rec=1, stl_depth=1)


def make_samples(n, size=16, seed=0):
    rng = np.random.default_rng(seed)
    out = []
    for i in range(n):
        hr = rng.random((1, size, size)).astype(np.float32)
        out.append(Sample(ir_hr=hr, ir_lr=downsample_x8(hr),
                          rgb=rng.random((3, size, size)).astype(np.float32),
                          id=f"{i:03d}"))
    return out


class TestAdam:
    def test_first_step_magnitude(self):
        params = {"w": np.array([0.5], dtype=np.float32)}
        state = init_adam(params)
        adam_step(params, {"w": np.array([1.0], dtype=np.float32)}, state, lr=0.1)
        assert state.t == 1
        assert params["w"][0] == pytest.approx(0.4, abs=1e-6)

    def test_zero_gradients_fresh_state(self):
        params = {"w": np.arange(4, dtype=np.float32)}
        before = params["w"].copy()
        state = init_adam(params)
        adam_step(params, {"w": np.zeros(4, dtype=np.float32)}, state, lr=0.1)
        np.testing.assert_array_equal(params["w"], before)
        assert state.t == 1

    def test_missing_grad_equals_zero_grad(self):
        a = {"w": np.ones(3, dtype=np.float32), "b": np.ones(2, dtype=np.float32)}
        b = {k: v.copy() for k, v in a.items()}
        sa, sb = init_adam(a), init_adam(b)
        g = np.full(3, 0.5, dtype=np.float32)
        adam_step(a, {"w": g}, sa, lr=0.01)
        adam_step(b, {"w": g, "b": np.zeros(2, dtype=np.float32)}, sb, lr=0.01)
        np.testing.assert_array_equal(a["w"], b["w"])
        np.testing.assert_array_equal(a["b"], b["b"])

    def test_order_independent(self):
        rng = np.random.default_rng(1)
        vals = {"a": rng.random(3).astype(np.float32),
                "b": rng.random(3).astype(np.float32)}
        gs = {"a": rng.random(3).astype(np.float32),
              "b": rng.random(3).astype(np.float32)}
        p1 = {k: vals[k].copy() for k in ("a", "b")}
        p2 = {k: vals[k].copy() for k in ("b", "a")}
        s1, s2 = init_adam(p1), init_adam(p2)
        adam_step(p1, gs, s1, lr=0.05)
        adam_step(p2, gs, s2, lr=0.05)
        for k in vals:
            np.testing.assert_array_equal(p1[k], p2[k])

    def test_deterministic_trajectory(self):
        def run():
            rng = np.random.default_rng(2)
            params = {"w": rng.random((4, 4)).astype(np.float32)}
            state = init_adam(params)
            for _ in range(10):
                adam_step(params, {"w": rng.random((4, 4)).astype(np.float32)},
                          state, lr=0.01)
            return params["w"]

        np.testing.assert_array_equal(run(), run())

    def test_dtype_preserved(self):
        params = {"w": np.ones(2, dtype=np.float32)}
        state = init_adam(params)
        adam_step(params, {"w": np.ones(2, dtype=np.float32)}, state, lr=0.1)
        assert params["w"].dtype == np.float32
        assert state.m["w"].dtype == np.float32

    def test_shape_mismatch(self):
        params = {"w": np.ones(3, dtype=np.float32)}
        with pytest.raises(ShapeError):
            adam_step(params, {"w": np.ones(4, dtype=np.float32)},
                      init_adam(params), lr=0.1)


class TestLrSchedule:
    def test_paper_values(self):
        cfg = TrainConfig(t=3300)
        assert lr_at(0, cfg) == 4e-4
        assert lr_at(3299, cfg) == 4e-4
        assert lr_at(3300, cfg) == 1e-4

    def test_constant_pair(self):
        cfg = TrainConfig(lr_hi=1e-3, lr_lo=1e-3)
        assert lr_at(0, cfg) == lr_at(10_000, cfg) == 1e-3

    def test_separate_t_lr(self):
        cfg = TrainConfig(t=100, t_lr=5)
        assert lr_at(4, cfg) == 4e-4 and lr_at(5, cfg) == 1e-4


class TestClip:
    def test_scales_large(self):
        g = {"a": np.array([3.0], dtype=np.float32),
             "b": np.array([4.0], dtype=np.float32)}
        clip_global_norm(g, 1.0)  # norm was 5
        assert g["a"][0] == pytest.approx(0.6, abs=1e-6)
        assert g["b"][0] == pytest.approx(0.8, abs=1e-6)

    def test_leaves_small(self):
        g = {"a": np.array([0.3], dtype=np.float32), "none": None}
        clip_global_norm(g, 1.0)
        assert g["a"][0] == pytest.approx(0.3)


class TestEvaluate:
    def test_zero_residual_equals_bicubic_baseline(self):
        samples = make_samples(3, seed=3)
        params = init_params(MODEL8, seed=0)  # final conv zero at init
        pe, se = evaluate(params, MODEL8, samples, "guided")
        ps, ss = [], []
        for s in samples:
            up = np.clip(bicubic_resize(s.ir_lr, 16, 16)[0], 0.0, 1.0)
            ps.append(psnr(up, s.ir_hr[0]))
            ss.append(ssim(up, s.ir_hr[0]))
        assert pe == float(np.mean(ps))
        assert se == float(np.mean(ss))

    def _active(self):
        params = init_params(MODEL8, seed=0)
        rng = np.random.default_rng(7)
        params["rec.conv3.w"] = rng.normal(0, 0.05, params["rec.conv3.w"].shape).astype(np.float32)
        return params

    def test_modes_differ_when_guide_matters(self):
        samples = make_samples(2, seed=4)
        params = self._active()
        g = evaluate(params, MODEL8, samples, "guided")
        u = evaluate(params, MODEL8, samples, "unguided")
        assert g != u

    def test_thread_count_invariant(self, monkeypatch):
        samples = make_samples(3, seed=5)
        params = self._active()
        monkeypatch.delenv("SFSR_THREADS", raising=False)
        base = evaluate(params, MODEL8, samples, "guided")
        monkeypatch.setenv("SFSR_THREADS", "3")
        assert evaluate(params, MODEL8, samples, "guided") == base

    def test_bad_inputs(self):
        params = init_params(MODEL8)
        with pytest.raises(DataError):
            evaluate(params, MODEL8, make_samples(1), "both")
        with pytest.raises(DataError):
            evaluate(params, MODEL8, [], "guided")


class TestCheckpoint:
    def roundtrip(self, tmp_path, with_state=True):
        params = init_params(MODEL8, seed=9)
        rng = np.random.default_rng(0)
        state = None
        if with_state:
            state = init_adam(params)
            for k in state.m:
                state.m[k] = rng.normal(0, 1, state.m[k].shape).astype(np.float32)
                state.v[k] = rng.random(state.v[k].shape).astype(np.float32)
            state.t = 17
        path = str(tmp_path / "a.ckpt")
        save_checkpoint(path, params, MODEL8, TrainConfig(epochs=5, seed=2),
                        state, next_epoch=3, best_psnr=31.25)
        return params, state, load_checkpoint(path)

    def test_roundtrip_bit_exact(self, tmp_path):
        params, state, ck = self.roundtrip(tmp_path)
        assert set(ck.params) == set(params)
        for k in params:
            np.testing.assert_array_equal(ck.params[k], params[k])
            np.testing.assert_array_equal(ck.state.m[k], state.m[k])
            np.testing.assert_array_equal(ck.state.v[k], state.v[k])
        assert ck.state.t == 17
        assert ck.next_epoch == 3
        assert ck.best_psnr == 31.25
        assert ck.model_cfg == MODEL8
        assert ck.train_cfg.epochs == 5 and ck.train_cfg.seed == 2

    def test_stateless_roundtrip(self, tmp_path):
        _, _, ck = self.roundtrip(tmp_path, with_state=False)
        assert ck.state is None

    def test_truncation_rejected(self, tmp_path):
        params = init_params(MODEL8, seed=1)
        path = str(tmp_path / "b.ckpt")
        save_checkpoint(path, params, MODEL8, TrainConfig())
        raw = open(path, "rb").read()
        for cut in (3, 10, len(raw) - 7):
            bad = str(tmp_path / f"cut{cut}.ckpt")
            with open(bad, "wb") as f:
                f.write(raw[:cut])
            with pytest.raises(CheckpointError):
                load_checkpoint(bad)
        with open(str(tmp_path / "pad.ckpt"), "wb") as f:
            f.write(raw + b"x")
        with pytest.raises(CheckpointError):
            load_checkpoint(str(tmp_path / "pad.ckpt"))

    def test_bad_magic(self, tmp_path):
        p = str(tmp_path / "c.ckpt")
        with open(p, "wb") as f:
            f.write(b"NOPE!" + b"\x00" * 32)
        with pytest.raises(CheckpointError, match="magic"):
            load_checkpoint(p)

    def test_config_mismatch_names_key(self, tmp_path):
        params = init_params(MODEL8, seed=1)
        path = str(tmp_path / "d.ckpt")
        save_checkpoint(path, params, MODEL8, TrainConfig())
        other = replace(MODEL8, embed=8, heads=2)
        with pytest.raises(CheckpointError, match="embed"):
            load_checkpoint(path, expect_model_cfg=other)


class TestReport:
    def test_csv_format(self, tmp_path):
        rows = [ReportRow(epoch=0, loss=0.25, loss_kind="L1", lr=4e-4),
                ReportRow(epoch=1, loss=0.125, loss_kind="L2", lr=1e-4,
                          psnr_g=30.5, ssim_g=0.9, psnr_u=29.5, ssim_u=0.85)]
        path = str(tmp_path / "report.csv")
        write_report(rows, path)
        with open(path, newline="") as f:
            got = list(csv.reader(f))
        assert got[0] == ["epoch", "loss", "loss_kind", "lr",
                          "psnr_g", "ssim_g", "psnr_u", "ssim_u"]
        assert got[1][:4] == ["0", "0.25", "L1", "0.0004"]
        assert got[1][4:] == ["", "", "", ""]
        assert float(got[2][4]) == 30.5 and got[2][2] == "L2"


def quick_cfg(**kw):
    base = dict(epochs=2, batch=2, patch=16, p_th=0.0, t=10_000, lr_hi=1e-3,
                lr_lo=1e-3, seed=0, augment=False, eval_every=0)
    base.update(kw)
    return TrainConfig(**base)


class TestTrain:
    def test_smoke_one_sample(self, tmp_path):
        samples = make_samples(1, seed=10)
        out = str(tmp_path / "run")
        params, rows = train(samples, MODEL8, quick_cfg(epochs=1, batch=1), out_dir=out)
        assert len(rows) == 1
        assert rows[0].psnr_g is not None and rows[0].psnr_u is not None
        assert os.path.exists(os.path.join(out, "report.csv"))
        assert os.path.exists(os.path.join(out, "last.ckpt"))
        assert os.path.exists(os.path.join(out, "best.ckpt"))

    def test_deterministic_runs(self):
        samples = make_samples(3, seed=11)
        p1, r1 = train(samples, MODEL8, quick_cfg())
        p2, r2 = train(samples, MODEL8, quick_cfg())
        assert [r.loss for r in r1] == [r.loss for r in r2]
        for k in p1:
            np.testing.assert_array_equal(p1[k], p2[k])

    def test_loss_decreases(self):
        samples = make_samples(2, seed=12)
        _, rows = train(samples, MODEL8, quick_cfg(epochs=12))
        assert rows[-1].loss < rows[0].loss

    def test_loss_kind_and_lr_switch(self):
        samples = make_samples(1, seed=13)
        cfg = quick_cfg(epochs=4, batch=1, t=2, lr_hi=2e-3, lr_lo=5e-4)
        _, rows = train(samples, MODEL8, cfg)
        assert [r.loss_kind for r in rows] == ["L1", "L1", "L2", "L2"]
        assert [r.lr for r in rows] == [2e-3, 2e-3, 5e-4, 5e-4]

    def test_p_zero_never_drops(self, monkeypatch):
        samples = make_samples(4, seed=14)
        seen = []
        real = training.make_batch

        def spy(*args, **kw):
            b = real(*args, **kw)
            seen.append(b.guide_dropped.copy())
            return b

        monkeypatch.setattr(training, "make_batch", spy)
        train(samples, MODEL8, quick_cfg(epochs=2, p_th=0.0))
        assert seen and not np.concatenate(seen).any()

    def test_nonfinite_loss_aborts_with_context(self, monkeypatch):
        samples = make_samples(1, seed=15)

        def poisoned(epoch, schedule):
            return "L1", lambda pred, gt: Tensor(np.float32(np.nan))

        monkeypatch.setattr(training, "scheduled_loss", poisoned)
        with pytest.raises(NumericError, match="epoch 0, batch 0"):
            train(samples, MODEL8, quick_cfg(epochs=1, batch=1))

    def test_dataset_not_mutated(self):
        samples = make_samples(2, seed=16)
        digests = [(s.ir_hr.tobytes(), s.ir_lr.tobytes(), s.rgb.tobytes())
                   for s in samples]
        train(samples, MODEL8, quick_cfg(p_th=0.5, augment=True))
        after = [(s.ir_hr.tobytes(), s.ir_lr.tobytes(), s.rgb.tobytes())
                 for s in samples]
        assert digests == after

    def test_empty_dataset_rejected(self):
        with pytest.raises(DataError):
            train([], MODEL8, quick_cfg())

    def test_resume_matches_uninterrupted(self, tmp_path):
        samples = make_samples(3, seed=17)
        full_cfg = quick_cfg(epochs=6, ckpt_every=3)
        p_full, r_full = train(samples, MODEL8, full_cfg)

        out = str(tmp_path / "half")
        train(samples, MODEL8, quick_cfg(epochs=3, ckpt_every=3), out_dir=out)
        ck = load_checkpoint(os.path.join(out, "last.ckpt"))
        assert ck.next_epoch == 3
        p_res, r_res = train(samples, MODEL8, full_cfg, resume=ck)

        assert [r.loss for r in r_full[3:]] == [r.loss for r in r_res]
        for k in p_full:
            np.testing.assert_array_equal(p_full[k], p_res[k])
