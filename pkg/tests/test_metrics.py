import numpy as np
import pytest
from skimage.metrics import peak_signal_noise_ratio, structural_similarity

from sfsr.errors import ShapeError
from sfsr.metrics import (LossSchedule, l1_loss, l2_loss, psnr, scheduled_loss,
                          ssim)
from sfsr.tensor import Tensor, finite_diff_check


class TestLosses:
    def test_zero_at_equality(self):
        x = Tensor(np.random.default_rng(0).random((3, 4)))
        assert l1_loss(x, x).item() == 0.0
        assert l2_loss(x, x).item() == 0.0

    def test_hand_means(self):
        gt = Tensor(np.array([0.0, 1.0]))
        pred = Tensor(np.array([1.0, 1.0]))
        assert l1_loss(pred, gt).item() == pytest.approx(0.5)
        assert l2_loss(pred, gt).item() == pytest.approx(0.5)

    def test_positive_off_equality(self):
        rng = np.random.default_rng(1)
        a = Tensor(rng.random((5, 5)))
        b = Tensor(a.data + 1e-3)
        assert l1_loss(a, b).item() > 0
        assert l2_loss(a, b).item() > 0

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            l1_loss(Tensor(np.zeros((2, 2))), Tensor(np.zeros((2, 3))))
        with pytest.raises(ShapeError):
            l2_loss(Tensor(np.zeros(2)), Tensor(np.zeros((2, 1))))

    def test_l1_gradient_off_kink(self):
        # Keep pred and gt at least 0.1 apart so no coordinate crosses the
        # |.| kink during the finite-difference probes.
        rng = np.random.default_rng(2)
        gt = rng.random((4, 4))
        pred = gt + rng.choice([-1.0, 1.0], size=(4, 4)) * (0.1 + rng.random((4, 4)))
        worst = finite_diff_check(lambda p: l1_loss(p, Tensor(gt)), [pred])
        assert worst < 1e-8

    def test_l1_gradient_value(self):
        from sfsr.tensor import Tape, backward
        gt = np.array([0.0, 2.0, 5.0])
        pred = np.array([1.0, 1.0, 5.0])
        tape = Tape()
        p = tape.leaf(pred)
        backward(l1_loss(p, Tensor(gt)))
        np.testing.assert_allclose(p.grad, np.array([1.0, -1.0, 0.0]) / 3.0)

    def test_l2_gradient(self):
        rng = np.random.default_rng(3)
        gt = rng.random((4, 4))
        pred = rng.random((4, 4))
        worst = finite_diff_check(lambda p: l2_loss(p, Tensor(gt)), [pred])
        assert worst < 1e-8


class TestSchedule:
    def test_boundaries(self):
        s = LossSchedule(3300)
        kind0, fn0 = scheduled_loss(0, s)
        assert kind0 == "L1" and fn0 is l1_loss
        kind_last, _ = scheduled_loss(3299, s)
        assert kind_last == "L1"
        kind_t, fn_t = scheduled_loss(3300, s)
        assert kind_t == "L2" and fn_t is l2_loss

    def test_degenerate(self):
        assert scheduled_loss(0, LossSchedule(0))[0] == "L2"

    def test_pure(self):
        s = LossSchedule(5)
        assert scheduled_loss(2, s) == scheduled_loss(2, s)

    def test_negative_t_rejected(self):
        with pytest.raises(ShapeError):
            LossSchedule(-1)


class TestPsnr:
    def test_identical_cap(self):
        a = np.random.default_rng(4).random((16, 16))
        assert psnr(a, a) == 100.0

    def test_constant_offset_exact(self):
        a = np.full((32, 32), 0.4)
        assert psnr(a, a + 0.1) == 20.0

    def test_symmetry(self):
        rng = np.random.default_rng(5)
        a, b = rng.random((16, 16)), rng.random((16, 16))
        assert psnr(a, b) == psnr(b, a)

    def test_matches_reference(self):
        rng = np.random.default_rng(6)
        for _ in range(20):
            a = rng.random((64, 64))
            b = np.clip(a + rng.normal(0, 0.05, a.shape), 0, 1)
            ref = peak_signal_noise_ratio(a, b, data_range=1.0)
            assert abs(psnr(a, b) - ref) < 1e-6

    def test_monotone_in_noise(self):
        rng = np.random.default_rng(7)
        a = rng.random((64, 64)) * 0.5 + 0.25
        noise = rng.normal(0, 1, a.shape)
        values = [psnr(a, a + amp * noise) for amp in (0.01, 0.03, 0.09)]
        assert values[0] > values[1] > values[2]

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            psnr(np.zeros((4, 4)), np.zeros((4, 5)))


class TestSsim:
    def test_identical(self):
        a = np.random.default_rng(8).random((32, 32))
        assert ssim(a, a) == pytest.approx(1.0, abs=1e-9)

    def test_symmetry(self):
        rng = np.random.default_rng(9)
        a, b = rng.random((32, 32)), rng.random((32, 32))
        assert ssim(a, b) == pytest.approx(ssim(b, a), abs=1e-9)

    def test_inverted_contrast_negative(self):
        rng = np.random.default_rng(10)
        a = np.clip(rng.random((48, 48)), 0.02, 0.98)
        assert ssim(a, 1.0 - a) < 0

    def test_matches_reference(self):
        rng = np.random.default_rng(11)
        for _ in range(20):
            a = rng.random((64, 64))
            b = np.clip(a + rng.normal(0, 0.08, a.shape), 0, 1)
            ref = structural_similarity(a, b, data_range=1.0, gaussian_weights=True,
                                        sigma=1.5, use_sample_covariance=False)
            assert abs(ssim(a, b) - ref) < 1e-4

    def test_accepts_leading_singleton(self):
        a = np.random.default_rng(12).random((1, 24, 24))
        assert ssim(a, a) == pytest.approx(1.0, abs=1e-9)

    def test_too_small_raises(self):
        with pytest.raises(ShapeError):
            ssim(np.zeros((10, 64)), np.zeros((10, 64)))

    def test_multichannel_raises(self):
        with pytest.raises(ShapeError):
            ssim(np.zeros((3, 32, 32)), np.zeros((3, 32, 32)))
