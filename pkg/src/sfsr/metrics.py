"""Training losses, the epoch-scheduled loss switch, and PSNR/SSIM metrics.

Losses operate on autodiff tensors. Metrics operate on plain numpy arrays in
[0, 1] and are used for evaluation only.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.signal import convolve2d

from . import tensor as T
from .errors import ShapeError
from .tensor import Tensor

PSNR_CAP = 100.0

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03


def _check_same_shape(pred, gt):
    if tuple(pred.shape) != tuple(gt.shape):
        raise ShapeError(f"shape mismatch: {tuple(pred.shape)} vs {tuple(gt.shape)}")


def l1_loss(pred: Tensor, gt: Tensor) -> Tensor:
    """Mean absolute error; subgradient 0 where pred == gt."""
    _check_same_shape(pred, gt)
    return T.mean_all(T.absolute(T.sub(pred, gt)))


def l2_loss(pred: Tensor, gt: Tensor) -> Tensor:
    """Mean squared error."""
    _check_same_shape(pred, gt)
    d = T.sub(pred, gt)
    return T.mean_all(T.mul(d, d))


@dataclass(frozen=True)
class LossSchedule:
    """Epoch count trained under L1 before switching to L2."""
    t: int

    def __post_init__(self):
        if self.t < 0:
            raise ShapeError(f"switch epoch must be >= 0, got {self.t}")


def scheduled_loss(epoch: int, schedule: LossSchedule):
    """(kind, loss_fn) for this epoch: L1 for epochs 0..t-1, L2 from t on."""
    if epoch < schedule.t:
        return "L1", l1_loss
    return "L2", l2_loss


def psnr(a: np.ndarray, b: np.ndarray, peak: float = 1.0) -> float:
    """10*log10(peak^2 / MSE) in dB, capped at 100 when the images match."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    _check_same_shape(a, b)
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * np.log10(peak * peak / mse))


def _gaussian_kernel(size: int, sigma: float) -> np.ndarray:
    r = np.arange(size) - (size - 1) / 2.0
    k = np.exp(-(r * r) / (2.0 * sigma * sigma))
    k2 = np.outer(k, k)
    return k2 / k2.sum()


_SSIM_KERNEL = _gaussian_kernel(SSIM_WINDOW, SSIM_SIGMA)


def ssim(a: np.ndarray, b: np.ndarray, peak: float = 1.0) -> float:
    """Mean local structural similarity over fully supported 11x11 windows.

    Gaussian weighting (sigma 1.5), uncorrected local covariances, and the
    usual stabilisers C1 = (0.01*peak)^2, C2 = (0.03*peak)^2.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    _check_same_shape(a, b)
    a = np.squeeze(a)
    b = np.squeeze(b)
    if a.ndim != 2:
        raise ShapeError(f"ssim expects a single-channel image, got shape {a.shape}")
    if min(a.shape) < SSIM_WINDOW:
        raise ShapeError(f"image {a.shape} smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} window")

    k = _SSIM_KERNEL
    mu_a = convolve2d(a, k, mode="valid")
    mu_b = convolve2d(b, k, mode="valid")
    e_aa = convolve2d(a * a, k, mode="valid")
    e_bb = convolve2d(b * b, k, mode="valid")
    e_ab = convolve2d(a * b, k, mode="valid")
    var_a = e_aa - mu_a * mu_a
    var_b = e_bb - mu_b * mu_b
    cov = e_ab - mu_a * mu_b

    c1 = (SSIM_K1 * peak) ** 2
    c2 = (SSIM_K2 * peak) ** 2
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2)
    return float(np.mean(num / den))
