"""Bicubic resampling with the Keys a=-0.5 kernel.

Convention: half-pixel-centered coordinate mapping and clamp-to-edge source
sampling, the dominant choice in image toolchains. Resizing is expressed as
two dense weight-matrix products (rows then columns), which makes it exactly
linear in the input and trivially differentiable through the autodiff matmul.

Images are arrays shaped [h, w], [c, h, w] or [b, c, h, w] with values
nominally in [0, 1]; cubic overshoot may leave [0, 1] and is clamped only at
export time.
"""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .errors import ShapeError

KEYS_A = -0.5

_weight_cache: dict[tuple[int, int], np.ndarray] = {}


def cubic_kernel(t: np.ndarray) -> np.ndarray:
    """Keys piecewise-cubic kernel with a = -0.5, support (-2, 2)."""
    a = KEYS_A
    t = np.abs(np.asarray(t, dtype=np.float64))
    t2 = t * t
    t3 = t2 * t
    near = (a + 2.0) * t3 - (a + 3.0) * t2 + 1.0
    far = a * t3 - 5.0 * a * t2 + 8.0 * a * t - 4.0 * a
    return np.where(t < 1.0, near, np.where(t < 2.0, far, 0.0))


def resize_weights(n_in: int, n_out: int) -> np.ndarray:
    """Dense [n_out, n_in] interpolation matrix for one axis (float64).

    Out-of-range taps clamp to the edge sample, so each row still sums to 1.
    """
    key = (n_in, n_out)
    cached = _weight_cache.get(key)
    if cached is not None:
        return cached
    w = np.zeros((n_out, n_in), dtype=np.float64)
    scale = n_in / n_out
    for i in range(n_out):
        u = (i + 0.5) * scale - 0.5
        base = int(np.floor(u))
        for j in range(base - 1, base + 3):
            w[i, min(max(j, 0), n_in - 1)] += float(cubic_kernel(u - j))
    w.setflags(write=False)
    _weight_cache[key] = w
    return w


def bicubic_resize(img: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Resize the last two axes of ``img`` to (out_h, out_w), preserving dtype."""
    if out_h < 1 or out_w < 1:
        raise ShapeError(f"target size {out_h}x{out_w} must be positive")
    img = np.asarray(img)
    h, w = img.shape[-2], img.shape[-1]
    wv = resize_weights(h, out_h).astype(img.dtype, copy=False)
    wh = resize_weights(w, out_w).astype(img.dtype, copy=False)
    return np.matmul(np.matmul(wv, img), wh.T)


def bicubic_resize_t(x: "T.Tensor", out_h: int, out_w: int) -> "T.Tensor":
    """Differentiable resize of a [b, c, h, w] tensor to (out_h, out_w).

    Uses the same weight matrices and multiply order as :func:`bicubic_resize`
    so the two paths agree bit-for-bit on identical inputs.
    """
    b, c, h, w = x.shape
    wv = T.Tensor(resize_weights(h, out_h).astype(x.dtype, copy=False))
    wh_t = T.Tensor(resize_weights(w, out_w).T.astype(x.dtype, copy=False))
    flat = T.reshape(x, (b * c, h, w))
    out = T.matmul(T.matmul(wv, flat), wh_t)
    return T.reshape(out, (b, c, out_h, out_w))


def downsample_x8(img: np.ndarray) -> np.ndarray:
    """Bicubic x8 decimation; crops bottom/right first if dims are not /8."""
    img = np.asarray(img)
    h, w = img.shape[-2], img.shape[-1]
    h8, w8 = (h // 8) * 8, (w // 8) * 8
    if h8 < 8 or w8 < 8:
        raise ShapeError(f"image {h}x{w} too small for x8 downsampling")
    if (h8, w8) != (h, w):
        img = img[..., :h8, :w8]
    return bicubic_resize(img, h8 // 8, w8 // 8)
