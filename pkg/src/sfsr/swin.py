"""Windowed multi-head attention blocks with cyclic shifting.

Feature maps enter channel-last as [b, h, w, c] with h and w already padded
to window multiples. A block is the usual pre-norm residual pair

    x = x + Attn(LN(x))          (W-MSA, or SW-MSA when shift > 0)
    x = x + MLP(LN(x))

where the attention half optionally takes its keys/values from a second
stream (cross-attention between modality branches). Shifted blocks roll the
grid by -shift, mask attention across wrapped boundaries with a -100 logit
offset, and roll back. Shifting is disabled when the grid is a single window
tall or wide, where every token pair already shares a window.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ShapeError
from .tensor import Tensor

MASK_NEG = -100.0

_rel_index_cache: dict[int, np.ndarray] = {}
_mask_cache: dict[tuple[int, int, int, int], np.ndarray] = {}


@dataclass(frozen=True)
class WindowSpec:
    """Window side length (in tokens) and cyclic shift offset."""
    window: int
    shift: int = 0

    def __post_init__(self):
        if not 0 <= self.shift < self.window:
            raise ShapeError(f"shift {self.shift} must lie in [0, {self.window})")


@dataclass
class AttnParams:
    """Projections and relative-position bias for one attention unit."""
    heads: int
    wq: Tensor
    bq: Tensor
    wk: Tensor
    bk: Tensor
    wv: Tensor
    bv: Tensor
    wo: Tensor
    bo: Tensor
    bias_table: Tensor  # [(2*window-1)**2, heads]


@dataclass
class BlockParams:
    """One transformer block; lnkv_* present only for cross-attention blocks."""
    ln1_g: Tensor
    ln1_b: Tensor
    attn: AttnParams
    ln2_g: Tensor
    ln2_b: Tensor
    fc1_w: Tensor
    fc1_b: Tensor
    fc2_w: Tensor
    fc2_b: Tensor
    lnkv_g: Tensor | None = None
    lnkv_b: Tensor | None = None


def relative_position_index(window: int) -> np.ndarray:
    """[T, T] lookup from token-pair offsets into the (2w-1)^2 bias table."""
    cached = _rel_index_cache.get(window)
    if cached is not None:
        return cached
    coords = np.stack(np.meshgrid(np.arange(window), np.arange(window), indexing="ij"))
    flat = coords.reshape(2, -1)
    rel = flat[:, :, None] - flat[:, None, :]
    idx = (rel[0] + window - 1) * (2 * window - 1) + (rel[1] + window - 1)
    idx.setflags(write=False)
    _rel_index_cache[window] = idx
    return idx


def window_partition(x: Tensor, window: int) -> Tensor:
    """[b, h, w, c] -> [b*nWin, window^2, c], row-major tiles."""
    b, h, w, c = x.shape
    if h % window or w % window:
        raise ShapeError(f"spatial dims ({h},{w}) not divisible by window {window}")
    nh, nw = h // window, w // window
    x = T.reshape(x, (b, nh, window, nw, window, c))
    x = T.transpose(x, (0, 1, 3, 2, 4, 5))
    return T.reshape(x, (b * nh * nw, window * window, c))


def window_reverse(wins: Tensor, window: int, h: int, w: int) -> Tensor:
    """Exact inverse of :func:`window_partition`."""
    nh, nw = h // window, w // window
    n = wins.shape[0]
    if n % (nh * nw):
        raise ShapeError(f"{n} windows do not tile a {h}x{w} grid with window {window}")
    b = n // (nh * nw)
    x = T.reshape(wins, (b, nh, nw, window, window, wins.shape[-1]))
    x = T.transpose(x, (0, 1, 3, 2, 4, 5))
    return T.reshape(x, (b, h, w, wins.shape[-1]))


def cyclic_shift(x: Tensor, s: int) -> Tensor:
    """Toroidal roll by (-s, -s); invert with ``cyclic_shift(x, -s)``."""
    return T.roll2d(x, -s, -s)


def _axis_labels(n: int, window: int, shift: int) -> np.ndarray:
    # One label per pre-shift contiguous segment along this axis; an axis
    # spanning a single window needs no masking at all.
    lab = np.zeros(n, dtype=np.int64)
    if n > window:
        lab[n - window:n - shift] = 1
        lab[n - shift:] = 2
    return lab


def shift_attention_mask(h: int, w: int, window: int, shift: int) -> np.ndarray:
    """Additive [nWin, T, T] mask: 0 within a pre-shift region, -100 across.

    Computed on the rolled grid, so windows at the bottom/right seams see
    tokens from opposite image edges; those pairs get the -100 offset.
    """
    if shift <= 0:
        raise ShapeError("shift_attention_mask requires shift > 0")
    key = (h, w, window, shift)
    cached = _mask_cache.get(key)
    if cached is not None:
        return cached
    lab = _axis_labels(h, window, shift)[:, None] * 4 + _axis_labels(w, window, shift)[None, :]
    nh, nw = h // window, w // window
    tiles = lab.reshape(nh, window, nw, window).transpose(0, 2, 1, 3).reshape(nh * nw, window * window)
    mask = np.where(tiles[:, :, None] != tiles[:, None, :], MASK_NEG, 0.0)
    mask.setflags(write=False)
    _mask_cache[key] = mask
    return mask


def window_attention(q_src: Tensor, kv_src: Tensor, p: AttnParams, spec: WindowSpec,
                     mask: np.ndarray | None = None) -> Tensor:
    """Per-window multi-head attention; self-attention when q_src is kv_src.

    Inputs are [nWin, T, embed]. Scaled dot-product logits get the learned
    relative-position bias, plus ``mask`` (broadcast over images) when given.
    """
    if q_src.shape != kv_src.shape:
        raise ShapeError(f"query/key-value shapes differ: {tuple(q_src.shape)} vs {tuple(kv_src.shape)}")
    n_win, t, embed = q_src.shape
    if p.wq.shape[0] != embed:
        raise ShapeError(f"embed dim {embed} does not match params ({p.wq.shape[0]})")
    heads = p.heads
    head_dim = embed // heads
    scale = float(head_dim) ** -0.5

    def heads_first(src, wgt, bias):
        y = T.add(T.matmul(src, wgt), bias)
        return T.transpose(T.reshape(y, (n_win, t, heads, head_dim)), (0, 2, 1, 3))

    q = heads_first(q_src, p.wq, p.bq)
    k = heads_first(kv_src, p.wk, p.bk)
    v = heads_first(kv_src, p.wv, p.bv)

    logits = T.mul(T.matmul(q, T.transpose(k, (0, 1, 3, 2))), scale)
    rel = T.gather_rows(p.bias_table, relative_position_index(spec.window))
    logits = T.add(logits, T.transpose(rel, (2, 0, 1)))
    if mask is not None:
        per_img = mask.shape[0]
        b = n_win // per_img
        logits = T.reshape(logits, (b, per_img, heads, t, t))
        logits = T.add(logits, Tensor(mask[None, :, None].astype(q_src.dtype, copy=False)))
        logits = T.reshape(logits, (n_win, heads, t, t))

    attn = T.softmax(logits, axis=-1)
    ctx = T.matmul(attn, v)
    ctx = T.reshape(T.transpose(ctx, (0, 2, 1, 3)), (n_win, t, embed))
    return T.add(T.matmul(ctx, p.wo), p.bo)


def _effective_shift(h: int, w: int, spec: WindowSpec) -> int:
    if min(h, w) <= spec.window:
        return 0
    return spec.shift


def windowed_attention_2d(xq: Tensor, xkv: Tensor, p: AttnParams, spec: WindowSpec) -> Tensor:
    """Attention stage on [b, h, w, c] grids: shift, partition, attend, undo."""
    b, h, w, c = xq.shape
    s = _effective_shift(h, w, spec)
    mask = None
    if s > 0:
        sq = cyclic_shift(xq, s)
        skv = sq if xkv is xq else cyclic_shift(xkv, s)
        mask = shift_attention_mask(h, w, spec.window, s)
    else:
        sq, skv = xq, xkv
    pq = window_partition(sq, spec.window)
    pkv = pq if skv is sq else window_partition(skv, spec.window)
    out = window_attention(pq, pkv, p, spec, mask)
    out = window_reverse(out, spec.window, h, w)
    if s > 0:
        out = cyclic_shift(out, -s)
    return out


def _mlp(x: Tensor, p: BlockParams) -> Tensor:
    b, h, w, c = x.shape
    flat = T.reshape(x, (b * h * w, c))
    y = T.gelu(T.add(T.matmul(flat, p.fc1_w), p.fc1_b))
    y = T.add(T.matmul(y, p.fc2_w), p.fc2_b)
    return T.reshape(y, (b, h, w, c))


def stl_block(x: Tensor, p: BlockParams, spec: WindowSpec) -> Tensor:
    """Pre-norm windowed self-attention block; preserves shape."""
    y = T.layer_norm(x, p.ln1_g, p.ln1_b)
    x = T.add(x, windowed_attention_2d(y, y, p.attn, spec))
    return T.add(x, _mlp(T.layer_norm(x, p.ln2_g, p.ln2_b), p))


def cross_stl_block(x_q: Tensor, x_kv: Tensor, p: BlockParams, spec: WindowSpec) -> Tensor:
    """As :func:`stl_block` but keys/values come from the second stream.

    The residual runs on the query stream; the key/value stream has its own
    LayerNorm (set equal to ln1 to recover the self-attention block when
    x_kv == x_q).
    """
    if x_q.shape != x_kv.shape:
        raise ShapeError(f"branch shapes differ: {tuple(x_q.shape)} vs {tuple(x_kv.shape)}")
    if p.lnkv_g is None or p.lnkv_b is None:
        raise ShapeError("cross_stl_block needs key/value LayerNorm parameters")
    yq = T.layer_norm(x_q, p.ln1_g, p.ln1_b)
    ykv = T.layer_norm(x_kv, p.lnkv_g, p.lnkv_b)
    x = T.add(x_q, windowed_attention_2d(yq, ykv, p.attn, spec))
    return T.add(x, _mlp(T.layer_norm(x, p.ln2_g, p.ln2_b), p))
