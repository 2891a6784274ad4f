"""Dense tensors with reverse-mode automatic differentiation.

A ``Tape`` records every operation applied to attached tensors, in creation
order (which is already a topological order). ``backward`` walks the record
once, in reverse, accumulating gradients into ``Tensor.grad``. Tensors that
are not attached to a tape behave as plain immutable values: the same op
functions then compute forward results without recording anything, which is
the inference path.

Production code runs in float32; gradient checking runs the same graph in
float64 so finite-difference tolerances stay meaningful.
"""

from __future__ import annotations

import numpy as np
from scipy.special import erf

from .errors import NumericError, ShapeError

_INV_SQRT2 = 0.7071067811865476
_INV_SQRT_2PI = 0.3989422804014327


class Tensor:
    """N-d array plus optional gradient and tape attachment."""

    __slots__ = ("data", "grad", "tape", "node_id")

    def __init__(self, data, tape=None, node_id=None):
        self.data = np.asarray(data)
        self.grad = None
        self.tape = tape
        self.node_id = node_id

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def item(self) -> float:
        return float(self.data)

    def __repr__(self):
        tag = "attached" if self.tape is not None else "detached"
        return f"Tensor(shape={tuple(self.shape)}, dtype={self.dtype}, {tag})"

    # Operator sugar; the module-level functions do the real work.
    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


class _Node:
    __slots__ = ("out", "inputs", "backward")

    def __init__(self, out, inputs, backward):
        self.out = out
        self.inputs = inputs
        self.backward = backward


class Tape:
    """Append-only operation record for one forward/backward cycle."""

    def __init__(self):
        self.nodes: list[_Node] = []
        self._next_id = 0

    def _take_id(self) -> int:
        i = self._next_id
        self._next_id += 1
        return i

    def leaf(self, data) -> Tensor:
        """Attach an array as a differentiable leaf (e.g. a parameter)."""
        return Tensor(data, tape=self, node_id=self._take_id())

    def record(self, out_data, inputs, backward) -> Tensor:
        out = Tensor(out_data, tape=self, node_id=self._take_id())
        self.nodes.append(_Node(out, inputs, backward))
        return out

    def close(self) -> None:
        """Drop all recorded nodes so their buffers free without waiting on
        the cycle collector (Tensor/Tape/closure cycles otherwise keep whole
        forward graphs alive between gc passes). The tape is dead afterwards."""
        self.nodes.clear()


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _tape_of(*tensors):
    tape = None
    for t in tensors:
        if isinstance(t, Tensor) and t.tape is not None:
            if tape is None:
                tape = t.tape
            elif tape is not t.tape:
                raise ValueError("operands belong to different tapes")
    return tape


def _emit(tape, out_data, inputs, backward) -> Tensor:
    if tape is None:
        return Tensor(out_data)
    return tape.record(out_data, inputs, backward)


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum a gradient down to ``shape``, undoing numpy broadcasting."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def backward(loss: Tensor) -> None:
    """Populate ``grad`` on every tape-attached tensor reachable from ``loss``.

    Gradients accumulate across fan-out; each recorded node is visited exactly
    once (reverse creation order is reverse topological order).
    """
    if loss.size != 1:
        raise ShapeError(f"backward requires a scalar loss, got shape {tuple(loss.shape)}")
    if loss.tape is None:
        raise ValueError("backward requires a tape-attached loss")
    tape = loss.tape
    loss.grad = np.ones_like(loss.data)
    for node in reversed(tape.nodes):
        g = node.out.grad
        if g is None:
            continue
        grads = node.backward(g)
        for t, gt in zip(node.inputs, grads):
            if gt is None or not isinstance(t, Tensor) or t.tape is not tape:
                continue
            if t.grad is None:
                t.grad = gt
            else:
                t.grad = t.grad + gt


# ---------------------------------------------------------------------------
# elementwise


def _binary(a, b, fwd, bwd_a, bwd_b):
    a = as_tensor(a)
    b_t = b if isinstance(b, Tensor) else None
    b_data = b_t.data if b_t is not None else b
    tape = _tape_of(a, b_t) if b_t is not None else _tape_of(a)
    try:
        out = fwd(a.data, b_data)
    except ValueError as exc:
        bs = tuple(b_t.shape) if b_t is not None else np.shape(b)
        raise ShapeError(f"incompatible shapes {tuple(a.shape)} vs {bs}") from exc

    def _bwd(g):
        ga = _unbroadcast(bwd_a(g), a.shape)
        gb = None
        if b_t is not None:
            gb = _unbroadcast(bwd_b(g), b_t.shape)
        return ga, gb

    return _emit(tape, out, (a, b_t), _bwd)


def add(a, b) -> Tensor:
    return _binary(a, b, lambda x, y: x + y, lambda g: g, lambda g: g)


def sub(a, b) -> Tensor:
    return _binary(a, b, lambda x, y: x - y, lambda g: g, lambda g: -g)


def mul(a, b) -> Tensor:
    a = as_tensor(a)
    b_t = b if isinstance(b, Tensor) else None
    b_data = b_t.data if b_t is not None else b
    return _binary(a, b, lambda x, y: x * y,
                   lambda g: g * b_data,
                   lambda g: g * a.data)


def absolute(a: Tensor) -> Tensor:
    """|a| with subgradient 0 at 0."""
    a = as_tensor(a)
    tape = _tape_of(a)
    sign = np.sign(a.data)
    return _emit(tape, np.abs(a.data), (a,), lambda g: (g * sign,))


def sum_all(a: Tensor) -> Tensor:
    a = as_tensor(a)
    tape = _tape_of(a)
    out = np.asarray(a.data.sum())
    return _emit(tape, out, (a,), lambda g: (np.ones_like(a.data) * g,))


def mean_all(a: Tensor) -> Tensor:
    return mul(sum_all(a), 1.0 / a.size)


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a, b) -> Tensor:
    a = as_tensor(a)
    b = as_tensor(b)
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise ShapeError(f"matmul needs 2-d operands, got {tuple(a.shape)} and {tuple(b.shape)}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dimensions disagree: {tuple(a.shape)} vs {tuple(b.shape)}")
    tape = _tape_of(a, b)
    out = np.matmul(a.data, b.data)

    def _bwd(g):
        ga = _unbroadcast(np.matmul(g, b.data.swapaxes(-1, -2)), a.shape)
        gb = _unbroadcast(np.matmul(a.data.swapaxes(-1, -2), g), b.shape)
        return ga, gb

    return _emit(tape, out, (a, b), _bwd)


# ---------------------------------------------------------------------------
# shape manipulation


def reshape(a: Tensor, shape) -> Tensor:
    a = as_tensor(a)
    tape = _tape_of(a)
    old = a.shape
    return _emit(tape, a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))


def transpose(a: Tensor, axes) -> Tensor:
    a = as_tensor(a)
    tape = _tape_of(a)
    inv = tuple(np.argsort(axes))
    return _emit(tape, np.transpose(a.data, axes), (a,),
                 lambda g: (np.transpose(g, inv),))


def concat(tensors, axis: int) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    tape = _tape_of(*tensors)
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    return _emit(tape, out, tuple(tensors),
                 lambda g: tuple(np.split(g, splits, axis=axis)))


def roll2d(a: Tensor, sh: int, sw: int) -> Tensor:
    """Toroidal roll along axes 1 and 2 of a [b, h, w, c] tensor."""
    a = as_tensor(a)
    tape = _tape_of(a)
    out = np.roll(a.data, (sh, sw), axis=(1, 2))
    return _emit(tape, out, (a,),
                 lambda g: (np.roll(g, (-sh, -sw), axis=(1, 2)),))


def pad2d_reflect(a: Tensor, ph: int, pw: int) -> Tensor:
    """Reflect-pad the bottom/right of a [b, h, w, c] tensor by (ph, pw)."""
    a = as_tensor(a)
    if ph == 0 and pw == 0:
        return a
    b, h, w, c = a.shape
    if ph > h - 1 or pw > w - 1:
        raise ShapeError(f"reflect pad ({ph},{pw}) too large for spatial dims ({h},{w})")
    tape = _tape_of(a)
    idx_h = np.concatenate([np.arange(h), np.arange(h - 2, h - 2 - ph, -1)])
    idx_w = np.concatenate([np.arange(w), np.arange(w - 2, w - 2 - pw, -1)])
    out = a.data[:, idx_h][:, :, idx_w]

    def _bwd(g):
        # Undo the width gather, then the height gather, accumulating the
        # reflected border contributions back onto their source pixels.
        acc_w = np.zeros((w,) + (b, h + ph, c), dtype=g.dtype)
        np.add.at(acc_w, idx_w, np.moveaxis(g, 2, 0))
        gw = np.moveaxis(acc_w, 0, 2)
        acc_h = np.zeros((h,) + (b, w, c), dtype=g.dtype)
        np.add.at(acc_h, idx_h, np.moveaxis(gw, 1, 0))
        return (np.moveaxis(acc_h, 0, 1),)

    return _emit(tape, out, (a,), _bwd)


def crop2d(a: Tensor, h: int, w: int) -> Tensor:
    """Keep the top-left [.., :h, :w, ..] region of a [b, H, W, c] tensor."""
    a = as_tensor(a)
    if a.shape[1] == h and a.shape[2] == w:
        return a
    tape = _tape_of(a)
    out = np.ascontiguousarray(a.data[:, :h, :w, :])
    shape = a.shape

    def _bwd(g):
        full = np.zeros(shape, dtype=g.dtype)
        full[:, :h, :w, :] = g
        return (full,)

    return _emit(tape, out, (a,), _bwd)


def gather_rows(table: Tensor, index: np.ndarray) -> Tensor:
    """``table[index]`` for a [rows, k] table and integer index array."""
    table = as_tensor(table)
    tape = _tape_of(table)
    rows = table.shape[0]
    out = table.data[index]

    def _bwd(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, index.ravel(), g.reshape(-1, g.shape[-1]))
        return (gt,)

    return _emit(tape, out, (table,), _bwd)


# ---------------------------------------------------------------------------
# neural building blocks


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    """Numerically stable softmax along ``axis``."""
    x = as_tensor(x)
    if not np.isfinite(x.data).all():
        raise NumericError("softmax received non-finite input")
    tape = _tape_of(x)
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)

    def _bwd(g):
        dot = (g * y).sum(axis=axis, keepdims=True)
        return (y * (g - dot),)

    return _emit(tape, y, (x,), _bwd)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then affine."""
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ShapeError(f"layer_norm affine shapes {tuple(gamma.shape)}/{tuple(beta.shape)} "
                         f"do not match feature dim {d}")
    tape = _tape_of(x, gamma, beta)
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = gamma.data * xhat + beta.data

    def _bwd(g):
        axes = tuple(range(g.ndim - 1))
        gbeta = g.sum(axis=axes)
        ggamma = (g * xhat).sum(axis=axes)
        gy = g * gamma.data
        gx = inv * (gy - gy.mean(axis=-1, keepdims=True)
                    - xhat * (gy * xhat).mean(axis=-1, keepdims=True))
        return gx, ggamma, gbeta

    return _emit(tape, out, (x, gamma, beta), _bwd)


def gelu(x: Tensor) -> Tensor:
    """Exact-erf GELU: x * Phi(x)."""
    x = as_tensor(x)
    tape = _tape_of(x)
    phi = 0.5 * (1.0 + erf(x.data * _INV_SQRT2))
    out = x.data * phi

    def _bwd(g):
        pdf = np.exp(-0.5 * x.data * x.data) * _INV_SQRT_2PI
        return (g * (phi + x.data * pdf),)

    return _emit(tape, out, (x,), _bwd)


def conv2d(x: Tensor, w: Tensor, bias: Tensor) -> Tensor:
    """Same-padded stride-1 cross-correlation over [b, c, h, w] input.

    Implemented as explicit im2col followed by a matrix product; the kernel
    must be odd-sized so zero padding preserves the spatial size.
    """
    x, w, bias = as_tensor(x), as_tensor(w), as_tensor(bias)
    if x.data.ndim != 4 or w.data.ndim != 4:
        raise ShapeError(f"conv2d expects 4-d input/kernel, got {tuple(x.shape)} / {tuple(w.shape)}")
    b, c_in, h, wd = x.shape
    c_out, c_k, kh, kw = w.shape
    if c_k != c_in:
        raise ShapeError(f"conv2d channel mismatch: input has {c_in}, kernel expects {c_k}")
    if kh % 2 == 0 or kw % 2 == 0:
        raise ShapeError(f"conv2d kernel must be odd-sized, got {kh}x{kw}")
    if bias.shape != (c_out,):
        raise ShapeError(f"conv2d bias shape {tuple(bias.shape)} != ({c_out},)")
    tape = _tape_of(x, w, bias)

    ph, pw = kh // 2, kw // 2
    xp = np.pad(x.data, ((0, 0), (0, 0), (ph, ph), (pw, pw)))
    patches = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))
    # [b, c, h, w, kh, kw] -> [b, h*w, c*kh*kw]
    cols = patches.transpose(0, 2, 3, 1, 4, 5).reshape(b, h * wd, c_in * kh * kw)
    wmat = w.data.reshape(c_out, -1).T
    out = (cols @ wmat + bias.data).transpose(0, 2, 1).reshape(b, c_out, h, wd)

    def _bwd(g):
        gm = g.reshape(b, c_out, h * wd).transpose(0, 2, 1)
        gbias = gm.sum(axis=(0, 1))
        gw = np.tensordot(cols, gm, axes=([0, 1], [0, 1])).T.reshape(w.shape)
        gcols = (gm @ wmat.T).reshape(b, h, wd, c_in, kh, kw).transpose(0, 3, 1, 2, 4, 5)
        gxp = np.zeros_like(xp)
        for i in range(kh):
            for j in range(kw):
                gxp[:, :, i:i + h, j:j + wd] += gcols[:, :, :, :, i, j]
        gx = gxp[:, :, ph:ph + h, pw:pw + wd]
        return gx, gw, gbias

    return _emit(tape, out, (x, w, bias), _bwd)


# ---------------------------------------------------------------------------
# gradient checking


def finite_diff_check(f, inputs, eps: float = 1e-5, seed: int = 0,
                      max_coords_per_input: int | None = None,
                      denom_floor: float = 1e-8) -> float:
    """Compare reverse-mode gradients of scalar ``f`` against central differences.

    ``inputs`` are float64 arrays; ``f`` maps the corresponding Tensors to a
    scalar Tensor and must work both attached and detached. Returns the
    maximum over checked coordinates of |ad - fd| / max(|ad|, |fd|, floor).
    When ``max_coords_per_input`` is set, a seeded subset of coordinates is
    checked per input (used for whole-model checks). For deep compositions
    the difference quotient carries absolute noise around |f|*1e-12/eps, so
    callers checking near-zero gradients through many ops should raise
    ``denom_floor`` above that noise; discrepancies below the floor are then
    judged in absolute terms against it.
    """
    inputs = [np.asarray(x, dtype=np.float64) for x in inputs]
    tape = Tape()
    leaves = [tape.leaf(x) for x in inputs]
    y = f(*leaves)
    backward(y)
    ad_grads = [np.zeros_like(x) if lf.grad is None else lf.grad
                for x, lf in zip(inputs, leaves)]

    def eval_at(arrays) -> float:
        return float(f(*[Tensor(a) for a in arrays]).data)

    rng = np.random.default_rng(seed)
    worst = 0.0
    for i, x in enumerate(inputs):
        flat_coords = np.arange(x.size)
        if max_coords_per_input is not None and x.size > max_coords_per_input:
            flat_coords = rng.choice(x.size, size=max_coords_per_input, replace=False)
        for flat in flat_coords:
            idx = np.unravel_index(flat, x.shape)
            perturbed = [a.copy() for a in inputs]
            perturbed[i][idx] += eps
            hi = eval_at(perturbed)
            perturbed[i][idx] -= 2 * eps
            lo = eval_at(perturbed)
            fd = (hi - lo) / (2 * eps)
            ad = ad_grads[i][idx]
            rel = abs(ad - fd) / max(abs(ad), abs(fd), denom_floor)
            worst = max(worst, rel)
    return worst
