"""Differentiable kernels.

Every function takes and returns :class:`Tensor` objects and records a
backward closure when any input requires a gradient. Layouts are NCHW.
"""

from __future__ import annotations

import math
from contextlib import contextmanager
from dataclasses import dataclass
from typing import Iterator, List, Optional, Sequence

import numpy as np
from numpy.lib.stride_tricks import as_strided, sliding_window_view

from .tensor import Tensor, make_result

# While a recorder is active, every piecewise branch decision (ReLU signs,
# pooling winners) is appended here; finite-difference probes compare
# these to tell whether a perturbation stepped across a kink.
_branch_log: Optional[List[np.ndarray]] = None


@contextmanager
def record_branches() -> Iterator[List[np.ndarray]]:
    global _branch_log
    prev, _branch_log = _branch_log, []
    try:
        yield _branch_log
    finally:
        _branch_log = prev


def _log_branch(decision: np.ndarray) -> None:
    if _branch_log is not None:
        _branch_log.append(decision)


@dataclass
class ConvParams:
    weight: Tensor  # (out_c, in_c, kh, kw)
    bias: Optional[Tensor]  # (out_c,)
    stride: int = 1
    padding: int = 0
    ceil_mode: bool = False

    @property
    def out_channels(self) -> int:
        return self.weight.shape[0]

    @property
    def in_channels(self) -> int:
        return self.weight.shape[1]


@dataclass
class BatchNormParams:
    gamma: Tensor
    beta: Tensor
    running_mean: np.ndarray
    running_var: np.ndarray
    eps: float = 1e-5
    momentum: float = 0.9

    def __post_init__(self):
        if self.eps <= 0:
            raise ValueError("eps must be positive")
        if not 0.0 < self.momentum < 1.0:
            raise ValueError("momentum must lie in (0, 1)")
        if np.any(self.running_var < 0):
            raise ValueError("running_var must be non-negative")


def output_size(n: int, k: int, stride: int, padding: int = 0, ceil_mode: bool = False) -> int:
    """Spatial output length of a sliding window op."""
    if stride < 1:
        raise ValueError(f"stride must be positive, got {stride}")
    span = n + 2 * padding - k
    if n < 1 or span < 0:
        raise ValueError(f"window {k} does not fit input {n} with padding {padding}")
    if not ceil_mode:
        return span // stride + 1
    out = -(-span // stride) + 1
    # the last window has to start inside the input or the left padding
    if (out - 1) * stride >= n + padding:
        out -= 1
    return out


def _require4(x: Tensor, what: str) -> None:
    if x.ndim != 4:
        raise ValueError(f"{what} expects a rank-4 NCHW tensor, got shape {x.shape}")


def _pad(a: np.ndarray, pad: int, need_h: int, need_w: int, value: float) -> np.ndarray:
    """Pad symmetric ``pad`` and extend bottom/right so the array is at least need_h x need_w."""
    n, c, h, w = a.shape
    extra_h = max(0, need_h - (h + 2 * pad))
    extra_w = max(0, need_w - (w + 2 * pad))
    if pad == 0 and extra_h == 0 and extra_w == 0:
        return a
    out = np.full((n, c, h + 2 * pad + extra_h, w + 2 * pad + extra_w), value, dtype=a.dtype)
    out[:, :, pad:pad + h, pad:pad + w] = a
    return out


def _windows(xp: np.ndarray, kh: int, kw: int, stride: int, oh: int, ow: int) -> np.ndarray:
    view = sliding_window_view(xp, (kh, kw), axis=(2, 3))
    return view[:, :, ::stride, ::stride][:, :, :oh, :ow]  # (N, C, oh, ow, kh, kw)


def _im2col(xp: np.ndarray, kh: int, kw: int, s: int, oh: int, ow: int) -> np.ndarray:
    """(N, C, Hp, Wp) -> (N, C*kh*kw, oh*ow) with contiguous output rows."""
    n, c = xp.shape[:2]
    cols = np.empty((n, c, kh, kw, oh, ow), dtype=xp.dtype)
    for i in range(kh):
        for j in range(kw):
            cols[:, :, i, j] = xp[:, :, i:i + s * oh:s, j:j + s * ow:s]
    return cols.reshape(n, c * kh * kw, oh * ow)


def conv2d(x: Tensor, p: ConvParams) -> Tensor:
    """Cross-correlation plus bias, computed as a batched im2col matmul."""
    _require4(x, "conv2d")
    w = p.weight.data
    out_c, in_c, kh, kw = w.shape
    n, c, h, wd = x.shape
    if c != in_c:
        raise ValueError(f"conv2d channel mismatch: input has {c}, weights expect {in_c}")
    s, pad = p.stride, p.padding
    oh = output_size(h, kh, s, pad, p.ceil_mode)
    ow = output_size(wd, kw, s, pad, p.ceil_mode)
    need_h, need_w = (oh - 1) * s + kh, (ow - 1) * s + kw
    pointwise = kh == 1 and kw == 1 and s == 1 and pad == 0
    xd = x.data
    if s == 1 and not pointwise and not p.ceil_mode:
        return _conv2d_shifted(x, p, oh, ow)
    if pointwise:
        cols = xd.reshape(n, c, h * wd)
        hp, wp = h, wd
    else:
        xp = _pad(xd, pad, need_h, need_w, 0.0)
        hp, wp = xp.shape[2:]
        cols = _im2col(xp, kh, kw, s, oh, ow)
    wm = w.reshape(out_c, -1)
    out = np.matmul(wm, cols)
    if p.bias is not None:
        out += p.bias.data[:, None]
    out = out.reshape(n, out_c, oh, ow)

    weight, bias = p.weight, p.bias

    def backward(g: np.ndarray) -> None:
        gm = g.reshape(n, out_c, oh * ow)
        if weight.requires_grad:
            dw = np.zeros_like(wm)
            for b in range(n):
                dw += gm[b] @ cols[b].T
            weight.accumulate(dw.reshape(w.shape))
        if bias is not None and bias.requires_grad:
            bias.accumulate(gm.sum(axis=(0, 2)))
        if not x.requires_grad:
            return
        dcols = np.matmul(wm.T, gm)
        if pointwise:
            x.accumulate(dcols.reshape(n, c, h, wd))
            return
        dcols = dcols.reshape(n, c, kh, kw, oh, ow)
        dxp = np.zeros((n, c, hp, wp), dtype=xd.dtype)
        for i in range(kh):
            for j in range(kw):
                dxp[:, :, i:i + s * oh:s, j:j + s * ow:s] += dcols[:, :, i, j]
        x.accumulate(dxp[:, :, pad:pad + h, pad:pad + wd])

    parents = [x, weight] + ([bias] if bias is not None else [])
    return make_result(out, parents, backward)


def _shifted_cols(flat: np.ndarray, kh: int, kw: int, wp: int, span: int) -> np.ndarray:
    """(C, L) flattened padded image -> (C*kh*kw, span) rows, one per (channel, tap)."""
    c = flat.shape[0]
    st = flat.strides
    view = as_strided(flat, (c, kh, kw, span), (st[0], wp * st[1], st[1], st[1]), writeable=False)
    return view.reshape(c * kh * kw, span)


def _conv2d_shifted(x: Tensor, p: ConvParams, oh: int, ow: int) -> Tensor:
    """Stride-1 convolution as one matmul per kernel tap.

    The padded image is flattened per channel; the input window for tap
    (i, j) is then the contiguous slice starting at i*Wp + j. Outputs are
    computed on the padded width and the wrap-around columns dropped.
    """
    w = p.weight.data
    out_c, c, kh, kw = w.shape
    n, _, h, wd = x.shape
    pad = p.padding
    hp, wp = h + 2 * pad, wd + 2 * pad
    flat = np.zeros((n, c, (hp + 1) * wp), dtype=x.dtype)
    flat.reshape(n, c, hp + 1, wp)[:, :, pad:pad + h, pad:pad + wd] = x.data
    span = oh * wp
    taps = [(i, j, i * wp + j) for i in range(kh) for j in range(kw)]
    wm = w.reshape(out_c, c * kh * kw)
    full = np.empty((n, out_c, span), dtype=x.dtype)
    for b in range(n):
        np.matmul(wm, _shifted_cols(flat[b], kh, kw, wp, span), out=full[b])
    if p.bias is not None:
        full += p.bias.data[:, None]
    out = np.ascontiguousarray(full.reshape(n, out_c, oh, wp)[:, :, :, :ow])

    weight, bias = p.weight, p.bias

    def backward(g: np.ndarray) -> None:
        gfull = np.zeros((n, out_c, oh, wp), dtype=g.dtype)
        gfull[:, :, :, :ow] = g
        gfull = gfull.reshape(n, out_c, span)
        if bias is not None and bias.requires_grad:
            bias.accumulate(g.sum(axis=(0, 2, 3)))
        if weight.requires_grad:
            dw = np.zeros((out_c, c * kh * kw), dtype=g.dtype)
            for b in range(n):
                dw += gfull[b] @ _shifted_cols(flat[b], kh, kw, wp, span).T
            weight.accumulate(dw.reshape(w.shape))
        if x.requires_grad:
            dflat = np.zeros_like(flat)
            wstack = np.ascontiguousarray(w.transpose(2, 3, 1, 0)).reshape(kh * kw * c, out_c)
            for b in range(n):
                per_tap = (wstack @ gfull[b]).reshape(kh * kw, c, span)
                for t, (_, _, off) in enumerate(taps):
                    dflat[b, :, off:off + span] += per_tap[t]
            x.accumulate(dflat.reshape(n, c, hp + 1, wp)[:, :, pad:pad + h, pad:pad + wd])

    parents = [x, weight] + ([bias] if bias is not None else [])
    return make_result(out, parents, backward)


def max_pool2d(x: Tensor, k: int = 2, stride: int = 2, ceil_mode: bool = True) -> Tensor:
    """Window maximum. Ties send the gradient to the first element in row-major order."""
    _require4(x, "max_pool2d")
    if k < 1 or stride < 1:
        raise ValueError("pool size and stride must be >= 1")
    n, c, h, w = x.shape
    if h == 0 or w == 0:
        raise ValueError("max_pool2d on empty spatial extent")
    oh = output_size(h, k, stride, 0, ceil_mode)
    ow = output_size(w, k, stride, 0, ceil_mode)
    xp = _pad(x.data, 0, (oh - 1) * stride + k, (ow - 1) * stride + k, -np.inf)
    if k == stride:
        return _max_pool_tiled(x, xp, k, oh, ow)
    win = _windows(xp, k, k, stride, oh, ow).reshape(n, c, oh, ow, k * k)
    arg = win.argmax(axis=-1)
    _log_branch(arg)
    out = np.take_along_axis(win, arg[..., None], axis=-1)[..., 0]
    hp, wp = xp.shape[2:]

    def backward(g: np.ndarray) -> None:
        dxp = np.zeros((n, c, hp, wp), dtype=g.dtype)
        for idx in range(k * k):
            i, j = divmod(idx, k)
            dxp[:, :, i:i + stride * oh:stride, j:j + stride * ow:stride] += np.where(arg == idx, g, 0.0)
        x.accumulate(dxp[:, :, :h, :w])

    return make_result(out, [x], backward)


def _max_pool_tiled(x: Tensor, xp: np.ndarray, k: int, oh: int, ow: int) -> Tensor:
    """Non-overlapping windows: strided maxima, no window copies."""
    n, c, h, w = x.shape
    offsets = [(i, j) for i in range(k) for j in range(k)]
    out = xp[:, :, 0:k * oh:k, 0:k * ow:k].copy()
    for i, j in offsets[1:]:
        np.maximum(out, xp[:, :, i:i + k * oh:k, j:j + k * ow:k], out=out)
    hp, wp = xp.shape[2:]
    if _branch_log is not None:
        winner = np.full(out.shape, -1)
        for t, (i, j) in enumerate(offsets):
            hit = (xp[:, :, i:i + k * oh:k, j:j + k * ow:k] == out) & (winner < 0)
            winner[hit] = t
        _log_branch(winner)

    def backward(g: np.ndarray) -> None:
        dxp = np.zeros((n, c, hp, wp), dtype=g.dtype)
        taken = np.zeros(out.shape, dtype=bool)
        for i, j in offsets:
            hit = xp[:, :, i:i + k * oh:k, j:j + k * ow:k] == out
            hit &= ~taken
            taken |= hit
            dxp[:, :, i:i + k * oh:k, j:j + k * ow:k] = np.where(hit, g, 0.0)
        x.accumulate(dxp[:, :, :h, :w])

    return make_result(out, [x], backward)


def interpolation_matrix(n_in: int, n_out: int, dtype=np.float64) -> np.ndarray:
    """Row-stochastic (n_out, n_in) matrix of half-pixel linear interpolation weights."""
    if n_in < 1 or n_out < 1:
        raise ValueError("interpolation sizes must be >= 1")
    src = (np.arange(n_out, dtype=np.float64) + 0.5) * (n_in / n_out) - 0.5
    src = np.clip(src, 0.0, n_in - 1)
    lo = np.floor(src).astype(np.int64)
    hi = np.minimum(lo + 1, n_in - 1)
    frac = src - lo
    m = np.zeros((n_out, n_in), dtype=np.float64)
    rows = np.arange(n_out)
    np.add.at(m, (rows, lo), 1.0 - frac)
    np.add.at(m, (rows, hi), frac)
    return m.astype(dtype)


def bilinear_resize(x: Tensor, out_h: int, out_w: int) -> Tensor:
    _require4(x, "bilinear_resize")
    n, c, h, w = x.shape
    if (out_h, out_w) == (h, w):
        return make_result(x.data.copy(), [x], x.accumulate)
    mh = interpolation_matrix(h, out_h, x.dtype)
    mw = interpolation_matrix(w, out_w, x.dtype)
    out = np.matmul(np.matmul(mh, x.data), mw.T)

    def backward(g: np.ndarray) -> None:
        x.accumulate(np.matmul(mh.T, np.matmul(g, mw)))

    return make_result(out, [x], backward)


def batch_norm(x: Tensor, p: BatchNormParams, training: bool) -> Tensor:
    """Per-channel normalization over (N, H, W).

    In training mode the batch statistics are used and the running
    estimates are updated in place (unbiased variance, momentum weighting
    on the old value).
    """
    _require4(x, "batch_norm")
    c = x.shape[1]
    if p.gamma.shape != (c,) or p.beta.shape != (c,):
        raise ValueError(f"batch_norm parameters sized {p.gamma.shape} for {c} channels")
    xd = x.data
    gamma = p.gamma.data.reshape(1, c, 1, 1)
    if training:
        m = xd.size // c
        mean = xd.mean(axis=(0, 2, 3))
        centered = xd - mean.reshape(1, c, 1, 1)
        var = (centered * centered).mean(axis=(0, 2, 3))
        inv_std = 1.0 / np.sqrt(var + p.eps)
        xhat = centered * inv_std.reshape(1, c, 1, 1)
        unbiased = var * (m / (m - 1)) if m > 1 else var
        p.running_mean[...] = p.momentum * p.running_mean + (1.0 - p.momentum) * mean
        p.running_var[...] = p.momentum * p.running_var + (1.0 - p.momentum) * unbiased
    else:
        m = None
        inv_std = 1.0 / np.sqrt(p.running_var.astype(xd.dtype) + p.eps)
        xhat = (xd - p.running_mean.astype(xd.dtype).reshape(1, c, 1, 1)) * inv_std.reshape(1, c, 1, 1)
    out = gamma * xhat + p.beta.data.reshape(1, c, 1, 1)

    g_param, b_param = p.gamma, p.beta

    def backward(g: np.ndarray) -> None:
        if g_param.requires_grad:
            g_param.accumulate((g * xhat).sum(axis=(0, 2, 3)))
        if b_param.requires_grad:
            b_param.accumulate(g.sum(axis=(0, 2, 3)))
        if not x.requires_grad:
            return
        dxhat = g * gamma
        if m is None:
            x.accumulate(dxhat * inv_std.reshape(1, c, 1, 1))
            return
        s1 = dxhat.sum(axis=(0, 2, 3)).reshape(1, c, 1, 1)
        s2 = (dxhat * xhat).sum(axis=(0, 2, 3)).reshape(1, c, 1, 1)
        x.accumulate((inv_std.reshape(1, c, 1, 1) / m) * (m * dxhat - s1 - xhat * s2))

    return make_result(out, [x, g_param, b_param], backward)


def relu(x: Tensor) -> Tensor:
    out = np.maximum(x.data, 0)
    _log_branch(out > 0)

    def backward(g: np.ndarray) -> None:
        x.accumulate(g * (out > 0))

    return make_result(out, [x], backward)


def concat(xs: Sequence[Tensor], axis: int) -> Tensor:
    xs = list(xs)
    if not xs:
        raise ValueError("concat of an empty list")
    ref = list(xs[0].shape)
    for t in xs[1:]:
        other = list(t.shape)
        if len(other) != len(ref) or any(a != b for i, (a, b) in enumerate(zip(ref, other)) if i != axis):
            raise ValueError(f"concat shape mismatch: {tuple(ref)} vs {t.shape} along axis {axis}")
    out = np.concatenate([t.data for t in xs], axis=axis)
    bounds = np.cumsum([0] + [t.shape[axis] for t in xs])

    def backward(g: np.ndarray) -> None:
        for t, lo, hi in zip(xs, bounds[:-1], bounds[1:]):
            if t.requires_grad:
                index = [slice(None)] * g.ndim
                index[axis] = slice(lo, hi)
                t.accumulate(g[tuple(index)])

    return make_result(out, xs, backward)


def concat_channels(xs: Sequence[Tensor]) -> Tensor:
    for t in xs:
        _require4(t, "concat_channels")
    return concat(xs, axis=1)


def slice_channels(x: Tensor, start: int, stop: int) -> Tensor:
    _require4(x, "slice_channels")
    out = x.data[:, start:stop].copy()

    def backward(g: np.ndarray) -> None:
        full = np.zeros_like(x.data)
        full[:, start:stop] = g
        x.accumulate(full)

    return make_result(out, [x], backward)


def elementwise_add(xs: Sequence[Tensor]) -> Tensor:
    xs = list(xs)
    if not xs:
        raise ValueError("elementwise_add of an empty list")
    for t in xs[1:]:
        if t.shape != xs[0].shape:
            raise ValueError(f"elementwise_add shape mismatch: {xs[0].shape} vs {t.shape}")
    out = xs[0].data.copy()
    for t in xs[1:]:
        out += t.data

    def backward(g: np.ndarray) -> None:
        for t in xs:
            if t.requires_grad:
                t.accumulate(g)

    return make_result(out, xs, backward)


def scale(x: Tensor, factor: float) -> Tensor:
    def backward(g: np.ndarray) -> None:
        x.accumulate(g * factor)

    return make_result(x.data * factor, [x], backward)


def total(x: Tensor) -> Tensor:
    """Sum of all elements as a 0-d tensor."""
    def backward(g: np.ndarray) -> None:
        x.accumulate(np.broadcast_to(g, x.shape))

    return make_result(np.asarray(x.data.sum(), dtype=x.dtype), [x], backward)


def reshape(x: Tensor, shape: tuple) -> Tensor:
    old = x.shape

    def backward(g: np.ndarray) -> None:
        x.accumulate(g.reshape(old))

    return make_result(x.data.reshape(shape), [x], backward)


def channels_last_rows(x: Tensor, width: int) -> Tensor:
    """(N, A*width, H, W) -> (N, H*W*A, width), rows ordered (row, col, anchor)."""
    _require4(x, "channels_last_rows")
    n, c, h, w = x.shape
    if c % width:
        raise ValueError(f"{c} channels is not a multiple of {width}")
    out = np.ascontiguousarray(x.data.transpose(0, 2, 3, 1)).reshape(n, h * w * (c // width), width)

    def backward(g: np.ndarray) -> None:
        x.accumulate(g.reshape(n, h, w, c).transpose(0, 3, 1, 2))

    return make_result(out, [x], backward)


def gather_rows(x: Tensor, index: np.ndarray) -> Tensor:
    """Select rows of a 2-D tensor; repeated indices accumulate in backward."""
    if x.ndim != 2:
        raise ValueError("gather_rows expects a 2-D tensor")
    index = np.asarray(index, dtype=np.int64)
    out = x.data[index]

    def backward(g: np.ndarray) -> None:
        full = np.zeros_like(x.data)
        np.add.at(full, index, g)
        x.accumulate(full)

    return make_result(out, [x], backward)


def log_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_cross_entropy(logits: Tensor, targets) -> Tensor:
    """Per-row negative log-likelihood of ``targets`` under softmax(logits)."""
    if logits.ndim != 2:
        raise ValueError("softmax_cross_entropy expects (rows, classes) logits")
    rows, k = logits.shape
    targets = np.asarray(targets, dtype=np.int64)
    if targets.shape != (rows,):
        raise ValueError(f"expected {rows} targets, got shape {targets.shape}")
    if rows and (targets.min() < 0 or targets.max() >= k):
        raise ValueError(f"target outside [0, {k})")
    logp = log_softmax(logits.data)
    r = np.arange(rows)
    out = -logp[r, targets]

    def backward(g: np.ndarray) -> None:
        d = np.exp(logp)
        d[r, targets] -= 1.0
        logits.accumulate(d * g[:, None])

    return make_result(out, [logits], backward)


def smooth_l1(pred: Tensor, target) -> Tensor:
    """Huber loss with unit transition point, elementwise."""
    tgt = target if isinstance(target, Tensor) else Tensor(np.asarray(target, dtype=pred.dtype))
    if pred.shape != tgt.shape:
        raise ValueError(f"smooth_l1 shape mismatch: {pred.shape} vs {tgt.shape}")
    d = pred.data - tgt.data
    ad = np.abs(d)
    out = np.where(ad < 1.0, 0.5 * d * d, ad - 0.5)

    def backward(g: np.ndarray) -> None:
        dg = g * np.clip(d, -1.0, 1.0)
        if pred.requires_grad:
            pred.accumulate(dg)
        if tgt.requires_grad:
            tgt.accumulate(-dg)

    return make_result(out, [pred, tgt], backward)


def xavier_uniform(rng: np.random.Generator, shape: tuple, dtype=np.float64) -> np.ndarray:
    out_c, in_c = shape[0], shape[1]
    receptive = int(np.prod(shape[2:])) if len(shape) > 2 else 1
    bound = math.sqrt(6.0 / ((in_c + out_c) * receptive))
    return rng.uniform(-bound, bound, size=shape).astype(dtype)
