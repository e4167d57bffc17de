"""Differentiable building blocks: convolution, normalization, activation,
resampling, and the patch-window utilities the attention modules rely on.

Spatial convention is channel-first (C, H, W) for single images. All
differentiable ops record themselves on the active tape; the resampling
helpers used only for data preparation work on plain numpy arrays.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import Tensor, _check_finite, record, tracked


@dataclass
class Conv2dParams:
    """Same-padded stride-1 convolution parameters.

    weight: (out_ch, in_ch, kh, kw) with kh, kw odd; bias: (out_ch,).
    """

    weight: Tensor
    bias: Tensor

    @property
    def out_channels(self) -> int:
        return self.weight.shape[0]

    @property
    def in_channels(self) -> int:
        return self.weight.shape[1]


@dataclass
class GroupNormParams:
    """Per-group normalization with a per-channel affine transform."""

    num_groups: int
    gamma: Tensor
    beta: Tensor
    eps: float = 1e-5


# ---------------------------------------------------------------------------
# convolution


def conv2d(x: Tensor, p: Conv2dParams) -> Tensor:
    """Stride-1 zero-same-padded convolution of a (C_in, H, W) image."""
    cin, h, w = x.shape
    cout, cin_w, kh, kw = p.weight.shape
    if kh % 2 == 0 or kw % 2 == 0:
        raise ValueError(f"kernel extents must be odd, got {kh}x{kw}")
    if cin != cin_w:
        raise ValueError(f"conv2d channel mismatch: input {cin}, weight expects {cin_w}")
    ph, pw = (kh - 1) // 2, (kw - 1) // 2

    xpad = np.pad(x.data, ((0, 0), (ph, ph), (pw, pw)))
    cols = np.empty((cin, kh, kw, h, w), dtype=x.dtype)
    for i in range(kh):
        for j in range(kw):
            cols[:, i, j] = xpad[:, i : i + h, j : j + w]
    cols2 = cols.reshape(cin * kh * kw, h * w)
    wmat = p.weight.data.reshape(cout, cin * kh * kw)
    out_data = (wmat @ cols2 + p.bias.data[:, None]).reshape(cout, h, w)
    _check_finite(out_data, "conv2d")
    out = Tensor(out_data)

    need_x, need_w, need_b = tracked(x), tracked(p.weight), tracked(p.bias)
    if not (need_x or need_w or need_b):
        return out

    def vjp_x(g: np.ndarray) -> np.ndarray:
        gcols = (wmat.T @ g.reshape(cout, h * w)).reshape(cin, kh, kw, h, w)
        gpad = np.zeros_like(xpad)
        for i in range(kh):
            for j in range(kw):
                gpad[:, i : i + h, j : j + w] += gcols[:, i, j]
        return gpad[:, ph : ph + h, pw : pw + w]

    def vjp_w(g: np.ndarray) -> np.ndarray:
        return (g.reshape(cout, h * w) @ cols2.T).reshape(cout, cin, kh, kw)

    def vjp_b(g: np.ndarray) -> np.ndarray:
        return g.reshape(cout, -1).sum(axis=1)

    return record(
        out,
        (x, p.weight, p.bias),
        (vjp_x if need_x else None, vjp_w if need_w else None, vjp_b if need_b else None),
    )


def relu(x: Tensor) -> Tensor:
    """max(x, 0); subgradient 0 at the kink."""
    out = Tensor(np.maximum(x.data, 0))
    if not tracked(x):
        return out
    mask = (x.data > 0).astype(x.dtype)
    return record(out, (x,), (lambda g: g * mask,))


def group_norm(x: Tensor, p: GroupNormParams) -> Tensor:
    """Normalize (C, H, W) to zero mean / unit variance per group, then affine."""
    c, h, w = x.shape
    g_cnt = p.num_groups
    if c % g_cnt != 0:
        raise ValueError(f"channels {c} not divisible by num_groups {g_cnt}")
    n = (c // g_cnt) * h * w

    xg = x.data.reshape(g_cnt, n)
    mean = xg.mean(axis=1, keepdims=True)
    var = xg.var(axis=1, keepdims=True)
    inv = 1.0 / np.sqrt(var + p.eps)
    xhat = ((xg - mean) * inv).reshape(c, h, w)
    out_data = xhat * p.gamma.data[:, None, None] + p.beta.data[:, None, None]
    _check_finite(out_data, "group_norm")
    out = Tensor(out_data.astype(x.dtype, copy=False))

    need_x, need_g, need_b = tracked(x), tracked(p.gamma), tracked(p.beta)
    if not (need_x or need_g or need_b):
        return out
    gamma = p.gamma.data

    def vjp_x(g: np.ndarray) -> np.ndarray:
        dxhat = (g * gamma[:, None, None]).reshape(g_cnt, n)
        xh = xhat.reshape(g_cnt, n)
        t1 = dxhat.sum(axis=1, keepdims=True)
        t2 = (dxhat * xh).sum(axis=1, keepdims=True)
        dx = (dxhat - t1 / n - xh * (t2 / n)) * inv
        return dx.reshape(c, h, w).astype(g.dtype, copy=False)

    def vjp_gamma(g: np.ndarray) -> np.ndarray:
        return (g * xhat).reshape(c, -1).sum(axis=1)

    def vjp_beta(g: np.ndarray) -> np.ndarray:
        return g.reshape(c, -1).sum(axis=1)

    return record(
        out,
        (x, p.gamma, p.beta),
        (vjp_x if need_x else None, vjp_gamma if need_g else None, vjp_beta if need_b else None),
    )


def softmax(x: Tensor, axis: int) -> Tensor:
    """Max-subtracted softmax along one axis."""
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out_data = e / e.sum(axis=axis, keepdims=True)
    _check_finite(out_data, "softmax")
    out = Tensor(out_data)
    if not tracked(x):
        return out
    y = out_data

    def vjp(g: np.ndarray) -> np.ndarray:
        return (g - (g * y).sum(axis=axis, keepdims=True)) * y

    return record(out, (x,), (vjp,))


# ---------------------------------------------------------------------------
# patch windows


def window_valid_mask(h: int, w: int, k: int) -> np.ndarray:
    """(k*k, H, W) bool mask: True where the window tap stays inside the frame."""
    if k % 2 == 0:
        raise ValueError("window size must be odd")
    r = k // 2
    ys = np.arange(h)[None, :, None]
    xs = np.arange(w)[None, None, :]
    dy = (np.arange(k * k) // k - r)[:, None, None]
    dx = (np.arange(k * k) % k - r)[:, None, None]
    return (ys + dy >= 0) & (ys + dy < h) & (xs + dx >= 0) & (xs + dx < w)


def unfold_patches(x: np.ndarray, k: int) -> tuple[np.ndarray, np.ndarray]:
    """Extract the k x k window around every pixel of a (C, H, W) array.

    Returns (patches, valid_mask) with patches (C, k*k, H, W): patches[:, j, y, x]
    is the pixel at row-major window offset j of the window centered at (y, x),
    zero-filled where the window leaves the frame, and valid_mask (k*k, H, W)
    flags the in-frame taps.
    """
    if k % 2 == 0:
        raise ValueError("window size must be odd")
    c, h, w = x.shape
    r = k // 2
    xpad = np.pad(x, ((0, 0), (r, r), (r, r)))
    patches = np.empty((c, k * k, h, w), dtype=x.dtype)
    for j in range(k * k):
        dy, dx = divmod(j, k)
        patches[:, j] = xpad[:, dy : dy + h, dx : dx + w]
    return patches, window_valid_mask(h, w, k)


# ---------------------------------------------------------------------------
# pixel shuffle


def _shuffle_arr(x: np.ndarray, r: int) -> np.ndarray:
    c_r2, h, w = x.shape
    c = c_r2 // (r * r)
    return (
        x.reshape(c, r, r, h, w)
        .transpose(0, 3, 1, 4, 2)
        .reshape(c, h * r, w * r)
    )


def _unshuffle_arr(y: np.ndarray, r: int) -> np.ndarray:
    c, hr, wr = y.shape
    h, w = hr // r, wr // r
    return (
        y.reshape(c, h, r, w, r)
        .transpose(0, 2, 4, 1, 3)
        .reshape(c * r * r, h, w)
    )


def pixel_shuffle(x: Tensor, r: int) -> Tensor:
    """Rearrange (C*r^2, H, W) to (C, rH, rW): out[c, r*y+dy, r*x+dx] = in[c*r^2 + dy*r + dx, y, x]."""
    if x.shape[0] % (r * r) != 0:
        raise ValueError(f"channels {x.shape[0]} not divisible by r^2={r * r}")
    out = Tensor(np.ascontiguousarray(_shuffle_arr(x.data, r)))
    if not tracked(x):
        return out
    return record(out, (x,), (lambda g: np.ascontiguousarray(_unshuffle_arr(g, r)),))


def pixel_unshuffle(x: Tensor, r: int) -> Tensor:
    """Inverse of :func:`pixel_shuffle`."""
    if x.shape[1] % r != 0 or x.shape[2] % r != 0:
        raise ValueError("spatial extents not divisible by r")
    out = Tensor(np.ascontiguousarray(_unshuffle_arr(x.data, r)))
    if not tracked(x):
        return out
    return record(out, (x,), (lambda g: np.ascontiguousarray(_shuffle_arr(g, r)),))


# ---------------------------------------------------------------------------
# bilinear upsampling (align_corners=False, edge clamped)


def _linear_taps(n_in: int, factor: int, dtype) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    o = np.arange(n_in * factor, dtype=np.float64)
    src = (o + 0.5) / factor - 0.5
    base = np.floor(src).astype(np.int64)
    frac = (src - base).astype(dtype)
    i0 = np.clip(base, 0, n_in - 1)
    i1 = np.clip(base + 1, 0, n_in - 1)
    return i0, i1, frac


def _upsample_axis(x: np.ndarray, axis: int, factor: int) -> np.ndarray:
    xm = np.moveaxis(x, axis, 0)
    i0, i1, frac = _linear_taps(xm.shape[0], factor, x.dtype)
    shape = (len(frac),) + (1,) * (xm.ndim - 1)
    f = frac.reshape(shape)
    y = xm[i0] * (1 - f) + xm[i1] * f
    return np.moveaxis(y, 0, axis)


def _upsample_axis_t(g: np.ndarray, axis: int, factor: int, n_in: int) -> np.ndarray:
    gm = np.moveaxis(g, axis, 0)
    i0, i1, frac = _linear_taps(n_in, factor, g.dtype)
    shape = (len(frac),) + (1,) * (gm.ndim - 1)
    f = frac.reshape(shape)
    out = np.zeros((n_in,) + gm.shape[1:], dtype=g.dtype)
    np.add.at(out, i0, gm * (1 - f))
    np.add.at(out, i1, gm * f)
    return np.moveaxis(out, 0, axis)


def bilinear_upsample(x: Tensor, factor: int) -> Tensor:
    """Upsample (C, H, W) to (C, fH, fW) with align-corners-false bilinear sampling."""
    if factor < 1:
        raise ValueError("factor must be a positive integer")
    if factor == 1:
        out_data = x.data.copy()
    else:
        out_data = _upsample_axis(_upsample_axis(x.data, 1, factor), 2, factor)
    out = Tensor(out_data)
    if not tracked(x):
        return out
    _, h, w = x.shape

    def vjp(g: np.ndarray) -> np.ndarray:
        if factor == 1:
            return g
        return _upsample_axis_t(_upsample_axis_t(g, 2, factor, w), 1, factor, h)

    return record(out, (x,), (vjp,))


# ---------------------------------------------------------------------------
# bicubic downsampling (data preparation only, not on the tape)


def cubic_kernel(s: np.ndarray, a: float = -0.5) -> np.ndarray:
    """Cubic convolution kernel (Catmull-Rom for a=-0.5), support |s| < 2."""
    s = np.abs(np.asarray(s, dtype=np.float64))
    w = np.zeros_like(s)
    near = s <= 1
    far = (s > 1) & (s < 2)
    w[near] = (a + 2) * s[near] ** 3 - (a + 3) * s[near] ** 2 + 1
    w[far] = a * s[far] ** 3 - 5 * a * s[far] ** 2 + 8 * a * s[far] - 4 * a
    return w


def _cubic_taps(n_out: int, factor: int) -> tuple[np.ndarray, np.ndarray]:
    n_in = n_out * factor
    src = (np.arange(n_out, dtype=np.float64) + 0.5) * factor - 0.5
    base = np.floor(src).astype(np.int64)
    idx = base[:, None] + np.arange(-1, 3)[None, :]
    weights = cubic_kernel(src[:, None] - idx)
    idx = np.clip(idx, 0, n_in - 1)
    return idx, weights


def _downsample_axis(x: np.ndarray, axis: int, factor: int) -> np.ndarray:
    xm = np.moveaxis(x, axis, 0)
    n_out = xm.shape[0] // factor
    idx, weights = _cubic_taps(n_out, factor)
    w = weights.astype(x.dtype).reshape(n_out, 4, *([1] * (xm.ndim - 1)))
    y = (xm[idx] * w).sum(axis=1)
    return np.moveaxis(y, 0, axis)


def bicubic_downsample(x: np.ndarray, factor: int) -> np.ndarray:
    """Downsample a (C, H, W) array by an integer factor with the cubic
    convolution kernel (a=-0.5), align-corners-false source coordinates and
    edge clamping. Point sampling, no anti-alias prefilter."""
    _, h, w = x.shape
    if h % factor != 0 or w % factor != 0:
        raise ValueError(f"spatial extents ({h}, {w}) not divisible by factor {factor}")
    if factor == 1:
        return x.copy()
    return _downsample_axis(_downsample_axis(x, 1, factor), 2, factor)
