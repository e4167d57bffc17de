"""Cross-frame one-hot windowed attention, memory-bank attention, and the
residual fusion that feeds both back into the current frame feature.

The windowed kernel only ever holds one 81-entry correlation row per query
pixel per frame (a k*k x H x W buffer), never a full HW x HW matrix. Every
correlation buffer allocation is reported to the active
:class:`CorrelationMeter`, which is how the memory benchmark measures the
windowed-vs-full footprint gap.
"""

from __future__ import annotations

from contextlib import contextmanager
from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .ops import Conv2dParams, conv2d, softmax
from .tensor import Tensor, record, reshape, stack, tracked, transpose

TEMPORAL_REDUCES = ("sum", "mean", "global_max")


@dataclass
class QkvEmbeddings:
    """1x1 convolutions mapping C-channel features into the C' embedding space.

    ``wm`` is an optional dedicated memory-query embedding; when absent the
    memory bank is queried with the same embedded Q as the cross-frame path.
    """

    wq: Conv2dParams
    wk: Conv2dParams
    wv: Conv2dParams
    wm: Conv2dParams | None = None


@dataclass
class MemoryBank:
    """Learnable (C', N) matrix of global detail prototypes."""

    m: Tensor

    @property
    def channels(self) -> int:
        return self.m.shape[0]

    @property
    def entries(self) -> int:
        return self.m.shape[1]


@dataclass
class OneHotAttnResult:
    """Fused value output plus the per-frame selection record.

    scores[y, x, t] is the winning correlation of query pixel (y, x) against
    frame t's window; indices[y, x, t] is the winning row-major window offset.
    """

    x_t: Tensor
    scores: np.ndarray
    indices: np.ndarray


# ---------------------------------------------------------------------------
# correlation-buffer accounting


class CorrelationMeter:
    """Records the element count of every correlation buffer allocation."""

    def __init__(self):
        self.allocations: list[int] = []

    def note(self, n_elements: int) -> None:
        self.allocations.append(int(n_elements))

    @property
    def total(self) -> int:
        return sum(self.allocations)

    @property
    def peak(self) -> int:
        return max(self.allocations, default=0)


_METER: CorrelationMeter | None = None


def _note_corr(n_elements: int) -> None:
    if _METER is not None:
        _METER.note(n_elements)


@contextmanager
def measure_correlation_buffers():
    """Context manager that captures correlation-buffer allocation sizes."""
    global _METER
    if _METER is not None:
        raise RuntimeError("correlation meter already active")
    meter = CorrelationMeter()
    _METER = meter
    try:
        yield meter
    finally:
        _METER = None


# ---------------------------------------------------------------------------
# embeddings


def embed_qkv(frames_norm: list[Tensor], e: QkvEmbeddings) -> tuple[Tensor, Tensor, Tensor]:
    """Embed normalized frame features into query, key, and value tensors.

    The query comes from the temporal center frame only; keys and values are
    built from every frame and stacked along a new axis 1, giving
    Q (C', H, W) and K, V (C', T, H, W).
    """
    t = len(frames_norm)
    if t % 2 == 0:
        raise ValueError(f"frame count must be odd, got {t}")
    center = (t - 1) // 2
    q = conv2d(frames_norm[center], e.wq)
    k = stack([conv2d(f, e.wk) for f in frames_norm], axis=1)
    v = stack([conv2d(f, e.wv) for f in frames_norm], axis=1)
    return q, k, v


# ---------------------------------------------------------------------------
# windowed one-hot attention


def _window_geometry(mask: np.ndarray, h: int, w: int) -> tuple[int, int]:
    k2 = mask.shape[0]
    k = int(round(k2**0.5))
    if k * k != k2 or k % 2 == 0:
        raise ValueError(f"valid_mask first extent {k2} is not an odd square")
    if mask.shape[1:] != (h, w):
        raise ValueError(f"valid_mask spatial extents {mask.shape[1:]} != {(h, w)}")
    if not mask.any(axis=0).all():
        raise ValueError("some pixel has every window position masked")
    return k, k // 2


def cross_frame_one_hot_attention(
    q: Tensor,
    k: Tensor,
    v: Tensor,
    valid_mask: np.ndarray,
    reduce: str = "sum",
) -> OneHotAttnResult:
    """Per-pixel windowed one-hot attention of Q against each frame of K/V.

    For every query pixel and every temporal slice, correlates the query
    vector against the k*k window of key columns around the same position
    (out-of-frame taps masked to -inf), keeps only the single best entry
    (score s, offset d; ties break to the lowest offset), and contributes
    s * V[:, d]. Per-frame contributions combine according to ``reduce``.
    The backward pass treats d as constant and routes gradients through the
    score and the selected value column only.
    """
    if reduce not in TEMPORAL_REDUCES:
        raise ValueError(f"reduce must be one of {TEMPORAL_REDUCES}, got {reduce!r}")
    cp, h, w = q.shape
    if k.ndim != 4 or v.ndim != 4 or k.shape != v.shape:
        raise ValueError(f"K and V must both be (C', T, H, W), got {k.shape} and {v.shape}")
    if k.shape[0] != cp or k.shape[2:] != (h, w):
        raise ValueError(f"K shape {k.shape} inconsistent with Q shape {q.shape}")
    t_len = k.shape[1]
    kk, r = _window_geometry(valid_mask, h, w)

    qd, kd, vd = q.data, k.data, v.data
    neg_inf = np.array(-np.inf, dtype=qd.dtype)
    ygrid = np.arange(h)[:, None]
    xgrid = np.arange(w)[None, :]

    scores = np.empty((h, w, t_len), dtype=qd.dtype)
    indices = np.empty((h, w, t_len), dtype=np.int64)
    contribs = np.empty((t_len, cp, h, w), dtype=qd.dtype)
    row_sel = np.empty((t_len, h, w), dtype=np.int64)
    col_sel = np.empty((t_len, h, w), dtype=np.int64)

    for ti in range(t_len):
        kpad = np.pad(kd[:, ti], ((0, 0), (r, r), (r, r)))
        windows = sliding_window_view(kpad, (kk, kk), axis=(1, 2))  # (C', H, W, k, k)
        corr = np.einsum("chw,chwij->ijhw", qd, windows).reshape(kk * kk, h, w)
        _note_corr(corr.size)
        corr[~valid_mask] = neg_inf
        d = corr.argmax(axis=0)
        s = corr.max(axis=0)
        rows = ygrid + d // kk - r
        cols = xgrid + d % kk - r
        vsel = vd[:, ti, rows, cols]
        scores[:, :, ti] = s
        indices[:, :, ti] = d
        contribs[ti] = s[None] * vsel
        row_sel[ti] = rows
        col_sel[ti] = cols

    if reduce == "sum":
        x_data = contribs.sum(axis=0)
    elif reduce == "mean":
        x_data = contribs.mean(axis=0)
    else:  # global_max: per pixel keep only the best frame's contribution
        best = scores.argmax(axis=2)
        x_data = np.ascontiguousarray(
            np.take_along_axis(contribs, best[None, None], axis=0)[0]
        )
    out = Tensor(x_data)

    need_q, need_k, need_v = tracked(q), tracked(k), tracked(v)
    if need_q or need_k or need_v:
        if reduce == "global_max":
            best = scores.argmax(axis=2)

        def frame_gain(ti: int) -> np.ndarray | float:
            if reduce == "sum":
                return 1.0
            if reduce == "mean":
                return 1.0 / t_len
            return (best == ti).astype(qd.dtype)

        def vjp_q(g: np.ndarray) -> np.ndarray:
            gq = np.zeros_like(qd)
            for ti in range(t_len):
                geff = g * frame_gain(ti)
                vsel = vd[:, ti, row_sel[ti], col_sel[ti]]
                grad_s = (geff * vsel).sum(axis=0)
                ksel = kd[:, ti, row_sel[ti], col_sel[ti]]
                gq += grad_s[None] * ksel
            return gq

        def vjp_k(g: np.ndarray) -> np.ndarray:
            gk = np.zeros_like(kd)
            cidx = np.arange(cp)[:, None, None]
            for ti in range(t_len):
                geff = g * frame_gain(ti)
                vsel = vd[:, ti, row_sel[ti], col_sel[ti]]
                grad_s = (geff * vsel).sum(axis=0)
                np.add.at(
                    gk[:, ti], (cidx, row_sel[ti][None], col_sel[ti][None]), grad_s[None] * qd
                )
            return gk

        def vjp_v(g: np.ndarray) -> np.ndarray:
            gv = np.zeros_like(vd)
            cidx = np.arange(cp)[:, None, None]
            for ti in range(t_len):
                geff = g * frame_gain(ti)
                s = scores[:, :, ti]
                np.add.at(
                    gv[:, ti], (cidx, row_sel[ti][None], col_sel[ti][None]), s[None] * geff
                )
            return gv

        record(
            out,
            (q, k, v),
            (vjp_q if need_q else None, vjp_k if need_k else None, vjp_v if need_v else None),
        )
    return OneHotAttnResult(x_t=out, scores=scores, indices=indices)


def full_nonlocal_one_hot(
    q: np.ndarray,
    k: np.ndarray,
    v: np.ndarray,
    valid_mask: np.ndarray,
    reduce: str = "sum",
) -> np.ndarray:
    """Memory-hungry variant used by the benchmark: materializes the full
    HW x HW correlation per frame, then applies the same window restriction
    and one-hot selection. Forward only; must agree with the windowed kernel.
    """
    if reduce not in TEMPORAL_REDUCES:
        raise ValueError(f"reduce must be one of {TEMPORAL_REDUCES}, got {reduce!r}")
    cp, h, w = q.shape
    t_len = k.shape[1]
    kk, r = _window_geometry(valid_mask, h, w)
    hw = h * w

    # allowed[p, j] : key pixel j lies inside query pixel p's window
    ys, xs = np.divmod(np.arange(hw), w)
    dy = ys[None, :] - ys[:, None]
    dx = xs[None, :] - xs[:, None]
    allowed = (np.abs(dy) <= r) & (np.abs(dx) <= r)

    qhat = q.reshape(cp, hw).T
    scores = np.empty((hw, t_len), dtype=q.dtype)
    picks = np.empty((hw, t_len), dtype=np.int64)
    contribs = np.empty((t_len, cp, hw), dtype=q.dtype)
    for ti in range(t_len):
        corr = qhat @ k[:, ti].reshape(cp, hw)  # (HW, HW)
        _note_corr(corr.size)
        corr[~allowed] = -np.inf
        j = corr.argmax(axis=1)
        scores[:, ti] = corr[np.arange(hw), j]
        picks[:, ti] = j
        contribs[ti] = scores[:, ti][None] * v[:, ti].reshape(cp, hw)[:, j]

    if reduce == "sum":
        out = contribs.sum(axis=0)
    elif reduce == "mean":
        out = contribs.mean(axis=0)
    else:
        best = scores.argmax(axis=1)
        out = np.take_along_axis(contribs, best[None, None], axis=0)[0]
    return out.reshape(cp, h, w)


# ---------------------------------------------------------------------------
# memory-bank attention


def memory_attention(q: Tensor, bank: MemoryBank) -> Tensor:
    """Softmax attention of every query pixel over the memory bank columns.

    Correlates flattened queries (HW, C') against the bank (C', N), softmaxes
    over the N entries, and mixes the transposed bank back in, so each output
    pixel is a convex combination of memory columns. Differentiable in both
    the query and the bank.
    """
    cp, h, w = q.shape
    if bank.m.shape[0] != cp:
        raise ValueError(
            f"memory bank has {bank.m.shape[0]} rows, query has {cp} channels"
        )
    qhat = transpose(reshape(q, cp, h * w), 1, 0)  # (HW, C')
    corr = qhat @ bank.m  # (HW, N)
    weights = softmax(corr, axis=1)
    yhat = weights @ transpose(bank.m, 1, 0)  # (HW, C')
    return reshape(transpose(yhat, 1, 0), cp, h, w)


def memory_attention_weights(q: Tensor, bank: MemoryBank) -> np.ndarray:
    """(HW, N) softmax weights the memory attention would use; forward only."""
    cp, h, w = q.shape
    qhat = q.data.reshape(cp, h * w).T
    corr = qhat @ bank.m.data
    shifted = corr - corr.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


# ---------------------------------------------------------------------------
# residual fusion


def fuse_residual(
    f_t: Tensor,
    x_t: Tensor,
    y_t: Tensor | None,
    fx: Conv2dParams,
    fy: Conv2dParams | None,
) -> Tensor:
    """F_t + fx(x_t) + fy(y_t): 1x1-convolved attention outputs added back as
    residuals. With zero-initialized fx/fy this is exactly F_t, which is the
    fresh-model startup state. ``y_t``/``fy`` may be None when the memory
    branch is disabled."""
    out = f_t + conv2d(x_t, fx)
    if y_t is not None:
        if fy is None:
            raise ValueError("y_t given without its fusion convolution")
        out = out + conv2d(y_t, fy)
    return out
