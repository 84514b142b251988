"""Shape self-learning strip convolution.

The operator runs four length-m strip kernels over the input, one per
direction (x horizontal, y vertical, z diagonal, w anti-diagonal). The strip
midpoint stays fixed; every other tap carries a signed displacement
perpendicular to the strip, read off an OffsetField. Displacements are built
by squashing predicted raw increments through tanh and cumulatively summing
them outward from the midpoint, so adjacent taps never drift more than 1
apart. Sampling at the displaced fractional positions is bilinear with zero
padding; the four directional responses are summed and a shared bias added.

Backward passes are analytic. Internally everything runs on a channels-last
(batch*row*col, channel) layout; products are accumulated in float64 and cast
back to the input dtype.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import NamedTuple, Optional, Sequence

import numpy as np

from .errors import ContractViolation
from .grid import PlainKernel, check_nchw, conv2d_forward, interp_axis

DIRECTION_NAMES = ("x", "y", "z", "w")
_INV_SQRT2 = 1.0 / math.sqrt(2.0)

# per direction: tangent (dr, dc) stepping along the strip, unit perpendicular
# (pr, pc) scaling the displacement
_DIR_SPECS = (
    ((0, 1), (1.0, 0.0)),            # x: horizontal strip, shifts along rows
    ((1, 0), (0.0, 1.0)),            # y: vertical strip, shifts along cols
    ((1, 1), (-_INV_SQRT2, _INV_SQRT2)),   # z: diagonal strip
    ((-1, 1), (_INV_SQRT2, _INV_SQRT2)),   # w: anti-diagonal strip
)


def normalize_directions(directions) -> tuple:
    """Map direction names or indices to a sorted tuple of indices 0..3."""
    if directions is None:
        return (0, 1, 2, 3)
    out = []
    for d in directions:
        if isinstance(d, str):
            if d not in DIRECTION_NAMES:
                raise ContractViolation(f"unknown direction {d!r}")
            out.append(DIRECTION_NAMES.index(d))
        else:
            if not 0 <= int(d) < 4:
                raise ContractViolation(f"direction index {d} out of range")
            out.append(int(d))
    return tuple(sorted(set(out)))


@dataclass
class StripKernelSet:
    """Weights for the four directional strips plus the offset predictor.

    weights: (4, c_out, c_in, m) ordered (x, y, z, w); bias: (c_out,) shared
    across directions; offset_predictor: optional PlainKernel with
    c_out = 4*(m-1) emitting raw, unbounded per-tap increments.
    """

    weights: np.ndarray
    bias: np.ndarray
    offset_predictor: Optional[PlainKernel] = None

    def __post_init__(self):
        if self.weights.ndim != 4 or self.weights.shape[0] != 4:
            raise ContractViolation(
                f"strip weights must be (4,c_out,c_in,m), got {self.weights.shape}")
        m = self.m
        if m % 2 == 0 or m < 3:
            raise ContractViolation(f"strip length must be odd and >= 3, got {m}")
        if self.bias.shape != (self.c_out,):
            raise ContractViolation(
                f"bias shape {self.bias.shape} does not match c_out={self.c_out}")
        if self.offset_predictor is not None:
            pred = self.offset_predictor
            if pred.c_in != self.c_in:
                raise ContractViolation(
                    f"offset predictor c_in={pred.c_in} != strip c_in={self.c_in}")
            if pred.c_out != 4 * (m - 1):
                raise ContractViolation(
                    f"offset predictor c_out={pred.c_out} != 4*(m-1)={4 * (m - 1)}")

    @property
    def m(self) -> int:
        return self.weights.shape[3]

    @property
    def half(self) -> int:
        return (self.m - 1) // 2

    @property
    def c_out(self) -> int:
        return self.weights.shape[1]

    @property
    def c_in(self) -> int:
        return self.weights.shape[2]


@dataclass
class OffsetField:
    """Per-position perpendicular tap displacements, (n, 4, m-1, h, w).

    Along axis 2 the first (m-1)/2 slots are the taps below the midpoint
    ordered outward (-1, -2, ...), the rest the taps above it (+1, +2, ...).
    The midpoint itself is pinned at displacement 0 and is not stored.
    """

    delta: np.ndarray

    def __post_init__(self):
        if self.delta.ndim != 5 or self.delta.shape[1] != 4:
            raise ContractViolation(
                f"offset field must be (n,4,m-1,h,w), got {self.delta.shape}")

    @property
    def m(self) -> int:
        return self.delta.shape[2] + 1

    def max_adjacent_step(self) -> float:
        """Largest |delta_i - delta_{i-1}| over adjacent taps (midpoint
        included), with the differences taken exactly in float64."""
        half = (self.m - 1) // 2
        d64 = self.delta.astype(np.float64, copy=False)
        worst = 0.0
        for side in range(2):
            prev = np.zeros(d64.shape[:2] + d64.shape[3:])
            for k in range(half):
                cur = d64[:, :, side * half + k]
                worst = max(worst, float(np.abs(cur - prev).max(initial=0.0)))
                prev = cur
        return worst


def tap_slot(t: int, half: int) -> int:
    """OffsetField slot for strip tap t (t != 0), counted outward per side."""
    return -t - 1 if t < 0 else half + t - 1


# ---------------------------------------------------------------------------
# offset prediction and accumulation
# ---------------------------------------------------------------------------

def predict_raw_increments_forward(x: np.ndarray, predictor: PlainKernel):
    check_nchw(x)
    if predictor.c_in != x.shape[1]:
        raise ContractViolation(
            f"input has {x.shape[1]} channels but predictor expects c_in={predictor.c_in}")
    if predictor.c_out % 8 != 0:
        raise ContractViolation(
            f"predictor c_out={predictor.c_out} is not 4*(m-1) for an odd m")
    pad = (predictor.weights.shape[2] - 1) // 2
    return conv2d_forward(x, predictor, pad)


def predict_raw_increments(x: np.ndarray, predictor: PlainKernel) -> np.ndarray:
    """Raw unbounded increment grid, (n, 4*(m-1), h, w)."""
    raw, _ = predict_raw_increments_forward(x, predictor)
    return raw


class AccumulateCtx(NamedTuple):
    inc: np.ndarray   # tanh-squashed increments, (n, 4, m-1, h, w)
    m: int


def _step_bounds(prev: np.ndarray):
    """Largest/smallest representable values exactly within +-1 of prev.

    The running sum and its +-1 bounds round in the working precision, so a
    plain clip can land an ulp past the true limit; nudge such bounds one ulp
    inward (differences of stored values are checked exactly via float64)."""
    prev64 = prev.astype(np.float64, copy=False)
    hi = (prev64 + 1.0).astype(prev.dtype)
    over = hi.astype(np.float64) - prev64 > 1.0
    hi = np.where(over, np.nextafter(hi, -np.inf), hi)
    lo = (prev64 - 1.0).astype(prev.dtype)
    under = prev64 - lo.astype(np.float64) > 1.0
    lo = np.where(under, np.nextafter(lo, np.inf), lo)
    return lo, hi


def accumulate_offsets_forward(raw: np.ndarray, m: int):
    """Squash raw increments through tanh and cumulate them outward.

    Returns (OffsetField, ctx). Each squashed increment lies in [-1, 1], so
    adjacent taps end up at most 1 apart; clipping at exact representable
    bounds absorbs the sub-ulp rounding of the running sum so the constraint
    holds exactly, not just to rounding error.
    """
    check_nchw(raw)
    nb, ch, h, w = raw.shape
    if ch != 4 * (m - 1):
        raise ContractViolation(f"raw has {ch} channels, expected 4*(m-1)={4 * (m - 1)}")
    half = (m - 1) // 2
    inc = np.tanh(raw).reshape(nb, 4, m - 1, h, w)
    delta = np.empty_like(inc)
    for side in range(2):
        s0 = side * half
        prev = np.zeros((nb, 4, h, w), dtype=inc.dtype)
        for k in range(half):
            lo, hi = _step_bounds(prev)
            cur = np.clip(prev + inc[:, :, s0 + k], lo, hi)
            delta[:, :, s0 + k] = cur
            prev = cur
    return OffsetField(delta), AccumulateCtx(inc, m)


def accumulate_offsets(raw: np.ndarray, m: int) -> OffsetField:
    field, _ = accumulate_offsets_forward(raw, m)
    return field


def accumulate_offsets_backward(gdelta: np.ndarray, ctx: AccumulateCtx) -> np.ndarray:
    """VJP onto the raw increments, returned as (n, 4*(m-1), h, w)."""
    inc, m = ctx
    half = (m - 1) // 2
    ginc = np.empty_like(gdelta)
    for side in range(2):
        s0 = side * half
        # delta_k = sum of increments 1..k, so each increment collects the
        # gradients of every tap at or beyond it on its side
        acc = np.zeros(gdelta.shape[:2] + gdelta.shape[3:], dtype=gdelta.dtype)
        for k in reversed(range(half)):
            acc = acc + gdelta[:, :, s0 + k]
            ginc[:, :, s0 + k] = acc
    graw = ginc * (1.0 - inc.astype(gdelta.dtype) ** 2)
    nb, _, _, h, w = graw.shape
    return graw.reshape(nb, 4 * (m - 1), h, w)


# ---------------------------------------------------------------------------
# strip correlation with displaced taps
# ---------------------------------------------------------------------------

def _tap_corners(d: int, t: int, delta_flat, nb: int, h: int, w: int,
                 rows_flat: np.ndarray, cols_flat: np.ndarray, batch_off: np.ndarray):
    """Corner terms for one (direction, tap) pair.

    Returns a list of (flat_index, weight, dweight) triples over all
    nb*h*w positions; weight and dweight are zeroed where the corner falls
    outside the plane, dweight is the derivative of the weight w.r.t. the
    displacement (None when delta is None).
    """
    (tr, tc), (pr, pc) = _DIR_SPECS[d]
    base_r = rows_flat + tr * t  # (h*w,) ints
    base_c = cols_flat + tc * t
    has_delta = delta_flat is not None
    terms = []

    def emit(rr, cc, wgt, dwgt, valid):
        wgt = np.broadcast_to(wgt, (nb, h * w)) * valid
        idx = np.where(valid, rr * w + cc, 0) + batch_off
        dw = None
        if dwgt is not None:
            dw = np.broadcast_to(dwgt, (nb, h * w)) * valid
        terms.append((idx.reshape(-1), wgt.reshape(-1),
                      dw.reshape(-1) if dw is not None else None))

    if not has_delta or (pr == 0.0 and pc == 0.0):
        valid = (base_r >= 0) & (base_r < h) & (base_c >= 0) & (base_c < w)
        one = np.float32(1.0) if delta_flat is None else delta_flat.dtype.type(1.0)
        emit(np.broadcast_to(base_r, (nb, h * w)), np.broadcast_to(base_c, (nb, h * w)),
             one, None, np.broadcast_to(valid, (nb, h * w)))
        return terms

    dt = delta_flat.dtype
    pr = dt.type(pr)
    pc = dt.type(pc)
    if pc == 0.0:
        # fractional rows, integer cols (x strips)
        rows = base_r.astype(dt) + pr * delta_flat
        r0, fr = interp_axis(rows, h)
        cvalid = (base_c >= 0) & (base_c < w)
        for dr, wr, dwr in ((0, 1.0 - fr, -pr), (1, fr, pr)):
            rr = r0 + dr
            valid = cvalid & (rr >= 0) & (rr < h)
            emit(rr, np.broadcast_to(base_c, rr.shape), wr,
                 np.full_like(fr, dwr), valid)
        return terms

    if pr == 0.0:
        # integer rows, fractional cols (y strips)
        cols = base_c.astype(dt) + pc * delta_flat
        c0, fc = interp_axis(cols, w)
        rvalid = (base_r >= 0) & (base_r < h)
        for dc, wc, dwc in ((0, 1.0 - fc, -pc), (1, fc, pc)):
            cc = c0 + dc
            valid = rvalid & (cc >= 0) & (cc < w)
            emit(np.broadcast_to(base_r, cc.shape), cc, wc,
                 np.full_like(fc, dwc), valid)
        return terms

    # both coordinates fractional (diagonal strips)
    rows = base_r.astype(dt) + pr * delta_flat
    cols = base_c.astype(dt) + pc * delta_flat
    r0, fr = interp_axis(rows, h)
    c0, fc = interp_axis(cols, w)
    for dr, wr, swr in ((0, 1.0 - fr, dt.type(-1.0)), (1, fr, dt.type(1.0))):
        rr = r0 + dr
        rv = (rr >= 0) & (rr < h)
        for dc, wc, swc in ((0, 1.0 - fc, dt.type(-1.0)), (1, fc, dt.type(1.0))):
            cc = c0 + dc
            valid = rv & (cc >= 0) & (cc < w)
            emit(rr, cc, wr * wc, swr * pr * wc + swc * pc * wr, valid)
    return terms


def _scatter_rows(dest_t: np.ndarray, idx: np.ndarray, rows_t: np.ndarray) -> None:
    """dest_t[:, idx[n]] += rows_t[:, n], accumulating duplicate targets.

    Channel-by-channel bincount beats ufunc.at by ~3x at these widths."""
    n = dest_t.shape[1]
    for c in range(dest_t.shape[0]):
        dest_t[c] += np.bincount(idx, weights=rows_t[c], minlength=n)


class SslCtx(NamedTuple):
    x: np.ndarray
    x2f: np.ndarray            # channels-last flat view, (n*h*w, c_in)
    kernels: StripKernelSet
    offsets: Optional[OffsetField]
    directions: tuple
    acc_ctx: Optional[AccumulateCtx]


def ssl_forward_ctx(x: np.ndarray, kernels: StripKernelSet,
                    offsets: Optional[OffsetField],
                    directions: Optional[Sequence] = None,
                    acc_ctx: Optional[AccumulateCtx] = None):
    check_nchw(x)
    nb, ci, h, w = x.shape
    if ci != kernels.c_in:
        raise ContractViolation(
            f"input has {ci} channels but strip kernels expect c_in={kernels.c_in}")
    m, half = kernels.m, kernels.half
    if offsets is not None:
        expect = (nb, 4, m - 1, h, w)
        if offsets.delta.shape != expect:
            raise ContractViolation(
                f"offset field shape {offsets.delta.shape} does not match {expect}")
    directions = normalize_directions(directions)

    x2f = np.ascontiguousarray(x.transpose(0, 2, 3, 1)).reshape(nb * h * w, ci)
    x2f64 = x2f.astype(np.float64, copy=False)
    rows_flat = np.repeat(np.arange(h, dtype=np.int64), w)
    cols_flat = np.tile(np.arange(w, dtype=np.int64), h)
    batch_off = (np.arange(nb, dtype=np.int64) * (h * w))[:, None]

    # products and sums accumulate in float64 so the zero-offset case agrees
    # with a direct-summation oracle to well under 1e-6
    y2 = np.zeros((nb * h * w, kernels.c_out), dtype=np.float64)
    for d in directions:
        # (m, ci, co) contiguous per tap, so every product is a BLAS call
        wdt = np.ascontiguousarray(
            kernels.weights[d].transpose(2, 1, 0)).astype(np.float64, copy=False)
        for ti in range(m):
            t = ti - half
            if t == 0:
                y2 += x2f64 @ wdt[ti]
                continue
            dflat = None
            if offsets is not None:
                dflat = offsets.delta[:, d, tap_slot(t, half)].reshape(nb, h * w)
            sampled = None
            for idx, wgt, _ in _tap_corners(d, t, dflat, nb, h, w,
                                            rows_flat, cols_flat, batch_off):
                if not wgt.any():
                    continue
                term = wgt[:, None] * np.take(x2f, idx, axis=0)
                sampled = term if sampled is None else sampled + term
            if sampled is not None:
                y2 += sampled.astype(np.float64, copy=False) @ wdt[ti]
    y2 += kernels.bias.astype(np.float64)
    y = y2.reshape(nb, h, w, kernels.c_out).transpose(0, 3, 1, 2)
    y = np.ascontiguousarray(y, dtype=x.dtype)
    return y, SslCtx(x, x2f, kernels, offsets, directions, acc_ctx)


def ssl_forward(x: np.ndarray, kernels: StripKernelSet,
                offsets: Optional[OffsetField],
                directions: Optional[Sequence] = None) -> np.ndarray:
    y, _ = ssl_forward_ctx(x, kernels, offsets, directions)
    return y


class SslGrads(NamedTuple):
    x: np.ndarray
    weights: np.ndarray
    bias: np.ndarray
    raw: Optional[np.ndarray]    # gradient on raw increments (needs acc_ctx)
    delta: Optional[np.ndarray]  # gradient on the OffsetField displacements


def ssl_backward(gy: np.ndarray, ctx: SslCtx) -> SslGrads:
    """Exact VJP of ssl_forward composed with accumulate_offsets."""
    if not isinstance(ctx, SslCtx):
        raise ContractViolation("ssl_backward needs the ctx from ssl_forward_ctx")
    x, x2f, kernels, offsets, directions, acc_ctx = ctx
    nb, ci, h, w = x.shape
    if gy.shape != (nb, kernels.c_out, h, w):
        raise ContractViolation(
            f"grad shape {gy.shape} does not match forward output "
            f"{(nb, kernels.c_out, h, w)}")
    m, half, co = kernels.m, kernels.half, kernels.c_out

    ct = x.dtype
    n_flat = nb * h * w
    gy2f = np.ascontiguousarray(gy.transpose(0, 2, 3, 1)).reshape(n_flat, co)
    gy2f = gy2f.astype(ct, copy=False)
    gy2ft = np.ascontiguousarray(gy2f.T)  # (co, N)
    rows_flat = np.repeat(np.arange(h, dtype=np.int64), w)
    cols_flat = np.tile(np.arange(w, dtype=np.int64), h)
    batch_off = (np.arange(nb, dtype=np.int64) * (h * w))[:, None]

    gxt = np.zeros((ci, n_flat), dtype=ct)  # transposed channels-first grads
    gw = np.zeros(kernels.weights.shape, dtype=ct)
    gbias = gy2f.sum(axis=0, dtype=np.float64)
    gdelta = None
    if offsets is not None:
        gdelta = np.zeros((nb, 4, m - 1, h, w), dtype=ct)

    sampled_buf = np.empty((n_flat, ci), dtype=ct)
    for d in directions:
        # (m, co, ci) contiguous so every per-tap product is a BLAS call
        wdc = np.ascontiguousarray(kernels.weights[d].transpose(2, 0, 1)).astype(
            ct, copy=False)
        for ti in range(m):
            t = ti - half
            wd_t = wdc[ti]  # (co, ci)
            if t == 0:
                gw[d, :, :, ti] = (x2f.T @ gy2f).T
                gxt += wd_t.T @ gy2ft
                continue
            dflat = None
            if offsets is not None:
                dflat = offsets.delta[:, d, tap_slot(t, half)].reshape(nb, h * w)
            corners = _tap_corners(d, t, dflat, nb, h, w,
                                   rows_flat, cols_flat, batch_off)
            gsamp = gy2f @ wd_t if (dflat is not None or ci <= co) else None
            canvast = None if ci <= co else np.zeros((co, n_flat), dtype=ct)
            gtap = None
            filled = False
            for idx, wgt, dw in corners:
                if not (wgt.any() or (dw is not None and dw.any())):
                    continue
                g = np.take(x2f, idx, axis=0)
                if filled:
                    sampled_buf += wgt[:, None] * g
                else:
                    np.multiply(wgt[:, None], g, out=sampled_buf)
                    filled = True
                if ci <= co:
                    _scatter_rows(gxt, idx, wgt[None, :] * gsamp.T)
                else:
                    _scatter_rows(canvast, idx, wgt[None, :] * gy2ft)
                if dflat is not None:
                    step = dw * np.einsum("nc,nc->n", g, gsamp)
                    gtap = step if gtap is None else gtap + step
            if filled:
                gw[d, :, :, ti] = (sampled_buf.T @ gy2f).T
            if canvast is not None:
                gxt += wd_t.T @ canvast
            if gtap is not None:
                gdelta[:, d, tap_slot(t, half)] += gtap.reshape(nb, h, w)

    gx = gxt.reshape(ci, nb, h, w).transpose(1, 0, 2, 3)
    gx = np.ascontiguousarray(gx, dtype=x.dtype)
    graw = None
    if gdelta is not None and acc_ctx is not None:
        graw = accumulate_offsets_backward(gdelta, acc_ctx).astype(x.dtype, copy=False)
    if gdelta is not None:
        gdelta = gdelta.astype(offsets.delta.dtype, copy=False)
    return SslGrads(gx, gw.astype(kernels.weights.dtype, copy=False),
                    gbias.astype(kernels.bias.dtype, copy=False), graw, gdelta)
