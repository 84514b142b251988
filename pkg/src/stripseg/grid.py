"""Dense NCHW grid operations and their backward passes.

Tensors are plain numpy arrays laid out (batch, channel, row, col), float32
by default (float64 in gradient-check mode). Every differentiable op comes in
two flavours: a plain call returning the output, and a ``*_forward`` variant
returning ``(output, ctx)`` whose ctx feeds the matching ``*_backward``.

Conventions shared by the whole package: (row, col) indexing with row
increasing downward, zero padding at borders, max-pool ties broken by the
first index in row-major scan.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .errors import ContractViolation


def check_nchw(x: np.ndarray, name: str = "input") -> None:
    if not isinstance(x, np.ndarray) or x.ndim != 4:
        raise ContractViolation(f"{name} must be a 4-D (n,c,h,w) array, got "
                                f"{getattr(x, 'shape', type(x))}")


@dataclass
class PlainKernel:
    """Standard dense convolution kernel.

    weights: (c_out, c_in, k_h, k_w), k_h and k_w odd so same-size padding is
    well defined; bias: (c_out,).
    """

    weights: np.ndarray
    bias: np.ndarray

    def __post_init__(self):
        if self.weights.ndim != 4:
            raise ContractViolation(
                f"kernel weights must be 4-D (c_out,c_in,k_h,k_w), got {self.weights.shape}")
        co, _, kh, kw = self.weights.shape
        if kh % 2 == 0 or kw % 2 == 0:
            raise ContractViolation(f"kernel window must be odd, got {kh}x{kw}")
        if self.bias.shape != (co,):
            raise ContractViolation(
                f"bias shape {self.bias.shape} does not match c_out={co}")

    @property
    def c_out(self) -> int:
        return self.weights.shape[0]

    @property
    def c_in(self) -> int:
        return self.weights.shape[1]


class Conv2dCtx(NamedTuple):
    cols: np.ndarray          # (n, h*w, c_in*k_h*k_w)
    x_shape: tuple
    kernel: PlainKernel
    pad: int


def _im2col(x: np.ndarray, kh: int, kw: int, pad: int) -> np.ndarray:
    n, c, h, w = x.shape
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))
    # win: (n, c, h, w, kh, kw) -> (n, h*w, c*kh*kw)
    return np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(n, h * w, c * kh * kw)


def conv2d_forward(x: np.ndarray, kernel: PlainKernel, pad: int):
    """Same-size cross-correlation with zero padding. Returns (y, ctx)."""
    check_nchw(x)
    n, c, h, w = x.shape
    co, ci, kh, kw = kernel.weights.shape
    if c != ci:
        raise ContractViolation(f"input has {c} channels but kernel expects c_in={ci}")
    if pad != (kh - 1) // 2 or pad != (kw - 1) // 2:
        raise ContractViolation(
            f"pad={pad} is not the same-size padding for a {kh}x{kw} kernel")
    cols = _im2col(x, kh, kw, pad)
    wmat = kernel.weights.reshape(co, ci * kh * kw)
    y2 = cols @ wmat.T + kernel.bias
    y = y2.reshape(n, h, w, co).transpose(0, 3, 1, 2)
    return np.ascontiguousarray(y), Conv2dCtx(cols, x.shape, kernel, pad)


def conv2d_standard(x: np.ndarray, kernel: PlainKernel, pad: int) -> np.ndarray:
    y, _ = conv2d_forward(x, kernel, pad)
    return y


def conv2d_backward(gy: np.ndarray, ctx: Conv2dCtx):
    """VJP of conv2d_forward: returns (grad_x, grad_weights, grad_bias)."""
    n, c, h, w = ctx.x_shape
    co, ci, kh, kw = ctx.kernel.weights.shape
    pad = ctx.pad
    g2 = np.ascontiguousarray(gy.transpose(0, 2, 3, 1)).reshape(n * h * w, co)
    cols_flat = ctx.cols.reshape(n * h * w, -1)
    gw = (g2.T @ cols_flat).reshape(co, ci, kh, kw)
    gb = g2.sum(axis=0)
    gcols = (g2 @ ctx.kernel.weights.reshape(co, -1)).reshape(n, h, w, ci, kh, kw)
    gpad = np.zeros((n, ci, h + 2 * pad, w + 2 * pad), dtype=gy.dtype)
    for u in range(kh):
        for v in range(kw):
            gpad[:, :, u:u + h, v:v + w] += gcols[:, :, :, :, u, v].transpose(0, 3, 1, 2)
    gx = gpad[:, :, pad:pad + h, pad:pad + w] if pad else gpad
    return np.ascontiguousarray(gx), gw, gb


# ---------------------------------------------------------------------------
# bilinear sampling with zero padding
# ---------------------------------------------------------------------------

def interp_axis(coord, size):
    """Split fractional coordinates into (base index, fraction).

    The cell is [base, base+1] with weight (1-frac, frac). At exact integer
    coordinates on the top in-bounds edge the cell is taken one step back
    (frac = 1), so the derivative there points toward the interior.
    """
    coord = np.asarray(coord)
    base = np.floor(coord)
    frac = coord - base
    edge = (frac == 0) & (base == size - 1)
    base = np.where(edge, base - 1, base).astype(np.int64)
    frac = np.where(edge, coord.dtype.type(1), frac)
    return base, frac


def bilinear_sample(plane: np.ndarray, r: float, c: float) -> float:
    """Bilinear interpolation of a 2-D plane at fractional (row, col).

    Taps falling outside [0,h) x [0,w) contribute 0 (zero padding).
    """
    h, w = plane.shape
    r0, fr = interp_axis(np.float64(r), h)
    c0, fc = interp_axis(np.float64(c), w)
    val = 0.0
    for dr, wr in ((0, 1.0 - fr), (1, fr)):
        for dc, wc in ((0, 1.0 - fc), (1, fc)):
            rr, cc = int(r0) + dr, int(c0) + dc
            if 0 <= rr < h and 0 <= cc < w:
                val += float(wr * wc) * float(plane[rr, cc])
    return val


def bilinear_sample_vjp(plane: np.ndarray, r: float, c: float, grad: float = 1.0):
    """Gradients of bilinear_sample: (grad_plane, grad_r, grad_c)."""
    h, w = plane.shape
    r0, fr = interp_axis(np.float64(r), h)
    c0, fc = interp_axis(np.float64(c), w)
    r0, c0, fr, fc = int(r0), int(c0), float(fr), float(fc)

    def tap(rr, cc):
        return float(plane[rr, cc]) if 0 <= rr < h and 0 <= cc < w else 0.0

    x00, x01 = tap(r0, c0), tap(r0, c0 + 1)
    x10, x11 = tap(r0 + 1, c0), tap(r0 + 1, c0 + 1)
    gplane = np.zeros_like(plane, dtype=np.float64)
    for dr, wr in ((0, 1.0 - fr), (1, fr)):
        for dc, wc in ((0, 1.0 - fc), (1, fc)):
            rr, cc = r0 + dr, c0 + dc
            if 0 <= rr < h and 0 <= cc < w:
                gplane[rr, cc] += grad * wr * wc
    gr = grad * ((1.0 - fc) * (x10 - x00) + fc * (x11 - x01))
    gc = grad * ((1.0 - fr) * (x01 - x00) + fr * (x11 - x10))
    return gplane, gr, gc


# ---------------------------------------------------------------------------
# 2x2 max pooling / nearest-neighbor upsampling
# ---------------------------------------------------------------------------

class PoolCtx(NamedTuple):
    x_shape: tuple
    argmax: np.ndarray  # (n, c, h/2, w/2) flat index into the 2x2 window


def pool_down2_forward(x: np.ndarray):
    check_nchw(x)
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ContractViolation(f"pool_down2 needs even rows/cols, got {h}x{w}")
    win = x.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5)
    flat = win.reshape(n, c, h // 2, w // 2, 4)
    arg = flat.argmax(axis=-1)  # first max in row-major window scan
    y = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]
    return y, PoolCtx(x.shape, arg)


def pool_down2(x: np.ndarray) -> np.ndarray:
    y, _ = pool_down2_forward(x)
    return y


def pool_down2_backward(gy: np.ndarray, ctx: PoolCtx) -> np.ndarray:
    n, c, h, w = ctx.x_shape
    gflat = np.zeros((n, c, h // 2, w // 2, 4), dtype=gy.dtype)
    np.put_along_axis(gflat, ctx.argmax[..., None], gy[..., None], axis=-1)
    gwin = gflat.reshape(n, c, h // 2, w // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5)
    return np.ascontiguousarray(gwin.reshape(n, c, h, w))


def upsample2(x: np.ndarray) -> np.ndarray:
    """Nearest-neighbor doubling of rows and cols."""
    check_nchw(x)
    return x.repeat(2, axis=2).repeat(2, axis=3)


def upsample2_backward(gy: np.ndarray) -> np.ndarray:
    n, c, h2, w2 = gy.shape
    return gy.reshape(n, c, h2 // 2, 2, w2 // 2, 2).sum(axis=(3, 5))


# ---------------------------------------------------------------------------
# pointwise nonlinearities
# ---------------------------------------------------------------------------

def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0)


def relu_vjp(gy: np.ndarray, x: np.ndarray) -> np.ndarray:
    return gy * (x > 0)


def sigmoid(x: np.ndarray) -> np.ndarray:
    """Numerically stable logistic; output clipped strictly inside (0, 1)."""
    x = np.asarray(x)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    info = np.finfo(out.dtype)
    return np.clip(out, info.tiny, 1.0 - info.epsneg)


def sigmoid_vjp(gy: np.ndarray, y: np.ndarray) -> np.ndarray:
    """VJP given the forward output y = sigmoid(x)."""
    return gy * y * (1.0 - y)


def pointwise(x: np.ndarray, kind: str) -> np.ndarray:
    if kind == "relu":
        return relu(x)
    if kind == "sigmoid":
        return sigmoid(x)
    raise ContractViolation(f"unknown pointwise kind {kind!r}")
