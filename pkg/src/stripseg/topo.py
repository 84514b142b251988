"""Hierarchical topology constraints on 2-D mask planes.

Centerline constraint: soft Dice between differentiable soft skeletons.
Mask constraint: soft Dice between prediction and ground truth.
Connectivity constraint: mean BCE over an 8-channel neighbor-connectivity
cube. The three terms sum (optionally weighted) into the total loss.

Masks are 2-D (row, col) planes: probabilities in [0, 1] for predictions,
strictly {0, 1} for ground truth. The soft skeleton is the iterated
min/max-pool construction used in centerline-Dice training losses;
hard_skeleton is Zhang-Suen thinning and is evaluation-only.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple, Optional

import numpy as np

from .errors import ContractViolation

DICE_EPS = 1e-6
BCE_CLAMP = 1e-7

# 8-neighbor offsets in raster order; channel k and channel 7-k point at each
# other (reciprocity)
CONNECTIVITY_OFFSETS = (
    (-1, -1), (-1, 0), (-1, 1),
    (0, -1), (0, 1),
    (1, -1), (1, 0), (1, 1),
)


def opposite_channel(k: int) -> int:
    return 7 - k


def _check_same_dims(a: np.ndarray, b: np.ndarray, what: str) -> None:
    if a.shape != b.shape:
        raise ContractViolation(f"{what}: shapes {a.shape} and {b.shape} differ")


def _check_binary(mask: np.ndarray, name: str) -> None:
    if not np.isin(mask, (0, 1)).all():
        raise ContractViolation(f"{name} must be strictly binary 0/1")


# ---------------------------------------------------------------------------
# 3x3 neighborhood min/max with gradient routing
# ---------------------------------------------------------------------------

_OFFS9 = tuple((di, dj) for di in (-1, 0, 1) for dj in (-1, 0, 1))


def _stack_neighbors(plane: np.ndarray, fill: float) -> np.ndarray:
    h, w = plane.shape
    stack = np.full((9, h, w), fill, dtype=plane.dtype)
    for k, (di, dj) in enumerate(_OFFS9):
        stack[k,
              max(0, -di):min(h, h - di),
              max(0, -dj):min(w, w - dj)] = plane[max(0, di):min(h, h + di),
                                                  max(0, dj):min(w, w + dj)]
    return stack


def _neigh_min(plane: np.ndarray):
    stack = _stack_neighbors(plane, np.inf)
    arg = stack.argmin(axis=0).astype(np.int8)  # first index in raster scan
    val = np.take_along_axis(stack, arg[None].astype(np.intp), axis=0)[0]
    return val, arg


def _neigh_max(plane: np.ndarray):
    stack = _stack_neighbors(plane, -np.inf)
    arg = stack.argmax(axis=0).astype(np.int8)
    val = np.take_along_axis(stack, arg[None].astype(np.intp), axis=0)[0]
    return val, arg


def _neigh_backward(g: np.ndarray, arg: np.ndarray) -> np.ndarray:
    h, w = g.shape
    offs = np.asarray(_OFFS9)
    di = offs[arg.astype(np.intp), 0]
    dj = offs[arg.astype(np.intp), 1]
    rows = np.arange(h)[:, None] + di
    cols = np.arange(w)[None, :] + dj
    out = np.zeros_like(g)
    np.add.at(out, (rows, cols), g)
    return out


# ---------------------------------------------------------------------------
# soft skeleton (differentiable)
# ---------------------------------------------------------------------------

class _SkelStep(NamedTuple):
    arg_erode: np.ndarray
    arg_open_erode: np.ndarray
    arg_open_dilate: np.ndarray
    mask_delta: np.ndarray
    mask_resid: np.ndarray
    delta: np.ndarray
    skel_before: np.ndarray


class SoftSkeletonCtx(NamedTuple):
    mask0_open_erode: np.ndarray
    mask0_open_dilate: np.ndarray
    mask0_relu: np.ndarray
    steps: tuple


def _soft_open(plane: np.ndarray):
    eroded, arg_e = _neigh_min(plane)
    opened, arg_d = _neigh_max(eroded)
    return opened, arg_e, arg_d


def soft_skeleton_forward(mask: np.ndarray, iterations: int):
    """Differentiable skeleton by iterated erosion/opening. Returns (skel, ctx)."""
    if mask.ndim != 2:
        raise ContractViolation(f"mask must be a 2-D plane, got {mask.shape}")
    if iterations < 1:
        raise ContractViolation(f"iterations must be >= 1, got {iterations}")
    if mask.size and (mask.min() < 0 or mask.max() > 1):
        raise ContractViolation("mask values must lie in [0, 1]")
    if mask.dtype.kind != "f":
        mask = mask.astype(np.float64)

    img = mask
    opened, arg_e0, arg_d0 = _soft_open(img)
    pre0 = img - opened
    skel = np.maximum(pre0, 0)
    mask0 = pre0 > 0
    steps = []
    for _ in range(iterations):
        img, arg_e = _neigh_min(img)
        opened, arg_oe, arg_od = _soft_open(img)
        pre_d = img - opened
        delta = np.maximum(pre_d, 0)
        pre_r = delta - skel * delta
        resid = np.maximum(pre_r, 0)
        steps.append(_SkelStep(arg_e, arg_oe, arg_od, pre_d > 0, pre_r > 0,
                               delta, skel))
        skel = skel + resid
    return skel, SoftSkeletonCtx(arg_e0, arg_d0, mask0, tuple(steps))


def soft_skeleton(mask: np.ndarray, iterations: int = 10) -> np.ndarray:
    skel, _ = soft_skeleton_forward(mask, iterations)
    return skel


def soft_skeleton_backward(g: np.ndarray, ctx: SoftSkeletonCtx) -> np.ndarray:
    g_skel = g.astype(g.dtype, copy=True)
    g_img = np.zeros_like(g)
    for step in reversed(ctx.steps):
        g_resid = g_skel * step.mask_resid
        g_delta = g_resid * (1.0 - step.skel_before)
        g_skel = g_skel - g_resid * step.delta
        g_pre = g_delta * step.mask_delta
        # opened = dilate(erode(img)); delta = relu(img - opened)
        g_opened = _neigh_backward(-g_pre, step.arg_open_dilate)
        g_e = g_pre + _neigh_backward(g_opened, step.arg_open_erode) + g_img
        g_img = _neigh_backward(g_e, step.arg_erode)
    g_pre0 = g_skel * ctx.mask0_relu
    g_opened0 = _neigh_backward(-g_pre0, ctx.mask0_open_dilate)
    return g_img + g_pre0 + _neigh_backward(g_opened0, ctx.mask0_open_erode)


# ---------------------------------------------------------------------------
# hard skeleton (Zhang-Suen thinning, evaluation only)
# ---------------------------------------------------------------------------

def hard_skeleton(mask: np.ndarray) -> np.ndarray:
    """Morphological thinning to a 1-px-wide 8-connected skeleton."""
    if mask.ndim != 2:
        raise ContractViolation(f"mask must be a 2-D plane, got {mask.shape}")
    _check_binary(mask, "hard_skeleton input")
    img = mask.astype(np.uint8)
    h, w = img.shape
    # clockwise neighbors starting north: p2..p9
    ring = ((-1, 0), (-1, 1), (0, 1), (1, 1), (1, 0), (1, -1), (0, -1), (-1, -1))

    def neighbors(im):
        pad = np.pad(im, 1)
        return [pad[1 + di:1 + di + h, 1 + dj:1 + dj + w] for di, dj in ring]

    changed = True
    while changed:
        changed = False
        for phase in range(2):
            p = neighbors(img)
            b = sum(int_p.astype(np.int32) for int_p in p)
            seq = p + [p[0]]
            a = sum(((seq[k] == 0) & (seq[k + 1] == 1)).astype(np.int32)
                    for k in range(8))
            if phase == 0:
                c3 = p[0] * p[2] * p[4] == 0   # p2*p4*p6
                c4 = p[2] * p[4] * p[6] == 0   # p4*p6*p8
            else:
                c3 = p[0] * p[2] * p[6] == 0   # p2*p4*p8
                c4 = p[0] * p[4] * p[6] == 0   # p2*p6*p8
            cond = (img == 1) & (b >= 2) & (b <= 6) & (a == 1) & c3 & c4
            if cond.any():
                img[cond] = 0
                changed = True
    return img.astype(mask.dtype)


# ---------------------------------------------------------------------------
# neighbor connectivity
# ---------------------------------------------------------------------------

def connectivity_cube(mask: np.ndarray, mode: str = "foreground") -> np.ndarray:
    """8-channel cube marking which neighbors of each pixel connect to it.

    Channel k follows CONNECTIVITY_OFFSETS raster order. In the default
    "foreground" mode C[k](i,j) = 1 iff both (i,j) and its k-th neighbor are
    foreground; "equality" marks any value-equal in-bounds pair. Channels
    pointing out of bounds are always 0.
    """
    if mask.ndim != 2:
        raise ContractViolation(f"mask must be a 2-D plane, got {mask.shape}")
    _check_binary(mask, "connectivity mask")
    if mode not in ("foreground", "equality"):
        raise ContractViolation(f"unknown connectivity mode {mode!r}")
    h, w = mask.shape
    m = mask.astype(np.uint8)
    pad = np.pad(m, 1)
    inb = np.pad(np.ones((h, w), np.uint8), 1)
    cube = np.zeros((8, h, w), dtype=np.uint8)
    for k, (di, dj) in enumerate(CONNECTIVITY_OFFSETS):
        nb = pad[1 + di:1 + di + h, 1 + dj:1 + dj + w]
        ok = inb[1 + di:1 + di + h, 1 + dj:1 + dj + w]
        if mode == "foreground":
            cube[k] = m & nb & ok
        else:
            cube[k] = (m == nb) & ok
    return cube


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------

@dataclass
class LossBreakdown:
    l_mask: float
    l_cl: float
    l_con: float
    total: float

    @classmethod
    def make(cls, l_mask: float, l_cl: float, l_con: float) -> "LossBreakdown":
        return cls(l_mask, l_cl, l_con, l_mask + l_cl + l_con)


def _soft_dice_loss(pred: np.ndarray, gt: np.ndarray):
    """Soft Dice loss and its gradient w.r.t. pred (float64 internals)."""
    p = pred.astype(np.float64, copy=False)
    g = gt.astype(np.float64, copy=False)
    inter = float((p * g).sum())
    denom = float(p.sum() + g.sum()) + DICE_EPS
    loss = 1.0 - (2.0 * inter + DICE_EPS) / denom
    grad = (2.0 * inter + DICE_EPS) / denom ** 2 - 2.0 * g / denom
    return loss, grad


def loss_mask(pred: np.ndarray, gt: np.ndarray) -> float:
    """Soft Dice loss between a probability plane and a binary mask."""
    _check_same_dims(pred, gt, "loss_mask")
    loss, _ = _soft_dice_loss(pred, gt)
    return loss


def loss_mask_grad(pred: np.ndarray, gt: np.ndarray):
    _check_same_dims(pred, gt, "loss_mask")
    loss, grad = _soft_dice_loss(pred, gt)
    return loss, grad.astype(pred.dtype, copy=False)


def loss_centerline(pred: np.ndarray, gt: np.ndarray, iterations: int = 10) -> float:
    """Soft Dice between the soft skeletons of prediction and ground truth."""
    _check_same_dims(pred, gt, "loss_centerline")
    sp = soft_skeleton(pred, iterations)
    sg = soft_skeleton(gt, iterations)
    loss, _ = _soft_dice_loss(sp, sg)
    return loss


def loss_centerline_grad(pred: np.ndarray, gt: np.ndarray, iterations: int = 10):
    _check_same_dims(pred, gt, "loss_centerline")
    sp, ctx = soft_skeleton_forward(pred, iterations)
    sg = soft_skeleton(gt, iterations)
    loss, gskel = _soft_dice_loss(sp, sg)
    grad = soft_skeleton_backward(gskel.astype(pred.dtype, copy=False), ctx)
    return loss, grad


def loss_connectivity(pred_cube: np.ndarray, gt_cube: np.ndarray) -> float:
    """Mean binary cross-entropy over all 8*h*w connectivity entries."""
    loss, _ = _bce(pred_cube, gt_cube)
    return loss


def loss_connectivity_grad(pred_cube: np.ndarray, gt_cube: np.ndarray):
    loss, grad = _bce(pred_cube, gt_cube)
    return loss, grad.astype(pred_cube.dtype, copy=False)


def _bce(pred: np.ndarray, gt: np.ndarray):
    _check_same_dims(pred, gt, "loss_connectivity")
    y = gt.astype(np.float64, copy=False)
    p = pred.astype(np.float64, copy=False)
    clamped = np.clip(p, BCE_CLAMP, 1.0 - BCE_CLAMP)
    n = pred.size
    loss = float(-(y * np.log(clamped) + (1.0 - y) * np.log1p(-clamped)).sum() / n)
    grad = (-y / clamped + (1.0 - y) / (1.0 - clamped)) / n
    grad[(p < BCE_CLAMP) | (p > 1.0 - BCE_CLAMP)] = 0.0  # clamp is flat
    return loss, grad


def loss_total(pred_mask: np.ndarray, gt_mask: np.ndarray,
               pred_cube: Optional[np.ndarray], gt_cube: Optional[np.ndarray],
               iterations: int = 10, use_cl: bool = True, use_nc: bool = True,
               w_mask: float = 1.0, w_cl: float = 1.0, w_con: float = 1.0) -> LossBreakdown:
    """Combined mask + centerline + connectivity loss for one sample."""
    br, _, _ = loss_total_grad(pred_mask, gt_mask, pred_cube, gt_cube,
                               iterations, use_cl, use_nc, w_mask, w_cl, w_con)
    return br


def loss_total_grad(pred_mask: np.ndarray, gt_mask: np.ndarray,
                    pred_cube: Optional[np.ndarray], gt_cube: Optional[np.ndarray],
                    iterations: int = 10, use_cl: bool = True, use_nc: bool = True,
                    w_mask: float = 1.0, w_cl: float = 1.0, w_con: float = 1.0):
    """Returns (LossBreakdown, grad wrt pred_mask, grad wrt pred_cube)."""
    l_mask, g_mask = loss_mask_grad(pred_mask, gt_mask)
    l_mask *= w_mask
    g_total = w_mask * g_mask
    l_cl = 0.0
    if use_cl:
        l_cl, g_cl = loss_centerline_grad(pred_mask, gt_mask, iterations)
        l_cl *= w_cl
        g_total = g_total + w_cl * g_cl
    l_con = 0.0
    g_cube = None
    if use_nc:
        if pred_cube is None or gt_cube is None:
            raise ContractViolation("connectivity loss enabled but cubes missing")
        l_con, g_cube = loss_connectivity_grad(pred_cube, gt_cube)
        l_con *= w_con
        g_cube = w_con * g_cube
    return LossBreakdown.make(l_mask, l_cl, l_con), g_total.astype(pred_mask.dtype, copy=False), g_cube
