"""Compact encoder-decoder segmentation network built from strip-conv blocks.

Encoder: `levels` stages of (conv block, relu, 2x2 max pool), channels
doubling per level. Decoder mirrors it with nearest-neighbor upsampling and
skip connections by channel concatenation. Two 1x1 sigmoid heads emit the
segmentation probability map and the 8-channel neighbor-connectivity map.

Conv blocks are either plain 3x3 convolutions ("square") or shape
self-learning strip convolutions with a configurable direction subset and
offset mode. Training is plain Adam on the combined topology loss.
"""

from __future__ import annotations

import struct
from collections import OrderedDict
from dataclasses import dataclass, replace
from typing import NamedTuple, Optional

import numpy as np

from . import grid, sslconv, topo
from .errors import (CheckpointMagicError, CheckpointShapeError,
                     CheckpointTruncatedError, ContractViolation,
                     NonFiniteLossError)
from .precision import real_dtype

CONV_KINDS = ("square", "ssl_xy", "ssl_zw", "ssl_xyzw")
OFFSET_MODES = ("dynamic", "static", "off")
CHECKPOINT_MAGIC = b"PASC1\n"

_KIND_DIRECTIONS = {
    "ssl_xy": (0, 1),
    "ssl_zw": (2, 3),
    "ssl_xyzw": (0, 1, 2, 3),
}


@dataclass
class NetConfig:
    levels: int = 3
    base_channels: int = 16
    conv_kind: str = "ssl_xyzw"
    offset_mode: str = "dynamic"
    strip_length: int = 9
    use_cl: bool = True
    use_nc: bool = True
    skeleton_iterations: int = 10
    connectivity_mode: str = "foreground"
    w_mask: float = 1.0
    w_cl: float = 1.0
    w_con: float = 1.0
    optimizer: str = "adam"
    learning_rate: float = 0.01
    batch_size: int = 2
    epochs: int = 20
    threshold: float = 0.5
    seed: int = 0

    def __post_init__(self):
        if self.levels < 1:
            raise ContractViolation(f"levels must be >= 1, got {self.levels}")
        if self.base_channels < 1:
            raise ContractViolation(f"base_channels must be >= 1, got {self.base_channels}")
        if self.strip_length < 3 or self.strip_length % 2 == 0:
            raise ContractViolation(
                f"strip_length must be odd and >= 3, got {self.strip_length}")
        if self.conv_kind not in CONV_KINDS:
            raise ContractViolation(f"conv_kind must be one of {CONV_KINDS}")
        if self.offset_mode not in OFFSET_MODES:
            raise ContractViolation(f"offset_mode must be one of {OFFSET_MODES}")
        if self.optimizer != "adam":
            raise ContractViolation(f"unknown optimizer {self.optimizer!r}")

    @property
    def directions(self):
        return _KIND_DIRECTIONS.get(self.conv_kind)

    def with_overrides(self, **kw) -> "NetConfig":
        return replace(self, **kw)


class BlockSpec(NamedTuple):
    name: str
    c_in: int
    c_out: int


def block_plan(config: NetConfig):
    """Conv blocks in forward order: encoder, bottleneck, decoder."""
    ch = [config.base_channels * 2 ** l for l in range(config.levels)]
    specs = []
    c_prev = 1
    for l in range(config.levels):
        specs.append(BlockSpec(f"enc{l}", c_prev, ch[l]))
        c_prev = ch[l]
    bott = config.base_channels * 2 ** config.levels
    specs.append(BlockSpec("bottleneck", c_prev, bott))
    c_prev = bott
    for l in reversed(range(config.levels)):
        specs.append(BlockSpec(f"dec{l}", c_prev + ch[l], ch[l]))
        c_prev = ch[l]
    return specs


class NetParams:
    """Named parameter blocks with matching gradient and Adam moment buffers."""

    def __init__(self, blocks: "OrderedDict[str, np.ndarray]"):
        names = list(blocks)
        if len(set(names)) != len(names):
            raise ContractViolation("parameter block names must be unique")
        self.blocks = blocks
        self.grads = OrderedDict((k, np.zeros_like(v)) for k, v in blocks.items())
        self.adam_m = OrderedDict((k, np.zeros_like(v)) for k, v in blocks.items())
        self.adam_v = OrderedDict((k, np.zeros_like(v)) for k, v in blocks.items())
        self.adam_t = 0

    def zero_grads(self):
        for g in self.grads.values():
            g[...] = 0

    def copy(self) -> "NetParams":
        return NetParams(OrderedDict((k, v.copy()) for k, v in self.blocks.items()))


def init_params(config: NetConfig, seed: Optional[int] = None) -> NetParams:
    """Deterministic initialization: uniform(-b, b) weights with
    b = sqrt(1/fan_in), zero biases, zero offset predictors (so training
    starts in the plain-strip regime)."""
    rng = np.random.default_rng(config.seed if seed is None else seed)
    dt = real_dtype()
    m = config.strip_length
    blocks: "OrderedDict[str, np.ndarray]" = OrderedDict()

    def uniform(shape, fan_in):
        b = np.sqrt(1.0 / fan_in)
        return rng.uniform(-b, b, size=shape).astype(dt)

    for spec in block_plan(config):
        if config.conv_kind == "square":
            blocks[f"{spec.name}.conv_w"] = uniform((spec.c_out, spec.c_in, 3, 3),
                                                    spec.c_in * 9)
            blocks[f"{spec.name}.conv_b"] = np.zeros(spec.c_out, dt)
        else:
            ndir = len(config.directions)
            blocks[f"{spec.name}.strip_w"] = uniform((4, spec.c_out, spec.c_in, m),
                                                     ndir * spec.c_in * m)
            blocks[f"{spec.name}.strip_b"] = np.zeros(spec.c_out, dt)
            if config.offset_mode == "dynamic":
                blocks[f"{spec.name}.offs_w"] = np.zeros((4 * (m - 1), spec.c_in, 3, 3), dt)
                blocks[f"{spec.name}.offs_b"] = np.zeros(4 * (m - 1), dt)
            elif config.offset_mode == "static":
                blocks[f"{spec.name}.offs_static"] = np.zeros((4, m - 1), dt)
    head_in = config.base_channels
    blocks["head_seg.conv_w"] = uniform((1, head_in, 1, 1), head_in)
    blocks["head_seg.conv_b"] = np.zeros(1, dt)
    blocks["head_nc.conv_w"] = uniform((8, head_in, 1, 1), head_in)
    blocks["head_nc.conv_b"] = np.zeros(8, dt)
    return NetParams(blocks)


# ---------------------------------------------------------------------------
# forward / backward
# ---------------------------------------------------------------------------

class _BlockCtx(NamedTuple):
    kind: str
    pre_relu: np.ndarray
    conv_ctx: object            # Conv2dCtx or SslCtx
    pred_ctx: object            # Conv2dCtx of the offset predictor (dynamic)
    x_shape: tuple


def _block_forward(x, params: NetParams, name: str, config: NetConfig):
    b = params.blocks
    if config.conv_kind == "square":
        kern = grid.PlainKernel(b[f"{name}.conv_w"], b[f"{name}.conv_b"])
        y, ctx = grid.conv2d_forward(x, kern, 1)
        return grid.relu(y), _BlockCtx("square", y, ctx, None, x.shape)

    m = config.strip_length
    kern = sslconv.StripKernelSet(b[f"{name}.strip_w"], b[f"{name}.strip_b"])
    pred_ctx = None
    offsets = None
    acc = None
    if config.offset_mode == "dynamic":
        pred = grid.PlainKernel(b[f"{name}.offs_w"], b[f"{name}.offs_b"])
        raw, pred_ctx = grid.conv2d_forward(x, pred, 1)
        offsets, acc = sslconv.accumulate_offsets_forward(raw, m)
    elif config.offset_mode == "static":
        nb, _, h, w = x.shape
        raw = np.broadcast_to(
            b[f"{name}.offs_static"].reshape(1, 4 * (m - 1), 1, 1),
            (nb, 4 * (m - 1), h, w))
        offsets, acc = sslconv.accumulate_offsets_forward(raw, m)
    y, ctx = sslconv.ssl_forward_ctx(x, kern, offsets, config.directions, acc)
    return grid.relu(y), _BlockCtx("ssl", y, ctx, pred_ctx, x.shape)


def _block_backward(gy, ctx: _BlockCtx, params: NetParams, name: str,
                    config: NetConfig):
    gy = grid.relu_vjp(gy, ctx.pre_relu)
    g = params.grads
    if ctx.kind == "square":
        gx, gw, gb = grid.conv2d_backward(gy, ctx.conv_ctx)
        g[f"{name}.conv_w"] += gw
        g[f"{name}.conv_b"] += gb
        return gx
    grads = sslconv.ssl_backward(gy, ctx.conv_ctx)
    g[f"{name}.strip_w"] += grads.weights
    g[f"{name}.strip_b"] += grads.bias
    gx = grads.x
    if config.offset_mode == "dynamic":
        gxp, gpw, gpb = grid.conv2d_backward(grads.raw, ctx.pred_ctx)
        g[f"{name}.offs_w"] += gpw
        g[f"{name}.offs_b"] += gpb
        gx = gx + gxp
    elif config.offset_mode == "static":
        m = config.strip_length
        g[f"{name}.offs_static"] += grads.raw.sum(axis=(0, 2, 3)).reshape(4, m - 1)
    return gx


class ForwardCtx(NamedTuple):
    blocks: dict
    pools: dict
    head_seg: object
    head_nc: object
    seg_prob: np.ndarray
    nc_prob: np.ndarray
    skip_channels: list


def forward_ctx(image: np.ndarray, params: NetParams, config: NetConfig):
    grid.check_nchw(image, "image")
    nb, c, h, w = image.shape
    if c != 1:
        raise ContractViolation(f"image must have 1 channel, got {c}")
    scale = 2 ** config.levels
    if h % scale or w % scale:
        raise ContractViolation(
            f"image {h}x{w} is not divisible by 2^levels = {scale}")

    blocks, pools = {}, {}
    skips = []
    x = image
    for l in range(config.levels):
        x, blocks[f"enc{l}"] = _block_forward(x, params, f"enc{l}", config)
        skips.append(x)
        x, pools[l] = grid.pool_down2_forward(x)
    x, blocks["bottleneck"] = _block_forward(x, params, "bottleneck", config)
    skip_channels = []
    for l in reversed(range(config.levels)):
        x = grid.upsample2(x)
        skip_channels.append(x.shape[1])
        x = np.concatenate([x, skips[l]], axis=1)
        x, blocks[f"dec{l}"] = _block_forward(x, params, f"dec{l}", config)

    seg_kern = grid.PlainKernel(params.blocks["head_seg.conv_w"],
                                params.blocks["head_seg.conv_b"])
    nc_kern = grid.PlainKernel(params.blocks["head_nc.conv_w"],
                               params.blocks["head_nc.conv_b"])
    seg_lin, head_seg = grid.conv2d_forward(x, seg_kern, 0)
    nc_lin, head_nc = grid.conv2d_forward(x, nc_kern, 0)
    seg = grid.sigmoid(seg_lin)
    nc = grid.sigmoid(nc_lin)
    return (seg, nc), ForwardCtx(blocks, pools, head_seg, head_nc, seg, nc,
                                 skip_channels)


def forward(image: np.ndarray, params: NetParams, config: NetConfig):
    """Returns (seg_prob (n,1,h,w), nc_prob (n,8,h,w)), all values in (0,1)."""
    out, _ = forward_ctx(image, params, config)
    return out


def backward(g_seg: np.ndarray, g_nc: np.ndarray, ctx: ForwardCtx,
             params: NetParams, config: NetConfig) -> None:
    """Accumulates parameter gradients for the given head gradients."""
    gs = grid.sigmoid_vjp(g_seg, ctx.seg_prob)
    gn = grid.sigmoid_vjp(g_nc, ctx.nc_prob)
    gx_seg, gw, gb = grid.conv2d_backward(gs, ctx.head_seg)
    params.grads["head_seg.conv_w"] += gw
    params.grads["head_seg.conv_b"] += gb
    gx_nc, gw, gb = grid.conv2d_backward(gn, ctx.head_nc)
    params.grads["head_nc.conv_w"] += gw
    params.grads["head_nc.conv_b"] += gb
    gx = gx_seg + gx_nc

    g_skips = {}
    for l in range(config.levels):  # dec0 was applied last, unwind it first
        gx = _block_backward(gx, ctx.blocks[f"dec{l}"], params, f"dec{l}", config)
        c_up = ctx.skip_channels[config.levels - 1 - l]
        g_up, g_skip = gx[:, :c_up], gx[:, c_up:]
        g_skips[l] = g_skip
        gx = grid.upsample2_backward(g_up)
    gx = _block_backward(gx, ctx.blocks["bottleneck"], params, "bottleneck", config)
    for l in reversed(range(config.levels)):
        gx = grid.pool_down2_backward(gx, ctx.pools[l])
        gx = gx + g_skips[l]
        gx = _block_backward(gx, ctx.blocks[f"enc{l}"], params, f"enc{l}", config)


# ---------------------------------------------------------------------------
# loss plumbing and optimizer
# ---------------------------------------------------------------------------

def batch_loss_and_grads(images: np.ndarray, masks: np.ndarray,
                         params: NetParams, config: NetConfig):
    """Mean loss over the batch; fills params.grads. Returns LossBreakdown."""
    if images.shape[0] != masks.shape[0]:
        raise ContractViolation(
            f"batch size mismatch: {images.shape[0]} images, {masks.shape[0]} masks")
    (seg, nc), ctx = forward_ctx(images, params, config)
    nb = images.shape[0]
    g_seg = np.zeros_like(seg)
    g_nc = np.zeros_like(nc)
    sums = np.zeros(3)
    for i in range(nb):
        gt_cube = None
        if config.use_nc:
            gt_cube = topo.connectivity_cube(masks[i], config.connectivity_mode)
        br, g_mask, g_cube = topo.loss_total_grad(
            seg[i, 0], masks[i], nc[i], gt_cube,
            iterations=config.skeleton_iterations,
            use_cl=config.use_cl, use_nc=config.use_nc,
            w_mask=config.w_mask, w_cl=config.w_cl, w_con=config.w_con)
        sums += (br.l_mask, br.l_cl, br.l_con)
        g_seg[i, 0] = g_mask / nb
        if g_cube is not None:
            g_nc[i] = g_cube / nb
    mean = sums / nb
    breakdown = topo.LossBreakdown.make(float(mean[0]), float(mean[1]), float(mean[2]))
    if not np.isfinite(breakdown.total):
        for term, value in (("l_mask", breakdown.l_mask), ("l_cl", breakdown.l_cl),
                            ("l_con", breakdown.l_con)):
            if not np.isfinite(value):
                raise NonFiniteLossError(f"non-finite loss term {term}")
    params.zero_grads()
    backward(g_seg, g_nc, ctx, params, config)
    return breakdown


def adam_update(params: NetParams, lr: float, beta1: float = 0.9,
                beta2: float = 0.999, eps: float = 1e-8) -> None:
    params.adam_t += 1
    t = params.adam_t
    for name, p in params.blocks.items():
        g = params.grads[name]
        m = params.adam_m[name]
        v = params.adam_v[name]
        m *= beta1
        m += (1 - beta1) * g
        v *= beta2
        v += (1 - beta2) * g * g
        mhat = m / (1 - beta1 ** t)
        vhat = v / (1 - beta2 ** t)
        p -= (lr * mhat / (np.sqrt(vhat) + eps)).astype(p.dtype, copy=False)


def train_step(images: np.ndarray, masks: np.ndarray, params: NetParams,
               config: NetConfig) -> topo.LossBreakdown:
    """One forward/backward/Adam step; returns the pre-update batch loss."""
    breakdown = batch_loss_and_grads(images, masks, params, config)
    for name, g in params.grads.items():
        if not np.isfinite(g).all():
            raise NonFiniteLossError(f"non-finite gradient in block {name}")
    adam_update(params, config.learning_rate)
    return breakdown


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

def save_checkpoint(params: NetParams, path) -> None:
    """Magic + u32 block count + per block: name, dims, raw float32 data."""
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<I", len(params.blocks)))
        for name, arr in params.blocks.items():
            raw = name.encode("utf-8")
            f.write(struct.pack("<I", len(raw)))
            f.write(raw)
            f.write(struct.pack("<I", arr.ndim))
            f.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            f.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def load_checkpoint(path, expect: Optional[NetParams] = None) -> NetParams:
    """Reads a checkpoint back into a fresh NetParams (float32 blocks).

    With `expect`, block names and dims are validated against it."""
    with open(path, "rb") as f:
        head = f.read(len(CHECKPOINT_MAGIC))
        if head != CHECKPOINT_MAGIC:
            raise CheckpointMagicError(f"{path}: bad magic {head!r}")

        def need(n: int, what: str) -> bytes:
            buf = f.read(n)
            if len(buf) != n:
                raise CheckpointTruncatedError(f"{path}: truncated while reading {what}")
            return buf

        count = struct.unpack("<I", need(4, "block count"))[0]
        blocks: "OrderedDict[str, np.ndarray]" = OrderedDict()
        for i in range(count):
            nlen = struct.unpack("<I", need(4, f"name length of block {i}"))[0]
            name = need(nlen, f"name of block {i}").decode("utf-8")
            ndim = struct.unpack("<I", need(4, f"rank of {name}"))[0]
            dims = struct.unpack(f"<{ndim}I", need(4 * ndim, f"dims of {name}"))
            nbytes = 4 * int(np.prod(dims, dtype=np.int64))
            data = need(nbytes, f"tensor {name}")
            blocks[name] = np.frombuffer(data, dtype="<f4").reshape(dims).copy()
    if expect is not None:
        expected = {k: v.shape for k, v in expect.blocks.items()}
        got = {k: v.shape for k, v in blocks.items()}
        if expected != got:
            for k in expected:
                if k not in got:
                    raise CheckpointShapeError(f"{path}: missing block {k}")
                if expected[k] != got[k]:
                    raise CheckpointShapeError(
                        f"{path}: block {k} has dims {got[k]}, expected {expected[k]}")
            extra = sorted(set(got) - set(expected))
            raise CheckpointShapeError(f"{path}: unexpected blocks {extra}")
    return NetParams(blocks)
