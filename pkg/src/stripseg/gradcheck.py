"""Central finite-difference checks for every analytic backward pass.

All suites run in 64-bit mode on fixed seeds. Each one compares the analytic
vector-Jacobian product against (f(x+e) - f(x-e)) / 2e through a scalar
projection with a fixed random cotangent, and reports the worst relative
error (with a 1e-8 absolute floor).
"""

from __future__ import annotations

from typing import Callable, NamedTuple

import numpy as np

from . import grid, net, sslconv, topo
from .precision import float64_mode

OP_TOL = 1e-5
NET_TOL = 1e-4
_FLOOR = 1e-8


class SuiteResult(NamedTuple):
    name: str
    max_rel_err: float
    tol: float

    @property
    def passed(self) -> bool:
        return self.max_rel_err <= self.tol


def rel_err(analytic: np.ndarray, numeric: np.ndarray) -> float:
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    denom = np.maximum(_FLOOR, np.maximum(np.abs(a), np.abs(n)))
    return float((np.abs(a - n) / denom).max()) if a.size else 0.0


def fd_grad(f: Callable[[np.ndarray], float], x: np.ndarray,
            eps: float = 1e-6) -> np.ndarray:
    """Dense central-difference gradient of a scalar function."""
    g = np.zeros_like(x, dtype=np.float64)
    flat = x.reshape(-1)
    gflat = g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        fp = f(x)
        flat[i] = orig - eps
        fm = f(x)
        flat[i] = orig
        gflat[i] = (fp - fm) / (2 * eps)
    return g


def fd_entries(f: Callable[[np.ndarray], float], x: np.ndarray,
               analytic: np.ndarray, idx: np.ndarray, eps: float) -> float:
    """Worst rel error of `analytic` vs central differences at flat indices."""
    flat = x.reshape(-1)
    aflat = np.asarray(analytic).reshape(-1)
    worst = 0.0
    for i in idx:
        orig = flat[i]
        flat[i] = orig + eps
        fp = f(x)
        flat[i] = orig - eps
        fm = f(x)
        flat[i] = orig
        worst = max(worst, rel_err(np.asarray(aflat[i]),
                                   np.asarray((fp - fm) / (2 * eps))))
    return worst


def _check_conv2d(rng) -> float:
    x = rng.normal(size=(1, 2, 8, 8))
    kern = grid.PlainKernel(rng.normal(size=(3, 2, 3, 3)), rng.normal(size=3))
    cot = rng.normal(size=(1, 3, 8, 8))
    y, ctx = grid.conv2d_forward(x, kern, 1)
    gx, gw, gb = grid.conv2d_backward(cot, ctx)
    worst = 0.0
    worst = max(worst, rel_err(gx, fd_grad(
        lambda v: float((grid.conv2d_standard(v, kern, 1) * cot).sum()), x)))
    worst = max(worst, rel_err(gw, fd_grad(
        lambda v: float((grid.conv2d_standard(x, grid.PlainKernel(v, kern.bias), 1) * cot).sum()),
        kern.weights)))
    worst = max(worst, rel_err(gb, fd_grad(
        lambda v: float((grid.conv2d_standard(x, grid.PlainKernel(kern.weights, v), 1) * cot).sum()),
        kern.bias)))
    return worst


def _check_bilinear(rng) -> float:
    plane = rng.normal(size=(5, 5))
    worst = 0.0
    for _ in range(12):
        r = float(rng.uniform(-1.5, 5.5))
        c = float(rng.uniform(-1.5, 5.5))
        if abs(r - round(r)) < 0.05 or abs(c - round(c)) < 0.05:
            continue  # stay off the interpolation kinks
        gplane, gr, gc = grid.bilinear_sample_vjp(plane, r, c)
        worst = max(worst, rel_err(gplane, fd_grad(
            lambda v: grid.bilinear_sample(v, r, c), plane)))
        num_r = (grid.bilinear_sample(plane, r + 1e-6, c)
                 - grid.bilinear_sample(plane, r - 1e-6, c)) / 2e-6
        num_c = (grid.bilinear_sample(plane, r, c + 1e-6)
                 - grid.bilinear_sample(plane, r, c - 1e-6)) / 2e-6
        worst = max(worst, rel_err(np.array(gr), np.array(num_r)))
        worst = max(worst, rel_err(np.array(gc), np.array(num_c)))
    return worst


def _check_pooling(rng) -> float:
    x = rng.normal(size=(1, 2, 8, 8))
    cot = rng.normal(size=(1, 2, 4, 4))
    _, ctx = grid.pool_down2_forward(x)
    gx = grid.pool_down2_backward(cot, ctx)
    worst = rel_err(gx, fd_grad(
        lambda v: float((grid.pool_down2(v) * cot).sum()), x))
    cot_up = rng.normal(size=(1, 2, 16, 16))
    gup = grid.upsample2_backward(cot_up)
    worst = max(worst, rel_err(gup, fd_grad(
        lambda v: float((grid.upsample2(v) * cot_up).sum()), x)))
    return worst


def _check_sigmoid(rng) -> float:
    x = rng.normal(size=(1, 2, 8, 8))
    cot = rng.normal(size=(1, 2, 8, 8))
    y = grid.sigmoid(x)
    ga = grid.sigmoid_vjp(cot, y)
    return rel_err(ga, fd_grad(lambda v: float((grid.sigmoid(v) * cot).sum()), x))


def _ssl_instance(rng, m=9, shape=(1, 2, 12, 12), c_out=2):
    x = rng.normal(size=shape)
    nb, ci, h, w = shape
    kern = sslconv.StripKernelSet(
        rng.normal(size=(4, c_out, ci, m)) * 0.5, rng.normal(size=c_out))
    raw = rng.normal(size=(nb, 4 * (m - 1), h, w)) * 0.8
    cot = rng.normal(size=(nb, c_out, h, w))
    return x, kern, raw, cot


def _ssl_loss(x, kern, raw, cot, m):
    offsets = sslconv.accumulate_offsets(raw, m)
    return float((sslconv.ssl_forward(x, kern, offsets) * cot).sum())


def _check_ssl(rng) -> float:
    m = 9
    eps = 1e-5
    x, kern, raw, cot = _ssl_instance(rng, m)
    offsets, acc = sslconv.accumulate_offsets_forward(raw, m)
    y, ctx = sslconv.ssl_forward_ctx(x, kern, offsets, None, acc)
    grads = sslconv.ssl_backward(cot, ctx)

    def pick(size, k=120):
        return rng.choice(size, size=min(k, size), replace=False)

    worst = 0.0
    worst = max(worst, fd_entries(
        lambda v: _ssl_loss(v, kern, raw, cot, m), x, grads.x, pick(x.size), eps))
    worst = max(worst, fd_entries(
        lambda v: _ssl_loss(x, sslconv.StripKernelSet(v, kern.bias), raw, cot, m),
        kern.weights, grads.weights, pick(kern.weights.size), eps))
    worst = max(worst, fd_entries(
        lambda v: _ssl_loss(x, sslconv.StripKernelSet(kern.weights, v), raw, cot, m),
        kern.bias, grads.bias, pick(kern.bias.size), eps))
    worst = max(worst, fd_entries(
        lambda v: _ssl_loss(x, kern, v, cot, m), raw, grads.raw,
        pick(raw.size), eps))
    return worst


def _check_loss_mask(rng) -> float:
    pred = rng.uniform(0.05, 0.95, size=(8, 8))
    gt = (rng.uniform(size=(8, 8)) < 0.4).astype(np.float64)
    _, ga = topo.loss_mask_grad(pred, gt)
    return rel_err(ga, fd_grad(lambda v: topo.loss_mask(v, gt), pred))


def _check_loss_centerline(rng) -> float:
    pred = rng.uniform(0.05, 0.95, size=(8, 8))
    gt = (rng.uniform(size=(8, 8)) < 0.4).astype(np.float64)
    iters = 3
    _, ga = topo.loss_centerline_grad(pred, gt, iters)
    return rel_err(ga, fd_grad(lambda v: topo.loss_centerline(v, gt, iters), pred))


def _check_loss_connectivity(rng) -> float:
    pred = rng.uniform(0.05, 0.95, size=(8, 8, 8))
    gt = topo.connectivity_cube((rng.uniform(size=(8, 8)) < 0.5).astype(np.uint8))
    _, ga = topo.loss_connectivity_grad(pred, gt)
    return rel_err(ga, fd_grad(lambda v: topo.loss_connectivity(v, gt), pred))


def _check_network(rng, n_entries: int = 50) -> float:
    config = net.NetConfig(levels=3, base_channels=2, epochs=1,
                           skeleton_iterations=4)
    params = net.init_params(config, seed=11)
    # randomize every block (offset predictors included) so the check sits at
    # a generic point away from the sampling and relu kinks
    for name, block in params.blocks.items():
        block[...] = rng.normal(size=block.shape) * 0.3
    images = rng.uniform(0.0, 1.0, size=(1, 1, 16, 16))
    masks = (rng.uniform(size=(1, 16, 16)) < 0.4).astype(np.uint8)

    def total_loss() -> float:
        (seg, nc), _ = net.forward_ctx(images, params, config)
        gt_cube = topo.connectivity_cube(masks[0], config.connectivity_mode)
        br = topo.loss_total(seg[0, 0], masks[0], nc[0], gt_cube,
                             iterations=config.skeleton_iterations)
        return br.total

    breakdown = net.batch_loss_and_grads(images, masks, params, config)
    assert np.isfinite(breakdown.total)
    # probe entries whose gradient is resolvable above the float64 forward
    # noise; below ~1e-4 the central difference is pure cancellation error
    candidates = [(name, i)
                  for name, g in params.grads.items()
                  for i in np.flatnonzero(np.abs(g.reshape(-1)) >= 1e-4)]
    sel = rng.choice(len(candidates), size=min(n_entries, len(candidates)),
                     replace=False)
    worst = 0.0
    eps = 1e-5
    for j in sel:
        name, i = candidates[j]
        flat = params.blocks[name].reshape(-1)
        orig = flat[i]
        flat[i] = orig + eps
        fp = total_loss()
        flat[i] = orig - eps
        fm = total_loss()
        flat[i] = orig
        numeric = (fp - fm) / (2 * eps)
        analytic = params.grads[name].reshape(-1)[i]
        worst = max(worst, rel_err(np.array(analytic), np.array(numeric)))
    return worst


_SUITES = (
    ("conv2d_standard", _check_conv2d, OP_TOL),
    ("bilinear_sample", _check_bilinear, OP_TOL),
    ("pooling", _check_pooling, OP_TOL),
    ("sigmoid", _check_sigmoid, OP_TOL),
    ("ssl_forward", _check_ssl, OP_TOL),
    ("loss_mask", _check_loss_mask, OP_TOL),
    ("loss_centerline", _check_loss_centerline, OP_TOL),
    ("loss_connectivity", _check_loss_connectivity, OP_TOL),
    ("network", _check_network, NET_TOL),
)


def run_all(seed: int = 0):
    """Runs every suite in 64-bit mode; returns a list of SuiteResult."""
    results = []
    with float64_mode():
        for i, (name, fn, tol) in enumerate(_SUITES):
            rng = np.random.default_rng(seed * 1000 + i)
            results.append(SuiteResult(name, fn(rng), tol))
    return results
