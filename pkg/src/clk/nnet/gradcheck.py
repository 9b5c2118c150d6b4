"""Central finite-difference checks of every analytic gradient."""

from __future__ import annotations

import numpy as np

from clk.nnet.layers import (
    BatchNorm,
    ChannelAttention,
    Conv3d,
    MaxPool,
    ReLU,
    SpatialAttention,
    Upsample,
)
from clk.nnet.model import NetConfig, Network, serial_blas
from clk.nnet.train import loss

STEP = 1e-6


def rel_error(analytic, numeric, floor=1e-8):
    """Largest elementwise ``|a - n| / (|a| + |n|)``, the denominator floored at ``floor``."""
    a = np.asarray(analytic, dtype=np.float64).ravel()
    n = np.asarray(numeric, dtype=np.float64).ravel()
    if a.size == 0:
        return 0.0
    return float(np.max(np.abs(a - n) / np.maximum(np.abs(a) + np.abs(n), floor)))


def _numeric(f, x, idx, step=STEP):
    out = np.empty(len(idx))
    flat = x.reshape(-1)
    for k, i in enumerate(idx):
        old = flat[i]
        flat[i] = old + step
        fp = f()
        flat[i] = old - step
        fm = f()
        flat[i] = old
        out[k] = (fp - fm) / (2 * step)
    return out


def _pick(size, limit, rng):
    return np.arange(size) if size <= limit else np.sort(rng.choice(size, limit, replace=False))


def check_layer(layer, params, x, train=True, seed=0, limit=200):
    """Max relative error over the input and every parameter of ``layer``."""
    rng = np.random.default_rng(seed)
    y, _ = layer.forward(dict(params), x, train)
    r = rng.normal(size=y.shape)

    def objective():
        out, _ = layer.forward({k: v.copy() for k, v in params.items()}, x, train)
        return float((r * out).sum())

    _, cache = layer.forward({k: v.copy() for k, v in params.items()}, x, train)
    dx, grads = layer.backward(params, cache, r)
    idx = _pick(x.size, limit, rng)
    worst = rel_error(dx.reshape(-1)[idx], _numeric(objective, x, idx))
    for name in layer.param_names:
        key = layer.key(name)
        idx = _pick(params[key].size, limit, rng)
        worst = max(worst, rel_error(grads[key].reshape(-1)[idx], _numeric(objective, params[key], idx)))
    return worst


def check_loss(seed=0, shape=(4, 4, 4), gamma=0.5):
    rng = np.random.default_rng(seed)
    yc, ye, tc, te = (rng.normal(size=shape) for _ in range(4))
    lam = (rng.random(shape) > 0.3).astype(float)
    _, gc, ge = loss(yc, ye, tc, te, lam, gamma)
    worst = 0.0
    for pred, g in ((yc, gc), (ye, ge)):
        idx = np.arange(pred.size)
        num = _numeric(lambda: loss(yc, ye, tc, te, lam, gamma)[0], pred, idx)
        worst = max(worst, rel_error(g.reshape(-1), num))
    return worst


def check_network(seed=0, limit=60):
    """Whole two-head network, depth 2, on a 4^3 batch of two.

    Conv biases ahead of training-mode batch norm have exactly zero
    gradient, so the denominator floor here is tied to the largest gradient
    entry instead of a fixed constant.
    """
    cfg = NetConfig(depth=2, base_channels=2, patch=4, seed=seed)
    net = Network(cfg)
    params = net.init_params()
    rng = np.random.default_rng(seed)
    for k, v in params.arrays.items():
        if not k.endswith((".mean", ".var")):
            v += rng.normal(scale=0.1, size=v.shape)
    x = rng.random((2, 4, 4, 4))
    rc, re = rng.normal(size=x.shape), rng.normal(size=x.shape)

    def objective():
        yc, ye, _ = net.forward(params.copy(), x, train=True)
        return float((rc * yc).sum() + (re * ye).sum())

    _, _, tape = net.forward(params.copy(), x, train=True)
    grads = net.backward(params, tape, rc, re)
    floor = 1e-4 * max(float(np.abs(g).max()) for g in grads.values())
    worst = 0.0
    for key in sorted(grads):
        arr = params.arrays[key]
        idx = _pick(arr.size, limit, rng)
        worst = max(worst, rel_error(grads[key].reshape(-1)[idx], _numeric(objective, arr, idx), floor))
    return worst


@serial_blas
def gradcheck_all(seed=0):
    """``{layer type: max relative error}`` on random inputs up to 8^3, float64."""
    rng = np.random.default_rng(seed)

    def rand_params(layer, scale=0.5):
        return {k: rng.normal(scale=scale, size=s) for k, s in layer.shapes().items()}

    results = {}
    conv = Conv3d("conv", 2, 3)
    results["conv3d"] = check_layer(conv, rand_params(conv), rng.normal(size=(2, 2, 5, 6, 4)), seed=seed)
    conv1 = Conv3d("conv1", 3, 2, k=1)
    results["conv1x1"] = check_layer(conv1, rand_params(conv1), rng.normal(size=(3, 2, 4, 4, 4)), seed=seed)
    bn = BatchNorm("bn", 3)
    p = rand_params(bn)
    p["bn.var"] = rng.random(3) + 0.5
    x = rng.normal(loc=1.0, scale=2.0, size=(3, 2, 4, 4, 4))
    results["batchnorm_train"] = check_layer(bn, p, x, train=True, seed=seed)
    results["batchnorm_eval"] = check_layer(bn, p, x, train=False, seed=seed)
    results["relu"] = check_layer(ReLU("relu"), {}, rng.normal(size=(2, 2, 4, 4, 4)), seed=seed)
    results["maxpool"] = check_layer(MaxPool("pool"), {}, rng.normal(size=(2, 2, 8, 8, 8)), seed=seed)
    results["upsample"] = check_layer(Upsample("up"), {}, rng.normal(size=(2, 2, 4, 4, 4)), seed=seed)
    ca = ChannelAttention("ca", 5, k=3)
    p = rand_params(ca)
    p["ca.b"] = np.abs(p["ca.b"]) + 0.1
    results["channel_attention"] = check_layer(ca, p, rng.random((5, 2, 6, 6, 6)), seed=seed)
    sa = SpatialAttention("sa", 4)
    p = rand_params(sa)
    p["sa.b"] = np.array([0.2])
    results["spatial_attention"] = check_layer(sa, p, rng.normal(size=(4, 2, 8, 8, 8)), seed=seed)
    results["loss"] = check_loss(seed)
    results["network"] = check_network(seed)
    return results
