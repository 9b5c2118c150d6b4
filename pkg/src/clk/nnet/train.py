"""Loss, phantom patch datasets, SGD training and tiled whole-volume prediction."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from clk.nnet.model import NetConfig, NetError, NetParams, Network
from clk.volume import Volume3D

log = logging.getLogger(__name__)


def loss(yc_hat, ye_hat, yc, ye, lam, gamma):
    """Masked two-term squared error and its gradients w.r.t. both predictions.

    ``L = gamma*||lam*(yc - yc_hat)||^2 + (1 - gamma)*||lam*(ye - ye_hat)||^2``
    (plain sums). Returns ``(L, dL/dyc_hat, dL/dye_hat)``.
    """
    if not 0.0 <= gamma <= 1.0:
        raise ValueError(f"gamma must lie in [0, 1], got {gamma}")
    rc = lam * (yc - yc_hat)
    re = lam * (ye - ye_hat)
    value = gamma * float((rc * rc).sum()) + (1.0 - gamma) * float((re * re).sum())
    return value, -2.0 * gamma * lam * rc, -2.0 * (1.0 - gamma) * lam * re


@dataclass
class Sample:
    mask: np.ndarray
    yc: np.ndarray
    ye: np.ndarray
    lam: np.ndarray


def crop(a, center, size, fill=0.0):
    """Cube of side ``size`` around ``center``; out-of-volume parts take ``fill``."""
    out = np.full((size,) * 3, fill)
    lo = [c - size // 2 for c in center]
    src, dst = [], []
    for l, n in zip(lo, a.shape):
        s0, s1 = max(l, 0), min(l + size, n)
        src.append(slice(s0, s1))
        dst.append(slice(s0 - l, s1 - l))
    out[tuple(dst)] = a[tuple(src)]
    return out


def targets(mask: Volume3D, truth, delta=0.01, delta_mm=3.0):
    """Training maps for one phantom: ``(yc, ye, lam)`` full-volume arrays."""
    from clk.costmap import reference_cl_distance
    from clk.endpoints import encode_confidence

    dm = reference_cl_distance(mask, truth.centerline, delta)
    conf = encode_confidence(mask, truth.endpoints, delta_mm)
    return dm.cl_log.data, conf.map.data, mask.data.copy()


def make_patches(phantoms, count, patch, seed, delta=0.01, delta_mm=3.0):
    """``count`` patches cut around foreground voxels, cycling through ``phantoms``.

    ``phantoms`` is a list of ``(mask, truth)``. Centres are drawn from a
    generator seeded with ``seed``, so the set is reproducible.
    """
    rng = np.random.default_rng(seed)
    maps = [(m.data, *targets(m, t, delta, delta_mm)) for m, t in phantoms]
    neutral = float(np.log(1.0 + delta))
    out = []
    for k in range(count):
        mask, yc, ye, lam = maps[k % len(maps)]
        fg = np.argwhere(mask > 0)
        c = fg[rng.integers(len(fg))]
        out.append(Sample(crop(mask, c, patch), crop(yc, c, patch, neutral), crop(ye, c, patch), crop(lam, c, patch)))
    return out


@dataclass
class TrainResult:
    params: NetParams
    epoch_loss: list = field(default_factory=list)
    initial_loss: float = float("nan")


def dataset_loss(net, params, dataset, batch_size):
    """Mean normalised training loss of ``params`` over ``dataset``; batch statistics, params untouched."""
    probe = params.copy()
    values = []
    for start in range(0, len(dataset), batch_size):
        batch = dataset[start:start + batch_size]
        yc_hat, ye_hat, _ = net.forward(probe, np.stack([s.mask for s in batch]), train=True)
        lam = np.stack([s.lam for s in batch])
        value, _, _ = loss(yc_hat, ye_hat, np.stack([s.yc for s in batch]), np.stack([s.ye for s in batch]), lam, net.cfg.gamma)
        values.append(value / max(float(lam.sum()), 1.0))
    return float(np.mean(values))


def train(cfg: NetConfig, dataset, params: NetParams | None = None) -> TrainResult:
    """Mini-batch SGD (heavy-ball momentum ``cfg.momentum``) with the step-halving schedule of ``cfg``.

    The loss fed to the optimiser is the masked sum divided by the number
    of mask voxels in the batch; the raw sum is too large for a fixed
    learning rate. Shuffling and initialisation both derive from
    ``cfg.seed``. Returns per-epoch mean batch losses and the loss of the
    starting parameters over the whole dataset.
    """
    if not dataset:
        raise ValueError("training dataset is empty")
    net = Network(cfg)
    params = net.init_params() if params is None else params
    for s in dataset:
        if s.mask.shape != (cfg.patch,) * 3:
            raise ValueError(f"patch shape {s.mask.shape} does not match config patch {cfg.patch}")
    initial = dataset_loss(net, params, dataset, cfg.batch_size)
    rng = np.random.default_rng(cfg.seed + 1)
    velocity = {}
    history = []
    for epoch in range(cfg.epochs):
        lr = cfg.lr_at(epoch)
        order = rng.permutation(len(dataset))
        losses = []
        for b, start in enumerate(range(0, len(order), cfg.batch_size)):
            batch = [dataset[i] for i in order[start:start + cfg.batch_size]]
            x = np.stack([s.mask for s in batch])
            yc_hat, ye_hat, tape = net.forward(params, x, train=True)
            lam = np.stack([s.lam for s in batch])
            value, gc, ge = loss(yc_hat, ye_hat, np.stack([s.yc for s in batch]), np.stack([s.ye for s in batch]), lam, cfg.gamma)
            norm = max(float(lam.sum()), 1.0)
            value /= norm
            if not np.isfinite(value):
                raise NetError(f"loss diverged at epoch {epoch}, batch {b}")
            grads = net.backward(params, tape, gc / norm, ge / norm)
            for k, g in grads.items():
                v = velocity.get(k)
                v = g if v is None else cfg.momentum * v + g
                velocity[k] = v
                params.arrays[k] -= lr * v
            losses.append(value)
        history.append(float(np.mean(losses)))
        log.info("epoch %d lr %.2e loss %.6f", epoch, lr, history[-1])
    return TrainResult(params, history, initial)


def _starts(n, patch, stride):
    s = list(range(0, n - patch + 1, stride))
    if s[-1] != n - patch:
        s.append(n - patch)
    return s


def predict_volume(params: NetParams, mask: Volume3D, stride=None, batch=4):
    """Whole-volume ``(yc_hat, ye_hat)`` from overlapping patches averaged where they meet.

    Tiles step by ``stride`` (default half a patch). A volume smaller than
    a patch along some axis is zero-padded there, with a warning.
    """
    cfg = params.config
    patch = cfg.patch
    stride = patch // 2 if stride is None else stride
    if stride < 1 or stride > patch:
        raise ValueError(f"stride must lie in [1, {patch}], got {stride}")
    data = mask.data
    if any(n < patch for n in mask.dims):
        log.warning("volume %s smaller than patch %d; zero-padding", mask.dims, patch)
        data = np.pad(data, [(0, max(patch - n, 0)) for n in mask.dims])
    net = Network(cfg)
    acc_c = np.zeros(data.shape)
    acc_e = np.zeros(data.shape)
    count = np.zeros(data.shape)
    corners = [(i, j, k) for i in _starts(data.shape[0], patch, stride)
               for j in _starts(data.shape[1], patch, stride)
               for k in _starts(data.shape[2], patch, stride)]
    for b in range(0, len(corners), batch):
        group = corners[b:b + batch]
        x = np.stack([data[i:i + patch, j:j + patch, k:k + patch] for i, j, k in group])
        yc, ye, _ = net.forward(params, x, train=False)
        for n, (i, j, k) in enumerate(group):
            sl = (slice(i, i + patch), slice(j, j + patch), slice(k, k + patch))
            acc_c[sl] += yc[n]
            acc_e[sl] += ye[n]
            count[sl] += 1
    X, Y, Z = mask.dims
    yc = (acc_c / count)[:X, :Y, :Z]
    ye = (acc_e / count)[:X, :Y, :Z]
    return mask.like(yc), mask.like(ye)
