"""Two-head encoder/decoder: shared encoder, one decoder per output map."""

from __future__ import annotations

import functools
import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np
from threadpoolctl import ThreadpoolController

from clk.nnet.layers import (
    BatchNorm,
    ChannelAttention,
    Conv3d,
    MaxPool,
    ReLU,
    SpatialAttention,
    Upsample,
)

HEADS = ("dist", "end")

_blas = ThreadpoolController()


def serial_blas(fn):
    """Run ``fn`` with BLAS pinned to one thread.

    Multithreaded GEMM changes the floating-point reduction order, so
    results would otherwise depend on the thread cap.
    """

    @functools.wraps(fn)
    def wrapper(*args, **kwargs):
        with _blas.limit(limits=1, user_api="blas"):
            return fn(*args, **kwargs)

    return wrapper


class NetError(Exception):
    pass


@dataclass
class NetConfig:
    depth: int = 2
    base_channels: int = 8
    patch: int = 32
    lr: float = 1e-2
    lr_halve_every: int = 5
    momentum: float = 0.9
    epochs: int = 20
    batch_size: int = 3
    gamma: float = 0.5
    delta_mm: float = 3.0
    delta: float = 0.01
    attention: bool = True
    k_c: int = 3
    block_convs: int = 2
    seed: int = 0

    def __post_init__(self):
        if self.depth < 1:
            raise ValueError(f"depth must be >= 1, got {self.depth}")
        if self.patch % (2**self.depth):
            raise ValueError(f"patch {self.patch} not divisible by 2**depth = {2**self.depth}")
        if not 0.0 <= self.gamma <= 1.0:
            raise ValueError(f"gamma must lie in [0, 1], got {self.gamma}")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError(f"momentum must lie in [0, 1), got {self.momentum}")
        if self.block_convs < 1:
            raise ValueError(f"block_convs must be >= 1, got {self.block_convs}")
        if self.k_c % 2 == 0:
            raise ValueError(f"k_c must be odd, got {self.k_c}")

    def lr_at(self, epoch):
        return self.lr * 0.5 ** (epoch // self.lr_halve_every)

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        extra = set(d) - known
        if extra:
            raise ValueError(f"unknown NetConfig keys: {sorted(extra)}")
        return cls(**d)


def _block(name, c_in, c_out, convs=1):
    layers = [Conv3d(f"{name}.conv", c_in, c_out), BatchNorm(f"{name}.bn", c_out), ReLU(f"{name}.relu")]
    for k in range(2, convs + 1):
        layers += [Conv3d(f"{name}.conv{k}", c_out, c_out), BatchNorm(f"{name}.bn{k}", c_out), ReLU(f"{name}.relu{k}")]
    return layers


class Network:
    """Layer graph for a :class:`NetConfig`; parameters live outside in a dict."""

    def __init__(self, cfg: NetConfig):
        self.cfg = cfg
        c = cfg.base_channels
        width = [c * 2**level for level in range(cfg.depth + 1)]
        self.encoder = []
        c_in = 1
        for level in range(cfg.depth):
            self.encoder.append(_block(f"enc{level}", c_in, width[level], cfg.block_convs))
            c_in = width[level]
        self.pool = MaxPool("pool")
        self.up = Upsample("up")
        self.bottleneck = _block("mid", width[cfg.depth - 1], width[cfg.depth], cfg.block_convs)
        self.decoders = {}
        for head in HEADS:
            blocks = []
            for level in reversed(range(cfg.depth)):
                blocks.append(_block(f"{head}.dec{level}", width[level + 1] + width[level], width[level], cfg.block_convs))
            self.decoders[head] = blocks
        self.attention = []
        if cfg.attention:
            self.attention = [ChannelAttention("att.ch", width[0], cfg.k_c), SpatialAttention("att.sp", width[0])]
        self.outputs = {head: Conv3d(f"{head}.out", width[0], 1, k=1) for head in HEADS}

    def layers(self):
        for blk in self.encoder:
            yield from blk
        yield from self.bottleneck
        for head in HEADS:
            for blk in self.decoders[head]:
                yield from blk
        yield from self.attention
        yield from self.outputs.values()

    def shapes(self):
        out = {}
        for layer in self.layers():
            out.update(layer.shapes())
        return out

    def init_params(self, seed=None):
        """He-normal convolution weights from a seeded generator; BN as identity; small attention weights."""
        rng = np.random.default_rng(self.cfg.seed if seed is None else seed)
        arrays = {}
        for layer in self.layers():
            for name, shape in layer.shapes().items():
                suffix = name.rsplit(".", 1)[1]
                if isinstance(layer, Conv3d) and suffix == "w":
                    fan_in = shape[1] * shape[2] ** 3
                    arrays[name] = rng.normal(0.0, np.sqrt(2.0 / fan_in), shape)
                elif isinstance(layer, (ChannelAttention, SpatialAttention)) and suffix == "w":
                    arrays[name] = rng.normal(0.0, 0.1 * np.sqrt(2.0 / shape[0]), shape)
                elif isinstance(layer, (ChannelAttention, SpatialAttention)):
                    # positive start keeps the ReLU before each softmax live
                    arrays[name] = np.full(shape, 0.1)
                elif suffix in ("gamma", "var"):
                    arrays[name] = np.ones(shape)
                else:
                    arrays[name] = np.zeros(shape)
        return NetParams(self.cfg, arrays)

    # -- passes --------------------------------------------------------------

    @staticmethod
    def _run(seq, p, x, train, tape):
        for layer in seq:
            x, cache = layer.forward(p, x, train)
            if not np.isfinite(x).all():
                raise NetError(f"non-finite activation after layer {layer.name}")
            tape.append((layer, cache))
        return x

    @serial_blas
    def forward(self, params, x, train=False):
        """``x``: ``(N, X, Y, Z)`` mask patches. Returns ``(y_c, y_e)`` each ``(N, X, Y, Z)`` and a tape."""
        p = params.arrays
        x = np.asarray(x, dtype=np.float64)[None]
        tape = {"enc": [], "mid": []}
        skips = []
        for level, blk in enumerate(self.encoder):
            t = []
            x = self._run(blk, p, x, train, t)
            skips.append(x)
            x, cache = self.pool.forward(p, x)
            tape["enc"].append((t, cache))
        x = self._run(self.bottleneck, p, x, train, tape["mid"])
        outs = {}
        for head in HEADS:
            h = x
            steps = []
            for blk, skip in zip(self.decoders[head], reversed(skips)):
                h, _ = self.up.forward(p, h)
                split = h.shape[0]
                h = np.concatenate([h, skip], axis=0)
                t = []
                h = self._run(blk, p, h, train, t)
                steps.append((split, t))
            t = []
            if head == "dist":
                h = self._run(self.attention, p, h, train, t)
            h = self._run([self.outputs[head]], p, h, train, t)
            tape[head] = (steps, t)
            outs[head] = h[0]
        return outs["dist"], outs["end"], tape

    @staticmethod
    def _back(tape, p, dy, grads):
        for layer, cache in reversed(tape):
            dy, g = layer.backward(p, cache, dy)
            for k, v in g.items():
                grads[k] = grads[k] + v if k in grads else v
        return dy

    @serial_blas
    def backward(self, params, tape, d_c, d_e):
        """Gradients of a scalar loss given its gradients w.r.t. both outputs."""
        p = params.arrays
        grads = {}
        d_skip = [None] * self.cfg.depth
        d_mid = 0.0
        for head, d in (("dist", d_c), ("end", d_e)):
            steps, t = tape[head]
            dh = self._back(t, p, np.asarray(d, dtype=np.float64)[None], grads)
            for i, (split, tb) in enumerate(reversed(steps)):
                level = i
                dh = self._back(tb, p, dh, grads)
                d_skip[level] = dh[split:] if d_skip[level] is None else d_skip[level] + dh[split:]
                dh, _ = self.up.backward(p, None, dh[:split])
            d_mid = d_mid + dh
        dx = self._back(tape["mid"], p, d_mid, grads)
        for level in reversed(range(self.cfg.depth)):
            t, pool_cache = tape["enc"][level]
            dx, _ = self.pool.backward(p, pool_cache, dx)
            dx = self._back(t, p, dx + d_skip[level], grads)
        return grads


@dataclass
class NetParams:
    config: NetConfig
    arrays: dict = field(default_factory=dict)

    def copy(self):
        return NetParams(NetConfig(**asdict(self.config)), {k: v.copy() for k, v in self.arrays.items()})

    def save(self, directory):
        """JSON manifest plus one raw little-endian float64 file per array."""
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        entries = []
        for name in sorted(self.arrays):
            a = np.ascontiguousarray(self.arrays[name], dtype="<f8")
            fname = f"{name}.f64"
            (d / fname).write_bytes(a.tobytes())
            entries.append({"name": name, "shape": list(a.shape), "file": fname})
        manifest = {"config": asdict(self.config), "seed": self.config.seed, "arrays": entries}
        (d / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")

    @classmethod
    def load(cls, directory):
        d = Path(directory)
        manifest = json.loads((d / "manifest.json").read_text())
        cfg = NetConfig.from_dict(manifest["config"])
        expected = Network(cfg).shapes()
        arrays = {}
        for e in manifest["arrays"]:
            raw = (d / e["file"]).read_bytes()
            shape = tuple(e["shape"])
            if len(raw) != 8 * int(np.prod(shape)):
                raise NetError(f"{e['file']}: {len(raw)} bytes, expected {8 * int(np.prod(shape))}")
            arrays[e["name"]] = np.frombuffer(raw, dtype="<f8").reshape(shape).astype(np.float64)
        if {k: tuple(v) for k, v in expected.items()} != {k: v.shape for k, v in arrays.items()}:
            raise NetError("parameter shapes do not match the manifest config")
        return cls(cfg, arrays)
