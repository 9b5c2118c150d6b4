"""Layers with hand-written backward passes.

Activations are batched as ``(C, N, X, Y, Z)``. Convolutions unfold
bounded slabs of the input into column matrices (im2col) so each slab is a
single matmul. Every
layer is a ``forward(params, x, train) -> (y, cache)`` /
``backward(params, cache, dy) -> (dx, grads)`` pair; parameters are looked
up by name in a plain dict so the same code serves training and gradcheck.
"""

from __future__ import annotations

import itertools

import numpy as np

BN_EPS = 1e-5
BN_MOMENTUM = 0.1
COL_BUDGET = 1 << 22


class Layer:
    param_names: tuple = ()
    buffer_names: tuple = ()

    def __init__(self, name):
        self.name = name

    def key(self, suffix):
        return f"{self.name}.{suffix}"

    def forward(self, p, x, train=False):
        raise NotImplementedError

    def backward(self, p, cache, dy):
        raise NotImplementedError

    def shapes(self):
        return {}


class Conv3d(Layer):
    """Cubic kernel, stride 1, zero 'same' padding, with bias."""

    param_names = ("w", "b")

    def __init__(self, name, c_in, c_out, k=3):
        super().__init__(name)
        if k % 2 == 0:
            raise ValueError(f"kernel size must be odd, got {k}")
        self.c_in, self.c_out, self.k = c_in, c_out, k

    def shapes(self):
        return {self.key("w"): (self.c_out, self.c_in, self.k, self.k, self.k), self.key("b"): (self.c_out,)}

    def _shifts(self):
        return list(itertools.product(range(self.k), repeat=3))

    def _chunks(self, shape):
        # (sample, x-range) blocks keeping the column matrix near COL_BUDGET floats
        c, n, X, Y, Z = shape
        rows = c * self.k**3
        step = max(1, COL_BUDGET // max(rows * Y * Z, 1))
        for s in range(n):
            for x0 in range(0, X, step):
                yield s, x0, min(x0 + step, X)

    def _cols(self, xp, s, x0, x1, Y, Z):
        c = xp.shape[0]
        shifts = self._shifts()
        cols = np.empty((len(shifts), c, x1 - x0, Y, Z))
        for r, (i, j, l) in enumerate(shifts):
            cols[r] = xp[:, s, x0 + i:x1 + i, j:j + Y, l:l + Z]
        return cols.reshape(len(shifts) * c, -1)

    def _w2(self, w):
        # (O, C, k, k, k) -> (O, k^3 * C), shift-major like the columns
        return w.transpose(0, 2, 3, 4, 1).reshape(self.c_out, -1)

    def forward(self, p, x, train=False):
        w, b = p[self.key("w")], p[self.key("b")]
        c, n, X, Y, Z = x.shape
        if c != self.c_in:
            raise ValueError(f"{self.name}: expected {self.c_in} input channels, got {c}")
        h = self.k // 2
        xp = np.pad(x, ((0, 0), (0, 0), (h, h), (h, h), (h, h))) if h else x
        w2 = self._w2(w)
        out = np.empty((self.c_out, n, X, Y, Z))
        for s, x0, x1 in self._chunks(x.shape):
            out[:, s, x0:x1] = (w2 @ self._cols(xp, s, x0, x1, Y, Z) + b[:, None]).reshape(self.c_out, x1 - x0, Y, Z)
        return out, xp

    def backward(self, p, cache, dy):
        w = p[self.key("w")]
        xp = cache
        c = self.c_in
        h = self.k // 2
        _, n, X, Y, Z = dy.shape
        w2 = self._w2(w)
        dw2 = np.zeros_like(w2)
        dxp = np.zeros_like(xp)
        shifts = self._shifts()
        for s, x0, x1 in self._chunks((c, n, X, Y, Z)):
            d2 = dy[:, s, x0:x1].reshape(self.c_out, -1)
            dw2 += d2 @ self._cols(xp, s, x0, x1, Y, Z).T
            dcols = (w2.T @ d2).reshape(len(shifts), c, x1 - x0, Y, Z)
            for r, (i, j, l) in enumerate(shifts):
                dxp[:, s, x0 + i:x1 + i, j:j + Y, l:l + Z] += dcols[r]
        dx = dxp[:, :, h:h + X, h:h + Y, h:h + Z] if h else dxp
        k = self.k
        dw = dw2.reshape(self.c_out, k, k, k, c).transpose(0, 4, 1, 2, 3)
        return dx, {self.key("w"): dw, self.key("b"): dy.sum(axis=(1, 2, 3, 4))}


class BatchNorm(Layer):
    """Per-channel normalisation over batch and space.

    Training uses batch statistics and updates the running averages in
    ``p``; inference applies the frozen running averages, a fixed affine map.
    """

    param_names = ("gamma", "beta")
    buffer_names = ("mean", "var")

    def __init__(self, name, channels):
        super().__init__(name)
        self.channels = channels

    def shapes(self):
        c = (self.channels,)
        return {self.key("gamma"): c, self.key("beta"): c, self.key("mean"): c, self.key("var"): c}

    def forward(self, p, x, train=False):
        g, b = p[self.key("gamma")], p[self.key("beta")]
        x2 = x.reshape(self.channels, -1)
        if train:
            mu = x2.mean(axis=1)
            var = x2.var(axis=1)
            m = x2.shape[1]
            p[self.key("mean")] *= 1 - BN_MOMENTUM
            p[self.key("mean")] += BN_MOMENTUM * mu
            p[self.key("var")] *= 1 - BN_MOMENTUM
            p[self.key("var")] += BN_MOMENTUM * var * m / max(m - 1, 1)
        else:
            mu, var = p[self.key("mean")], p[self.key("var")]
        inv = 1.0 / np.sqrt(var + BN_EPS)
        xhat = (x2 - mu[:, None]) * inv[:, None]
        y = g[:, None] * xhat + b[:, None]
        return y.reshape(x.shape), (xhat, inv, train)

    def backward(self, p, cache, dy):
        xhat, inv, train = cache
        g = p[self.key("gamma")]
        d2 = dy.reshape(self.channels, -1)
        grads = {self.key("gamma"): (d2 * xhat).sum(axis=1), self.key("beta"): d2.sum(axis=1)}
        dxhat = d2 * g[:, None]
        if train:
            dx = inv[:, None] * (dxhat - dxhat.mean(axis=1, keepdims=True) - xhat * (dxhat * xhat).mean(axis=1, keepdims=True))
        else:
            dx = dxhat * inv[:, None]
        return dx.reshape(dy.shape), grads


class ReLU(Layer):
    def forward(self, p, x, train=False):
        pos = x > 0
        return np.where(pos, x, 0.0), pos

    def backward(self, p, cache, dy):
        return np.where(cache, dy, 0.0), {}


class MaxPool(Layer):
    """2x2x2 max pooling; gradient goes to the first maximum in each block."""

    def forward(self, p, x, train=False):
        c, n, X, Y, Z = x.shape
        if X % 2 or Y % 2 or Z % 2:
            raise ValueError(f"{self.name}: spatial dims {(X, Y, Z)} not divisible by 2")
        blocks = x.reshape(c, n, X // 2, 2, Y // 2, 2, Z // 2, 2).transpose(0, 1, 2, 4, 6, 3, 5, 7)
        blocks = blocks.reshape(c, n, X // 2, Y // 2, Z // 2, 8)
        arg = blocks.argmax(axis=-1)
        y = np.take_along_axis(blocks, arg[..., None], axis=-1)[..., 0]
        return y, (arg, x.shape)

    def backward(self, p, cache, dy):
        arg, shape = cache
        c, n, X, Y, Z = shape
        blocks = np.zeros(dy.shape + (8,))
        np.put_along_axis(blocks, arg[..., None], dy[..., None], axis=-1)
        blocks = blocks.reshape(c, n, X // 2, Y // 2, Z // 2, 2, 2, 2).transpose(0, 1, 2, 5, 3, 6, 4, 7)
        return blocks.reshape(shape), {}


class Upsample(Layer):
    """Nearest-neighbour x2."""

    def forward(self, p, x, train=False):
        y = x
        for ax in (2, 3, 4):
            y = np.repeat(y, 2, axis=ax)
        return y, None

    def backward(self, p, cache, dy):
        c, n, X, Y, Z = dy.shape
        dx = dy.reshape(c, n, X // 2, 2, Y // 2, 2, Z // 2, 2).sum(axis=(3, 5, 7))
        return dx, {}


# -- attention ---------------------------------------------------------------


def _softmax(u, axis):
    e = np.exp(u - u.max(axis=axis, keepdims=True))
    return e / e.sum(axis=axis, keepdims=True)


def _conv1d_same(v, w):
    """Correlate each column of ``v`` (C, N) with odd kernel ``w`` along C, zero padded."""
    k = len(w)
    h = k // 2
    vp = np.pad(v, ((h, h), (0, 0)))
    c = v.shape[0]
    return sum(w[j] * vp[j:j + c] for j in range(k))


def _channel_forward(f, wc, bc):
    # f: (C, N, X, Y, Z)
    v = f.mean(axis=(2, 3, 4))
    pre = _conv1d_same(v, wc) + bc[:, None]
    u = np.maximum(pre, 0.0)
    a = _softmax(u, axis=0)
    return a, a[:, :, None, None, None] * f, (v, pre, a)


def _spatial_forward(fc, ws, bs):
    c, n = fc.shape[:2]
    pre = np.tensordot(ws, fc, axes=(0, 0)) + bs[0]
    u = np.maximum(pre, 0.0)
    a = _softmax(u.reshape(n, -1), axis=1).reshape(u.shape)
    return a, a[None] * fc, (pre, a)


def channel_attention(f, wc, bc):
    """Channel weights of a single ``(C, X, Y, Z)`` feature map.

    ``v`` is the per-channel spatial mean, ``u = relu(wc * v + bc)`` with
    ``*`` a zero-padded 1-D convolution along the channel axis, and the
    weights ``a = softmax(u)``. Returns ``(a, a[c] * f[c])``.
    """
    a, fc, _ = _channel_forward(f[:, None], np.asarray(wc), np.asarray(bc))
    return a[:, 0], fc[:, 0]


def spatial_attention(fc, ws, bs):
    """Location weights of a single ``(C, X, Y, Z)`` feature map.

    ``q = relu(sum_c ws[c] * fc[c] + bs)``; the weights are a softmax of
    ``q`` over every location of the map. Returns ``(a, a * fc)``.
    """
    a, fcs, _ = _spatial_forward(fc[:, None], np.asarray(ws), np.asarray(bs).reshape(1))
    return a[0], fcs[:, 0]


class ChannelAttention(Layer):
    """Channel attention, output scaled by C so uniform weights pass ``f`` through unchanged."""

    param_names = ("w", "b")

    def __init__(self, name, channels, k=3, rescale=True):
        super().__init__(name)
        if k % 2 == 0:
            raise ValueError(f"channel attention kernel must be odd, got {k}")
        self.channels, self.k, self.rescale = channels, k, rescale

    def shapes(self):
        return {self.key("w"): (self.k,), self.key("b"): (self.channels,)}

    def forward(self, p, x, train=False):
        a, y, (v, pre, _) = _channel_forward(x, p[self.key("w")], p[self.key("b")])
        s = self.channels if self.rescale else 1.0
        return s * y, (x, v, pre, a, s)

    def backward(self, p, cache, dy):
        x, v, pre, a, s = cache
        wc = p[self.key("w")]
        dy = s * dy
        c = self.channels
        da = (dy * x).sum(axis=(2, 3, 4))
        du = a * (da - (a * da).sum(axis=0, keepdims=True))
        dpre = np.where(pre > 0, du, 0.0)
        h = self.k // 2
        vp = np.pad(v, ((h, h), (0, 0)))
        dw = np.array([(dpre * vp[j:j + c]).sum() for j in range(self.k)])
        dvp = np.zeros_like(vp)
        for j in range(self.k):
            dvp[j:j + c] += wc[j] * dpre
        dv = dvp[h:h + c]
        m = x.shape[2] * x.shape[3] * x.shape[4]
        dx = a[:, :, None, None, None] * dy + (dv / m)[:, :, None, None, None]
        return dx, {self.key("w"): dw, self.key("b"): dpre.sum(axis=1)}


class SpatialAttention(Layer):
    """Spatial attention, output scaled by the location count so uniform weights are the identity."""

    param_names = ("w", "b")

    def __init__(self, name, channels, rescale=True):
        super().__init__(name)
        self.channels, self.rescale = channels, rescale

    def shapes(self):
        return {self.key("w"): (self.channels,), self.key("b"): (1,)}

    def forward(self, p, x, train=False):
        a, y, (pre, _) = _spatial_forward(x, p[self.key("w")], p[self.key("b")])
        s = float(np.prod(x.shape[2:])) if self.rescale else 1.0
        return s * y, (x, pre, a, s)

    def backward(self, p, cache, dy):
        x, pre, a, s = cache
        ws = p[self.key("w")]
        dy = s * dy
        n = x.shape[1]
        da = (dy * x).sum(axis=0)
        af = a.reshape(n, -1)
        daf = da.reshape(n, -1)
        du = (af * (daf - (af * daf).sum(axis=1, keepdims=True))).reshape(a.shape)
        dpre = np.where(pre > 0, du, 0.0)
        dx = a[None] * dy + ws[:, None, None, None, None] * dpre[None]
        return dx, {self.key("w"): np.tensordot(x, dpre, axes=(range(1, 5), range(4))), self.key("b"): np.array([dpre.sum()])}
