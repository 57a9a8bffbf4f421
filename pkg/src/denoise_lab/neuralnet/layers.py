"""Layers with hand-written backward passes.

Tensors are numpy arrays laid out as [batch, time, freq, channels]. Every
layer caches what it needs in ``forward`` and, in ``backward``, accumulates
parameter gradients into ``self.grads`` and returns the input gradient.
"""

from __future__ import annotations

import numpy as np


def same_padding(n: int, kernel: int, stride: int, dilation: int):
    out = -(-n // stride)
    span = dilation * (kernel - 1) + 1
    total = max((out - 1) * stride + span - n, 0)
    return out, total // 2, total - total // 2


def he_uniform(rng, shape, fan_in, dtype):
    limit = np.sqrt(6.0 / fan_in)
    return rng.uniform(-limit, limit, size=shape).astype(dtype)


class Layer:
    """Base class: ``params`` and ``grads`` are dicts of same-shaped arrays."""

    def __init__(self):
        self.params: dict[str, np.ndarray] = {}
        self.grads: dict[str, np.ndarray] = {}

    def zero_grad(self):
        for k, v in self.params.items():
            self.grads[k] = np.zeros_like(v)

    def parameters(self):
        return list(self.params.items())

    @property
    def n_params(self) -> int:
        return sum(v.size for v in self.params.values())

    def forward(self, x):
        raise NotImplementedError

    def backward(self, g):
        raise NotImplementedError


class Conv2D(Layer):
    """Dilated, strided 2-D convolution with same padding (im2col + matmul)."""

    def __init__(self, c_in, c_out, kernel=(3, 3), stride=(1, 1), dilation=(1, 1),
                 rng=None, dtype=np.float64, zero=False):
        super().__init__()
        self.c_in, self.c_out = c_in, c_out
        self.kernel, self.stride, self.dilation = tuple(kernel), tuple(stride), tuple(dilation)
        kt, kf = self.kernel
        shape = (kt, kf, c_in, c_out)
        if zero or rng is None:
            w = np.zeros(shape, dtype)
        else:
            w = he_uniform(rng, shape, kt * kf * c_in, dtype)
        self.params = {"w": w, "b": np.zeros(c_out, dtype)}
        self.zero_grad()

    def _geometry(self, shape):
        _, T, F, _ = shape
        (kt, kf), (st, sf), (dt, df) = self.kernel, self.stride, self.dilation
        To, pt0, pt1 = same_padding(T, kt, st, dt)
        Fo, pf0, pf1 = same_padding(F, kf, sf, df)
        return To, Fo, (pt0, pt1), (pf0, pf1)

    def _offsets(self, To, Fo):
        (kt, kf), (st, sf), (dt, df) = self.kernel, self.stride, self.dilation
        for i in range(kt):
            for j in range(kf):
                yield (slice(i * dt, i * dt + st * (To - 1) + 1, st),
                       slice(j * df, j * df + sf * (Fo - 1) + 1, sf))

    def forward(self, x):
        if x.shape[3] != self.c_in:
            raise ValueError(f"Conv2D expects {self.c_in} channels, got {x.shape[3]}")
        To, Fo, pt, pf = self._geometry(x.shape)
        xp = np.pad(x, ((0, 0), pt, pf, (0, 0))) if (sum(pt) or sum(pf)) else x
        cols = np.concatenate([xp[:, a, b, :] for a, b in self._offsets(To, Fo)], axis=3)
        self._cache = (x.shape, xp.shape, pt, pf, To, Fo, cols)
        w = self.params["w"].reshape(-1, self.c_out)
        return cols @ w + self.params["b"]

    def backward(self, g):
        shape, pshape, pt, pf, To, Fo, cols = self._cache
        w = self.params["w"]
        self.grads["b"] += g.sum(axis=(0, 1, 2))
        k = cols.shape[3]
        self.grads["w"] += (cols.reshape(-1, k).T @ g.reshape(-1, self.c_out)).reshape(w.shape)
        dcols = g @ w.reshape(-1, self.c_out).T
        dxp = np.zeros(pshape, dtype=g.dtype)
        c = self.c_in
        for n, (a, b) in enumerate(self._offsets(To, Fo)):
            dxp[:, a, b, :] += dcols[..., n * c:(n + 1) * c]
        T, F = shape[1], shape[2]
        return dxp[:, pt[0]:pt[0] + T, pf[0]:pf[0] + F, :]


class DepthwiseConv2D(Layer):
    """Per-channel (depth multiplier 1) dilated convolution, stride 1, same padding."""

    def __init__(self, channels, kernel=(3, 3), dilation=(1, 1), rng=None, dtype=np.float64):
        super().__init__()
        self.c_in = self.c_out = channels
        self.kernel, self.dilation = tuple(kernel), tuple(dilation)
        kt, kf = self.kernel
        w = np.zeros((kt, kf, channels), dtype) if rng is None else he_uniform(rng, (kt, kf, channels), kt * kf, dtype)
        self.params = {"w": w, "b": np.zeros(channels, dtype)}
        self.zero_grad()

    def _offsets(self, T, F):
        (kt, kf), (dt, df) = self.kernel, self.dilation
        for i in range(kt):
            for j in range(kf):
                yield i, j, slice(i * dt, i * dt + T), slice(j * df, j * df + F)

    def forward(self, x):
        _, T, F, _ = x.shape
        (kt, kf), (dt, df) = self.kernel, self.dilation
        _, pt0, pt1 = same_padding(T, kt, 1, dt)
        _, pf0, pf1 = same_padding(F, kf, 1, df)
        xp = np.pad(x, ((0, 0), (pt0, pt1), (pf0, pf1), (0, 0)))
        out = np.zeros_like(x) + self.params["b"]
        w = self.params["w"]
        for i, j, a, b in self._offsets(T, F):
            out += xp[:, a, b, :] * w[i, j]
        self._cache = (xp, (pt0, pf0), T, F)
        return out

    def backward(self, g):
        xp, (pt0, pf0), T, F = self._cache
        w = self.params["w"]
        self.grads["b"] += g.sum(axis=(0, 1, 2))
        dxp = np.zeros_like(xp)
        for i, j, a, b in self._offsets(T, F):
            self.grads["w"][i, j] += np.einsum("btfc,btfc->c", xp[:, a, b, :], g)
            dxp[:, a, b, :] += g * w[i, j]
        return dxp[:, pt0:pt0 + T, pf0:pf0 + F, :]


class TransposedConv2D(Layer):
    """Strided transposed convolution: zero-insertion upsampling then a same-padded convolution.

    Output spatial size is exactly ``stride`` times the input size.
    """

    def __init__(self, c_in, c_out, kernel=(3, 3), stride=(2, 2), rng=None, dtype=np.float64):
        super().__init__()
        self.c_in, self.c_out = c_in, c_out
        self.stride = tuple(stride)
        self.conv = Conv2D(c_in, c_out, kernel, rng=rng, dtype=dtype)
        self.params = self.conv.params
        self.grads = self.conv.grads

    def zero_grad(self):
        self.conv.zero_grad()
        self.grads = self.conv.grads

    def forward(self, x):
        B, T, F, C = x.shape
        st, sf = self.stride
        up = np.zeros((B, T * st, F * sf, C), dtype=x.dtype)
        up[:, ::st, ::sf, :] = x
        return self.conv.forward(up)

    def backward(self, g):
        st, sf = self.stride
        return self.conv.backward(g)[:, ::st, ::sf, :]


class ReLU(Layer):
    def forward(self, x):
        self._mask = x > 0
        return x * self._mask

    def backward(self, g):
        return g * self._mask


class Sequential(Layer):
    def __init__(self, *layers):
        super().__init__()
        self.layers = [l for l in layers if l is not None]

    def zero_grad(self):
        for l in self.layers:
            l.zero_grad()

    def parameters(self):
        out = []
        for n, l in enumerate(self.layers):
            out += [(f"{n}.{k}", v) for k, v in l.parameters()]
        return out

    def gradients(self):
        out = []
        for l in self.layers:
            out += gradients_of(l)
        return out

    @property
    def n_params(self):
        return sum(l.n_params for l in self.layers)

    def forward(self, x):
        for l in self.layers:
            x = l.forward(x)
        return x

    def backward(self, g):
        for l in reversed(self.layers):
            g = l.backward(g)
        return g


def gradients_of(layer):
    """Gradient arrays in the same order as ``layer.parameters()``."""
    if hasattr(layer, "gradients"):
        return layer.gradients()
    return [layer.grads[k] for k in layer.params]


def dense_projection(c_in, c_out, rng=None, dtype=np.float64, zero=False):
    """1x1 convolution acting as a per-position dense layer."""
    return Conv2D(c_in, c_out, (1, 1), rng=rng, dtype=dtype, zero=zero)


class DepthwiseSeparable(Sequential):
    """Depthwise k x k convolution followed by a pointwise projection to ``filters``."""

    def __init__(self, c_in, filters, kernel, dilation, rng=None, dtype=np.float64):
        super().__init__(
            DepthwiseConv2D(c_in, kernel, dilation, rng=rng, dtype=dtype),
            dense_projection(c_in, filters, rng=rng, dtype=dtype),
        )


class SpatiallySeparable(Sequential):
    """Two 1-D convolutions, time then frequency (or the reverse)."""

    def __init__(self, c_in, filters, k, d, time_first=True, rng=None, dtype=np.float64):
        t = Conv2D(c_in, filters, (k, 1), dilation=(d, 1), rng=rng, dtype=dtype)
        t2 = Conv2D(filters, filters, (k, 1), dilation=(d, 1), rng=rng, dtype=dtype)
        f = Conv2D(c_in, filters, (1, k), dilation=(1, d), rng=rng, dtype=dtype)
        f2 = Conv2D(filters, filters, (1, k), dilation=(1, d), rng=rng, dtype=dtype)
        super().__init__(*((t, f2) if time_first else (f, t2)))


def _pool(x, s):
    """Average pooling with window = stride = s; a ragged last window averages what it holds."""
    B, T, F, C = x.shape
    To, Fo = -(-T // s), -(-F // s)
    pad = np.zeros((B, To * s, Fo * s, C), x.dtype)
    pad[:, :T, :F] = x
    count = np.zeros((To * s, Fo * s))
    count[:T, :F] = 1
    sums = pad.reshape(B, To, s, Fo, s, C).sum(axis=(2, 4))
    n = count.reshape(To, s, Fo, s).sum(axis=(1, 3))
    return sums / n[None, :, :, None], n


def _unpool(y, s, T, F):
    return np.repeat(np.repeat(y, s, axis=1), s, axis=2)[:, :T, :F]


class PyramidPool(Layer):
    """Average pooling at several scales, 1x1 conv + ReLU per branch,
    nearest upsampling and channel concatenation with the input."""

    def __init__(self, channels, branch_filters, scales=(1, 2, 4), rng=None, dtype=np.float64):
        super().__init__()
        self.scales = tuple(scales)
        self.c_in = channels
        self.c_out = channels + branch_filters * len(self.scales)
        self.branches = [Sequential(dense_projection(channels, branch_filters, rng, dtype), ReLU())
                         for _ in self.scales]

    def zero_grad(self):
        for b in self.branches:
            b.zero_grad()

    def parameters(self):
        out = []
        for n, b in enumerate(self.branches):
            out += [(f"pool{self.scales[n]}.{k}", v) for k, v in b.parameters()]
        return out

    def gradients(self):
        out = []
        for b in self.branches:
            out += b.gradients()
        return out

    @property
    def n_params(self):
        return sum(b.n_params for b in self.branches)

    def forward(self, x):
        _, T, F, _ = x.shape
        outs = [x]
        self._counts = []
        for s, branch in zip(self.scales, self.branches):
            pooled, n = _pool(x, s)
            self._counts.append(n)
            outs.append(_unpool(branch.forward(pooled), s, T, F))
        self._shape = x.shape
        return np.concatenate(outs, axis=3)

    def backward(self, g):
        B, T, F, C = self._shape
        dx = g[..., :C].copy()
        off = C
        for s, branch, n in zip(self.scales, self.branches, self._counts):
            width = branch.layers[0].c_out
            gb = g[..., off:off + width]
            off += width
            To, Fo = n.shape
            pad = np.zeros((B, To * s, Fo * s, width), g.dtype)
            pad[:, :T, :F] = gb
            gp = pad.reshape(B, To, s, Fo, s, width).sum(axis=(2, 4))
            gpool = branch.backward(gp) / n[None, :, :, None]
            up = np.repeat(np.repeat(gpool, s, axis=1), s, axis=2)[:, :T, :F]
            dx += up
        return dx


class GlobalAvgPool(Layer):
    """[B, T, F, C] -> [B, 1, 1, C]."""

    def forward(self, x):
        self._shape = x.shape
        return x.mean(axis=(1, 2), keepdims=True)

    def backward(self, g):
        _, T, F, _ = self._shape
        return np.broadcast_to(g / (T * F), self._shape).copy()
