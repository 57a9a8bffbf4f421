"""Genome-defined U-Net mask estimator."""

from __future__ import annotations

import numpy as np

from .genome import Genome, LayerSpec
from .layers import (
    Conv2D,
    DepthwiseSeparable,
    Layer,
    PyramidPool,
    ReLU,
    Sequential,
    SpatiallySeparable,
    TransposedConv2D,
    dense_projection,
    gradients_of,
)

IN_CHANNELS = 2
DOWN_KERNEL = (3, 3)
N_LEVELS = 3
TOTAL_STRIDE = 2 ** N_LEVELS


class ShapeError(ValueError):
    pass


def make_layer(spec: LayerSpec, c_in: int, rng, dtype) -> Layer:
    k, d, f = spec.kernel[0], spec.dilation[0], spec.filters
    if spec.kind == "conv":
        return Conv2D(c_in, f, spec.kernel, dilation=spec.dilation, rng=rng, dtype=dtype)
    if spec.kind == "depthwise-conv":
        return DepthwiseSeparable(c_in, f, spec.kernel, spec.dilation, rng=rng, dtype=dtype)
    if spec.kind == "separable-time-first":
        return SpatiallySeparable(c_in, f, k, d, time_first=True, rng=rng, dtype=dtype)
    if spec.kind == "separable-freq-first":
        return SpatiallySeparable(c_in, f, k, d, time_first=False, rng=rng, dtype=dtype)
    raise ValueError(f"layer kind {spec.kind!r} is not a block layer")


class ResidualBlock(Layer):
    """``repeats`` copies of one layer type, each followed by ReLU and a residual add.

    When ``skip_channels`` is given the first residual comes from an external
    skip tensor (encoder activation) instead of the block input. Residual
    sources whose channel count differs from ``filters`` pass through a
    dense projection.
    """

    def __init__(self, spec: LayerSpec, c_in: int, rng=None, dtype=np.float64, skip_channels=None):
        super().__init__()
        self.spec = spec
        self.c_in, self.c_out = c_in, spec.filters
        self.uses_skip = skip_channels is not None
        self.layers, self.projections = [], []
        c = c_in
        for r in range(spec.repeats):
            self.layers.append(Sequential(make_layer(spec, c, rng, dtype), ReLU()))
            src = skip_channels if (r == 0 and self.uses_skip) else c
            self.projections.append(dense_projection(src, spec.filters, rng, dtype) if src != spec.filters else None)
            c = spec.filters

    def _parts(self):
        for layer, proj in zip(self.layers, self.projections):
            yield layer
            if proj is not None:
                yield proj

    def zero_grad(self):
        for p in self._parts():
            p.zero_grad()

    def parameters(self):
        out = []
        for n, (layer, proj) in enumerate(zip(self.layers, self.projections)):
            out += [(f"rep{n}.{k}", v) for k, v in layer.parameters()]
            if proj is not None:
                out += [(f"rep{n}.proj.{k}", v) for k, v in proj.parameters()]
        return out

    def gradients(self):
        out = []
        for p in self._parts():
            out += gradients_of(p)
        return out

    @property
    def n_params(self):
        return sum(p.n_params for p in self._parts())

    def forward(self, x, skip=None):
        h = x
        for r, (layer, proj) in enumerate(zip(self.layers, self.projections)):
            y = layer.forward(h)
            src = skip if (r == 0 and self.uses_skip) else h
            h = y + (proj.forward(src) if proj is not None else src)
        return h

    def backward(self, g):
        """Return ``(grad_input, grad_skip)``; ``grad_skip`` is None without a skip."""
        g_skip = None
        for r in reversed(range(len(self.layers))):
            layer, proj = self.layers[r], self.projections[r]
            g_res = proj.backward(g) if proj is not None else g
            g_in = layer.backward(g)
            if r == 0 and self.uses_skip:
                g_skip = g_res
                g = g_in
            else:
                g = g_in + g_res
        return g, g_skip


class UNet(Layer):
    """Encoder (3 residual blocks + strided convs), bottleneck (block + pyramid
    pooling), decoder (3 residual blocks + transposed convs) and a linear 1x1
    output layer producing the real/imaginary mask channels."""

    def __init__(self, genome: Genome, seed: int = 0, dtype=np.float64, zero_final: bool = False):
        super().__init__()
        genome.validate()
        self.genome = genome
        self.seed = seed
        self.dtype = np.dtype(dtype)
        rng = np.random.default_rng(seed)
        self.enc, self.down = [], []
        c = IN_CHANNELS
        skip_channels = []
        for spec in genome.encoder:
            blk = ResidualBlock(spec, c, rng, dtype)
            c = blk.c_out
            self.enc.append(blk)
            self.down.append(Sequential(Conv2D(c, c, DOWN_KERNEL, stride=(2, 2), rng=rng, dtype=dtype), ReLU()))
            skip_channels.append(c)
        self.mid = ResidualBlock(genome.bottleneck, c, rng, dtype)
        c = self.mid.c_out
        self.pool = PyramidPool(c, c, rng=rng, dtype=dtype)
        c = self.pool.c_out
        self.dec, self.up = [], []
        for spec, sc in zip(genome.decoder, reversed(skip_channels)):
            blk = ResidualBlock(spec, c, rng, dtype, skip_channels=sc)
            c = blk.c_out
            self.dec.append(blk)
            self.up.append(Sequential(TransposedConv2D(c, c, DOWN_KERNEL, (2, 2), rng=rng, dtype=dtype), ReLU()))
        self.out = dense_projection(c, IN_CHANNELS, rng, dtype, zero=zero_final)
        self.zero_grad()

    def _modules(self):
        for e, d in zip(self.enc, self.down):
            yield e
            yield d
        yield self.mid
        yield self.pool
        for d, u in zip(self.dec, self.up):
            yield d
            yield u
        yield self.out

    def zero_grad(self):
        for m in self._modules():
            m.zero_grad()

    def parameters(self):
        names = ["enc0", "down0", "enc1", "down1", "enc2", "down2", "mid", "pool",
                 "dec0", "up0", "dec1", "up1", "dec2", "up2", "out"]
        out = []
        for name, m in zip(names, self._modules()):
            out += [(f"{name}.{k}", v) for k, v in m.parameters()]
        return out

    def gradients(self):
        out = []
        for m in self._modules():
            out += gradients_of(m)
        return out

    @property
    def n_params(self):
        return sum(m.n_params for m in self._modules())

    def check_input(self, x):
        if x.ndim != 4 or x.shape[3] != IN_CHANNELS:
            raise ShapeError(f"expected [batch, time, freq, {IN_CHANNELS}] input, got {x.shape}")
        if x.shape[1] % TOTAL_STRIDE or x.shape[2] % TOTAL_STRIDE:
            raise ShapeError(f"time/freq {x.shape[1:3]} must be divisible by {TOTAL_STRIDE}")

    def forward(self, x):
        self.check_input(x)
        x = x.astype(self.dtype, copy=False)
        skips = []
        h = x
        for blk, down in zip(self.enc, self.down):
            h = down.forward(blk.forward(h))
            skips.append(h)
        self.bottleneck_shape = h.shape
        h = self.pool.forward(self.mid.forward(h))
        for blk, up, s in zip(self.dec, self.up, reversed(skips)):
            h = up.forward(blk.forward(h, s))
        return self.out.forward(h)

    def backward(self, g):
        g = self.out.backward(g.astype(self.dtype, copy=False))
        g_skips = []
        for blk, up in zip(reversed(self.dec), reversed(self.up)):
            g, gs = blk.backward(up.backward(g))
            g_skips.append(gs)
        # g_skips[0] belongs to the shallowest encoder level
        g, _ = self.mid.backward(self.pool.backward(g))
        for level in reversed(range(N_LEVELS)):
            # g is the gradient w.r.t. this level's strided-conv output
            g = self.down[level].backward(g + g_skips[level])
            g, _ = self.enc[level].backward(g)
        return g
