"""Layer-level correctness: finite-difference gradients and naive-loop oracles."""

import numpy as np
import pytest

from denoise_lab.neuralnet import layers as L

H = 1e-4
TOL = 1e-4


def rel_err(a, b):
    return np.max(np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), 1e-6))


def check_gradients(layer, x, seed=0):
    """Compare analytic input/parameter gradients of sum(R * layer(x)) with central differences."""
    rng = np.random.default_rng(seed)
    out = layer.forward(x)
    R = rng.standard_normal(out.shape)
    layer.zero_grad()
    gx = layer.backward(R)
    analytic = [g.copy() for g in L.gradients_of(layer)]

    def loss():
        return np.sum(R * layer.forward(x))

    num_x = np.zeros_like(x)
    for idx in np.ndindex(x.shape):
        old = x[idx]
        x[idx] = old + H
        lp = loss()
        x[idx] = old - H
        lm = loss()
        x[idx] = old
        num_x[idx] = (lp - lm) / (2 * H)
    assert rel_err(gx, num_x) < TOL

    for (name, p), g in zip(layer.parameters(), analytic):
        num = np.zeros_like(p)
        for idx in np.ndindex(p.shape):
            old = p[idx]
            p[idx] = old + H
            lp = loss()
            p[idx] = old - H
            lm = loss()
            p[idx] = old
            num[idx] = (lp - lm) / (2 * H)
        assert rel_err(g, num) < TOL, name


def rand_input(shape, seed=1):
    return np.random.default_rng(seed).standard_normal(shape)


def nonzero_bias(layer, seed=2):
    rng = np.random.default_rng(seed)
    for name, p in layer.parameters():
        if name.endswith("b"):
            p[...] = rng.standard_normal(p.shape) * 0.1
    return layer


RNG = np.random.default_rng


@pytest.mark.parametrize("stride,dilation,kernel", [
    ((1, 1), (1, 1), (3, 3)),
    ((2, 2), (1, 1), (3, 3)),
    ((1, 1), (2, 2), (3, 3)),
    ((1, 2), (2, 1), (5, 3)),
    ((1, 1), (1, 1), (1, 1)),
])
def test_conv_gradients(stride, dilation, kernel):
    layer = nonzero_bias(L.Conv2D(2, 3, kernel, stride, dilation, rng=RNG(0)))
    check_gradients(layer, rand_input((2, 6, 5, 2)))


def test_depthwise_gradients():
    layer = nonzero_bias(L.DepthwiseConv2D(3, (3, 3), (2, 1), rng=RNG(0)))
    check_gradients(layer, rand_input((2, 5, 6, 3)))


def test_depthwise_separable_gradients():
    layer = L.DepthwiseSeparable(2, 3, (3, 3), (1, 1), rng=RNG(0))
    check_gradients(layer, rand_input((1, 4, 6, 2)))


@pytest.mark.parametrize("time_first", [True, False])
def test_spatially_separable_gradients(time_first):
    layer = L.SpatiallySeparable(2, 3, 3, 2, time_first=time_first, rng=RNG(0))
    check_gradients(layer, rand_input((1, 6, 5, 2)))


def test_transposed_conv_gradients():
    layer = nonzero_bias(L.TransposedConv2D(2, 3, (3, 3), (2, 2), rng=RNG(0)))
    check_gradients(layer, rand_input((2, 3, 4, 2)))


def test_dense_projection_gradients():
    layer = nonzero_bias(L.dense_projection(3, 2, rng=RNG(0)))
    check_gradients(layer, rand_input((2, 3, 3, 3)))


def test_pyramid_pool_gradients():
    # 5x6 exercises ragged pooling windows at scales 2 and 4
    layer = L.PyramidPool(2, 2, rng=RNG(0))
    check_gradients(layer, rand_input((1, 5, 6, 2)))


def test_relu_and_global_pool_gradients():
    check_gradients(L.Sequential(L.ReLU(), L.GlobalAvgPool()), rand_input((2, 3, 4, 2)) + 0.05)


# --------------------------------------------------------------------------
# naive-loop oracles
# --------------------------------------------------------------------------


def naive_conv(x, w, b, stride, dilation):
    B, T, F, C = x.shape
    kt, kf, _, O = w.shape
    st, sf = stride
    dt, df = dilation
    To, Fo = -(-T // st), -(-F // sf)
    pt = max((To - 1) * st + dt * (kt - 1) + 1 - T, 0) // 2
    pf = max((Fo - 1) * sf + df * (kf - 1) + 1 - F, 0) // 2
    out = np.zeros((B, To, Fo, O))
    for n in range(B):
        for t in range(To):
            for f in range(Fo):
                for o in range(O):
                    acc = b[o]
                    for i in range(kt):
                        for j in range(kf):
                            ti = t * st + i * dt - pt
                            fj = f * sf + j * df - pf
                            if 0 <= ti < T and 0 <= fj < F:
                                for c in range(C):
                                    acc += x[n, ti, fj, c] * w[i, j, c, o]
                    out[n, t, f, o] = acc
    return out


@pytest.mark.parametrize("stride,dilation", [((1, 1), (1, 1)), ((2, 2), (1, 1)), ((1, 1), (2, 2)), ((2, 1), (1, 2))])
def test_conv_matches_naive(stride, dilation):
    layer = nonzero_bias(L.Conv2D(2, 3, (3, 3), stride, dilation, rng=RNG(4)))
    x = rand_input((2, 7, 6, 2))
    np.testing.assert_allclose(layer.forward(x), naive_conv(x, layer.params["w"], layer.params["b"], stride, dilation), atol=1e-12)


def test_transposed_conv_is_adjoint_of_strided_conv():
    """<T(x), y> == <x, T*(y)> where T* is the input-gradient of the transposed layer."""
    layer = L.TransposedConv2D(2, 3, (3, 3), (2, 2), rng=RNG(5))
    x = rand_input((1, 3, 4, 2))
    y = rand_input((1, 6, 8, 3), seed=9)
    out = layer.forward(x)
    assert out.shape == (1, 6, 8, 3)
    adj = layer.backward(y)
    assert np.sum(out * y) == pytest.approx(np.sum(x * adj), abs=1e-10)


def test_tiny_network_hand_computed():
    """1-filter 3x3 conv + ReLU + 1x1 projection on a 4x4 input, unrolled by hand."""
    x = np.arange(16, dtype=float).reshape(1, 4, 4, 1) / 10 - 0.7
    conv = L.Conv2D(1, 1, (3, 3))
    conv.params["w"][..., 0, 0] = [[0.1, -0.2, 0.3], [0.0, 0.5, -0.1], [0.2, 0.1, -0.3]]
    conv.params["b"][:] = 0.05
    proj = L.dense_projection(1, 1)
    proj.params["w"][:] = 2.0
    proj.params["b"][:] = -0.1
    net = L.Sequential(conv, L.ReLU(), proj)
    out = net.forward(x)[0, :, :, 0]
    k = conv.params["w"][:, :, 0, 0]
    xi = x[0, :, :, 0]
    expected = np.zeros((4, 4))
    for t in range(4):
        for f in range(4):
            s = 0.05
            for i in range(3):
                for j in range(3):
                    tt, ff = t + i - 1, f + j - 1
                    if 0 <= tt < 4 and 0 <= ff < 4:
                        s += xi[tt, ff] * k[i, j]
            expected[t, f] = 2.0 * max(s, 0.0) - 0.1
    np.testing.assert_allclose(out, expected, atol=1e-12)


def test_depthwise_matches_naive():
    layer = nonzero_bias(L.DepthwiseConv2D(2, (3, 3), (1, 2), rng=RNG(6)))
    x = rand_input((1, 5, 6, 2))
    w4 = np.zeros((3, 3, 2, 2))
    for c in range(2):
        w4[:, :, c, c] = layer.params["w"][:, :, c]
    np.testing.assert_allclose(layer.forward(x), naive_conv(x, w4, layer.params["b"], (1, 1), (1, 2)), atol=1e-12)


def test_pyramid_pool_shapes():
    layer = L.PyramidPool(3, 2, rng=RNG(0))
    out = layer.forward(rand_input((2, 5, 7, 3)))
    assert out.shape == (2, 5, 7, 3 + 3 * 2)
