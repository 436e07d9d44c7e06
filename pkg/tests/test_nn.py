import math

import numpy as np
import pytest

from halrp import nn
from halrp.linalg import svd, truncate
from halrp.nn import (Batch, DivergenceError, LowRankWeight, ShapeError, add_head, backward, conv2d, dense,
                      flatten, forward, init_network, maxpool, relu, train)
from halrp.perturb import TaskLayerParams, decompose, init_layer_params, reconstruct_weights


def naive_conv(x, W, b, stride, pad):
    N, C, H, Wd = x.shape
    d, _, J, I = W.shape
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    Ho = (H + 2 * pad - d) // stride + 1
    Wo = (Wd + 2 * pad - d) // stride + 1
    out = np.zeros((N, J, Ho, Wo))
    for n in range(N):
        for j in range(J):
            for y in range(Ho):
                for xx in range(Wo):
                    acc = b[j]
                    for a in range(d):
                        for c in range(d):
                            for i in range(I):
                                acc += W[a, c, j, i] * xp[n, i, y * stride + a, xx * stride + c]
                    out[n, j, y, xx] = acc
    return out


def naive_pool(x, p):
    N, C, H, W = x.shape
    out = np.zeros((N, C, H // p, W // p))
    for n in range(N):
        for c in range(C):
            for y in range(H // p):
                for xx in range(W // p):
                    out[n, c, y, xx] = x[n, c, y * p:(y + 1) * p, xx * p:(xx + 1) * p].max()
    return out


def fd_grads(net, task, batch, eps=1e-4):
    out = {}
    for name, p in net.parameters(task).items():
        g = np.zeros_like(p)
        for idx in np.ndindex(p.shape):
            old = p[idx]
            p[idx] = old + eps
            up = nn.loss(forward(net, task, batch.inputs), batch.labels)
            p[idx] = old - eps
            down = nn.loss(forward(net, task, batch.inputs), batch.labels)
            p[idx] = old
            g[idx] = (up - down) / (2 * eps)
        out[name] = g
    return out


def max_rel_err(a, b):
    return max(float(np.max(np.abs(a[k] - b[k]) / np.maximum(np.maximum(np.abs(a[k]), np.abs(b[k])), 1e-7)))
               for k in a)


def test_zero_network_gives_zero_logits():
    net = init_network([dense(3, 4), relu()], (3,), seed=0)
    add_head(net, 0, 2)
    for i in net.weights:
        net.weights[i][:] = 0
    net.heads[0].weight[:] = 0
    assert np.all(forward(net, 0, np.ones((5, 3))) == 0)


def test_identity_layer_passes_basis_vector():
    net = init_network([dense(3, 3)], (3,), seed=0)
    net.weights[0][:] = np.eye(3)
    add_head(net, 0, 2)
    x = np.array([[1.0, 0.0, 0.0]])
    np.testing.assert_allclose(forward(net, 0, x), x @ net.heads[0].weight.T)


def test_two_layer_forward_matches_straight_line_oracle():
    rng = np.random.default_rng(0)
    net = init_network([dense(5, 4), relu(), dense(4, 3), relu()], (5,), seed=1)
    add_head(net, 0, 2, seed=2)
    for b in net.biases.values():
        b[:] = rng.standard_normal(b.shape)
    x = rng.standard_normal((6, 5))
    W1, W2, H = net.weights[0], net.weights[2], net.heads[0]
    expect = np.zeros((6, 2))
    for n in range(6):
        h1 = [max(0.0, sum(W1[o, i] * x[n, i] for i in range(5)) + net.biases[0][o]) for o in range(4)]
        h2 = [max(0.0, sum(W2[o, i] * h1[i] for i in range(4)) + net.biases[2][o]) for o in range(3)]
        for c in range(2):
            expect[n, c] = sum(H.weight[c, i] * h2[i] for i in range(3)) + H.bias[c]
    np.testing.assert_allclose(forward(net, 0, x), expect, atol=1e-10)


@pytest.mark.parametrize("stride,pad", [(1, 0), (1, 1), (2, 1), (2, 0)])
def test_conv_matches_naive_loops(stride, pad):
    rng = np.random.default_rng(stride * 10 + pad)
    layers = [conv2d(2, 3, 3, stride=stride, padding=pad), flatten()]
    net = init_network(layers, (2, 7, 7), seed=0)
    net.biases[0][:] = rng.standard_normal(3)
    x = rng.standard_normal((2, 2, 7, 7))
    y, _ = nn._conv_forward(x, net.weights[0], net.biases[0], layers[0])
    np.testing.assert_allclose(y, naive_conv(x, net.weights[0], net.biases[0], stride, pad), atol=1e-12)


def test_maxpool_matches_naive_loops():
    x = np.random.default_rng(1).standard_normal((2, 3, 6, 6))
    y, _ = nn._pool_forward(x, 2)
    np.testing.assert_array_equal(y, naive_pool(x, 2))


def test_loss_examples():
    assert nn.loss(np.zeros((3, 5)), np.array([0, 1, 4])) == pytest.approx(math.log(5))
    assert nn.loss(np.array([[1.0, 0.0]]), np.array([0])) == pytest.approx(math.log(1 + math.exp(-1)))
    assert nn.loss(np.array([[1000.0, 0.0, 0.0]]), np.array([0])) == pytest.approx(0.0, abs=1e-300)
    rng = np.random.default_rng(0)
    logits, labels = rng.standard_normal((8, 4)), rng.integers(0, 4, 8)
    perm = np.array([2, 0, 3, 1])
    inv = np.argsort(perm)
    assert nn.loss(logits[:, perm], inv[labels]) == pytest.approx(nn.loss(logits, labels), rel=1e-14)


def _conv_net(seed):
    layers = [conv2d(2, 3, 3, padding=1), relu(), maxpool(2), conv2d(3, 2, 2, stride=2), relu(),
              flatten(), dense(8, 4), relu()]
    net = init_network(layers, (2, 8, 8), seed=seed)
    add_head(net, 0, 3, seed=seed + 1)
    return net


def _low_rank(net, rng):
    lr = net.copy()
    for i in net.parametric_layers():
        W = net.weights[i]
        r, s, f = decompose(W + 0.2 * rng.standard_normal(W.shape), W)
        lr.weights[i] = LowRankWeight(W, init_layer_params(r, s, f, max(1, len(f.sigma) - 1), i))
    return lr


@pytest.mark.parametrize("kind", ["dense", "conv", "low_rank_dense", "low_rank_conv"])
def test_backward_matches_finite_differences(kind):
    rng = np.random.default_rng(42)
    if "conv" in kind:
        net = _conv_net(3)
        batch = Batch(rng.random((3, 128)), rng.integers(0, 3, 3))
    else:
        net = init_network([dense(6, 5), relu(), dense(5, 4), relu()], (6,), seed=3)
        add_head(net, 0, 3, seed=4)
        batch = Batch(rng.random((5, 6)), rng.integers(0, 3, 5))
    if kind.startswith("low_rank"):
        net = _low_rank(net, rng)
    for b in net.biases.values():
        b += 0.05 * rng.standard_normal(b.shape)
    _, g = backward(net, 0, batch)
    assert max_rel_err(fd_grads(net, 0, batch), g.arrays) < 1e-4


def test_gradients_scale_with_loss():
    rng = np.random.default_rng(0)
    net = init_network([dense(4, 3), relu()], (4,), seed=0)
    add_head(net, 0, 2)
    batch = Batch(rng.random((6, 4)), rng.integers(0, 2, 6))
    _, g1 = backward(net, 0, batch)
    # a duplicated batch has the same mean loss, hence the same gradients
    doubled = Batch(np.vstack([batch.inputs] * 2), np.concatenate([batch.labels] * 2))
    _, g2 = backward(net, 0, doubled)
    for k in g1.arrays:
        np.testing.assert_allclose(g1.arrays[k], g2.arrays[k], rtol=1e-12, atol=1e-15)
    # the chain rule through the reparameterization is linear in dL/dW
    lr = _low_rank(net, rng).weights[0]
    G = rng.standard_normal(lr.shape)
    base, scaled = nn.low_rank_grads(G, lr, 0), nn.low_rank_grads(-2.5 * G, lr, 0)
    for k in base:
        np.testing.assert_allclose(scaled[k], -2.5 * base[k], rtol=1e-13, atol=1e-15)


def test_symmetric_minimum_has_zero_gradient():
    net = init_network([dense(1, 2)], (1,), seed=0)
    add_head(net, 0, 2)
    net.weights[0][:] = 0
    net.heads[0].weight[:] = 0
    batch = Batch(np.array([[1.0], [1.0], [-1.0], [-1.0]]), np.array([0, 1, 0, 1]))
    _, g = backward(net, 0, batch)
    assert max(np.abs(v).max() for v in g.arrays.values()) < 1e-6


def test_low_rank_layer_equals_materialized():
    rng = np.random.default_rng(5)
    net = _conv_net(1)
    lr = _low_rank(net, rng)
    mat = lr.copy()
    for i in lr.parametric_layers():
        mat.weights[i] = lr.weights[i].materialize()
    x = rng.random((4, 128))
    np.testing.assert_allclose(forward(lr, 0, x), forward(mat, 0, x), atol=1e-12)


def test_train_zero_epochs_is_noop():
    rng = np.random.default_rng(0)
    net = init_network([dense(3, 2), relu()], (3,), seed=0)
    add_head(net, 0, 2)
    before = net.copy()
    train(net, 0, Batch(rng.random((10, 3)), rng.integers(0, 2, 10)), 0, 0.1, 4)
    for i in net.weights:
        assert np.array_equal(net.weights[i], before.weights[i])


def test_convex_toy_loss_decreases():
    net = init_network([], (2,), seed=0)
    add_head(net, 0, 2, seed=1)
    data = Batch(np.array([[1.0, 0.0], [0.0, 1.0]]), np.array([0, 1]))
    losses = []
    train(net, 0, data, 5, 0.5, 2, on_epoch=lambda e, v: losses.append(v))
    assert all(b < a for a, b in zip(losses, losses[1:]))


def test_train_deterministic():
    rng = np.random.default_rng(0)
    data = Batch(rng.random((40, 5)), rng.integers(0, 3, 40))
    nets = []
    for _ in range(2):
        net = init_network([dense(5, 4), relu()], (5,), seed=7)
        add_head(net, 0, 3, seed=8)
        nets.append(train(net, 0, data, 3, 0.1, 8, seed=9, momentum=0.9))
    for i in nets[0].weights:
        assert np.array_equal(nets[0].weights[i], nets[1].weights[i])


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_divergence_is_reported():
    net = init_network([dense(2, 2)], (2,), seed=0)
    add_head(net, 0, 2)
    data = Batch(np.array([[np.inf, 1.0]]), np.array([0]))
    with pytest.raises(DivergenceError):
        train(net, 0, data, 1, 1.0, 1)


def test_shape_errors():
    with pytest.raises(ShapeError):
        init_network([dense(3, 2), dense(5, 1)], (3,))
    with pytest.raises(ShapeError):
        init_network([conv2d(1, 2, 5)], (1, 3, 3))
    net = init_network([dense(3, 2)], (3,))
    with pytest.raises(KeyError):
        forward(net, 0, np.ones((1, 3)))


def test_mean_layer_gradients_match_full_batch():
    rng = np.random.default_rng(2)
    net = init_network([dense(4, 3), relu()], (4,), seed=2)
    add_head(net, 0, 2)
    data = Batch(rng.random((1100, 4)), rng.integers(0, 2, 1100))
    means = nn.mean_layer_gradients(net, 0, data, batch_size=256)
    _, g = backward(net, 0, data)
    np.testing.assert_allclose(means[0], g.layer_weights[0], rtol=1e-10, atol=1e-14)


def test_reconstruct_weights_matches_factors():
    rng = np.random.default_rng(0)
    Wb = rng.standard_normal((4, 3))
    f = truncate(svd(rng.standard_normal((4, 3))), 2)
    p = TaskLayerParams(rng.standard_normal(4), rng.standard_normal(3), f)
    expect = np.diag(p.r) @ Wb @ np.diag(p.s) + f.U @ np.diag(f.sigma) @ f.V.T
    np.testing.assert_allclose(reconstruct_weights(Wb, p), expect, atol=1e-13)
