import numpy as np
import pytest

from trajdiff.nn import MLP, SGD, Adam, make_optimizer, silu, silu_grad, sinusoidal_features


def rel_err(a, b):
    return np.max(np.abs(a - b) / np.maximum(1e-8, np.abs(a) + np.abs(b)))


def test_silu_grad_matches_finite_difference():
    x = np.linspace(-6, 6, 101)
    h = 1e-6
    fd = (silu(x + h) - silu(x - h)) / (2 * h)
    assert np.max(np.abs(fd - silu_grad(x))) < 1e-8


def test_mlp_backward_matches_finite_difference(rng):
    net = MLP([5, 7, 6, 3], rng)
    x = rng.standard_normal((4, 5))
    target = rng.standard_normal((4, 3))

    def loss():
        return float(np.sum((net(x) - target) ** 2))

    out, cache = net.forward(x)
    grads, g_in = net.backward(cache, 2 * (out - target))
    h = 1e-6
    for p, g in zip(net.params, grads):
        fd = np.zeros_like(p)
        for idx in np.ndindex(p.shape):
            old = p[idx]
            p[idx] = old + h
            up = loss()
            p[idx] = old - h
            down = loss()
            p[idx] = old
            fd[idx] = (up - down) / (2 * h)
        assert rel_err(fd, g) < 1e-5
    fd_in = np.zeros_like(x)
    for idx in np.ndindex(x.shape):
        old = x[idx]
        x[idx] = old + h
        up = loss()
        x[idx] = old - h
        down = loss()
        x[idx] = old
        fd_in[idx] = (up - down) / (2 * h)
    assert rel_err(fd_in, g_in) < 1e-5


def test_mlp_needs_two_sizes(rng):
    with pytest.raises(ValueError):
        MLP([3], rng)


def test_optimizers_descend_on_a_quadratic():
    for opt in (Adam(0.1), SGD(0.1)):
        p = [np.array([3.0, -2.0])]
        for _ in range(200):
            opt.step(p, [2 * p[0]])
        assert np.linalg.norm(p[0]) < 1e-2
    with pytest.raises(ValueError):
        make_optimizer("rmsprop", 0.1)


def test_zero_learning_rate_leaves_parameters():
    p = [np.array([1.0, 2.0])]
    Adam(0.0).step(p, [np.array([5.0, -5.0])])
    assert np.array_equal(p[0], [1.0, 2.0])


def test_sinusoidal_features_shape_and_range():
    f = sinusoidal_features(np.array([0.0, 0.5, 1.0]), 16)
    assert f.shape == (3, 16)
    assert np.all(np.abs(f) <= 1)
    assert np.array_equal(f[0, :8], np.zeros(8))
    with pytest.raises(ValueError):
        sinusoidal_features(0.2, 5)
