import numpy as np
import pytest

from persist_sgd.nn import LayerSpec, init_network, loss_and_gradient

H = 1e-6


def central_difference(fn, x, h=H):
    """Central finite differences of scalar ``fn`` at every entry of ``x``."""
    x = np.array(x, dtype=np.float64)
    out = np.zeros_like(x)
    flat, gflat = x.reshape(-1), out.reshape(-1)
    for j in range(flat.size):
        orig = flat[j]
        flat[j] = orig + h
        up = fn(x)
        flat[j] = orig - h
        down = fn(x)
        flat[j] = orig
        gflat[j] = (up - down) / (2 * h)
    return out


def assert_grad_close(analytic, numeric, rtol=1e-5, atol_small=1e-8):
    """Elementwise relative error, absolute tolerance where |g| < 1e-6."""
    analytic, numeric = np.asarray(analytic), np.asarray(numeric)
    err = np.abs(analytic - numeric)
    scale = np.maximum(np.abs(analytic), np.abs(numeric))
    small = scale < 1e-6
    bad = np.where(small, err > atol_small, err > rtol * scale)
    assert not bad.any(), (
        f"{bad.sum()} of {bad.size} entries off; worst rel "
        f"{(err / np.where(small, 1, scale)).max():.3e}"
    )


def network_fd_gradient(net, x, y):
    """Finite-difference gradient of the summed minibatch loss over all params."""
    base = net.params.copy()

    def total(p):
        net.params[:] = p
        return loss_and_gradient(net, x, y)[0].sum()

    try:
        return central_difference(total, base)
    finally:
        net.params[:] = base


def mlp_specs(d=5, hidden=8, classes=4):
    return [LayerSpec.dense(d, hidden), LayerSpec.relu(), LayerSpec.dense(hidden, classes)]


def conv_specs():
    # (2, 6, 6) -> conv 3x3 -> (3, 4, 4) -> pool -> (3, 2, 2) -> 12 -> 3
    return [
        LayerSpec.conv2d(2, 3, 3),
        LayerSpec.relu(),
        LayerSpec.maxpool2d(),
        LayerSpec.flatten(),
        LayerSpec.dense(12, 3),
    ]


def random_problem(specs, seed, n, input_shape=None, jitter=0.1):
    """Network with nonzero biases plus a random labelled batch."""
    net = init_network(specs, seed, input_shape)
    rng = np.random.default_rng(seed + 1000)
    net.params[:] += rng.normal(0.0, jitter, net.num_params)
    x = rng.normal(size=(n, *net.input_shape))
    y = rng.integers(0, net.num_classes, n)
    return net, x, y


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
