import numpy as np
import pytest

from despeckle.errors import NetTooLarge, ShapeMismatch, TauLengthMismatch
from despeckle.nn import (
    DenoiserNet,
    NetConfig,
    SgdConfig,
    conv_backward,
    conv_forward,
    forward,
    grad_check,
    lr_at,
    pad_to_multiple,
    sgd_step,
    upsample2,
    upsample2_backward,
)
from despeckle.speckle import linear_schedule

SMALL_UNET = NetConfig(T=10, arch="unet", channels=(4, 8, 8))
SMALL_TWO = NetConfig(T=10, arch="two_layer", channels=(4,))


def _tau(T):
    return linear_schedule(0.005, 0.5, T)


def _pair(rng, size=8):
    clean = rng.uniform(0.1, 0.9, (size, size))
    noisy = clean * np.exp(0.2 * rng.standard_normal(clean.shape))
    return noisy, clean


def _randomize(net, seed):
    """Give the zero-initialised output layer non-zero weights so every path carries gradient."""
    rng = np.random.default_rng(seed)
    for name, p in net.params.items():
        if name.startswith("conv_out") or name.endswith("bias"):
            p[...] = 0.1 * rng.standard_normal(p.shape)


# -- conv primitives against a direct-loop oracle ------------------------------

def _conv_loop(x, w, b, stride):
    # x: (H, W, Cin) channels-last; w: (Cout, Cin, k, k); symmetric zero padding k // 2
    k = w.shape[-1]
    p = k // 2
    xp = np.pad(x, ((p, p), (p, p), (0, 0)))
    H, W = x.shape[:2]
    ho, wo = (H + stride - 1) // stride, (W + stride - 1) // stride
    out = np.zeros((ho, wo, w.shape[0]))
    for i in range(ho):
        for j in range(wo):
            win = xp[i * stride:i * stride + k, j * stride:j * stride + k, :]
            for o in range(w.shape[0]):
                out[i, j, o] = np.sum(win * w[o].transpose(1, 2, 0)) + b[o]
    return out


@pytest.mark.parametrize("stride", [1, 2])
def test_conv_forward_matches_loop(rng, stride):
    x = rng.standard_normal((1, 8, 8, 3))
    w = rng.standard_normal((5, 3, 3, 3))
    b = rng.standard_normal(5)
    out, _ = conv_forward(x, w, b, stride=stride)
    np.testing.assert_allclose(out[0], _conv_loop(x[0], w, b, stride), atol=1e-12)


@pytest.mark.parametrize("stride", [1, 2])
def test_conv_backward_is_adjoint(rng, stride):
    # <conv(x), g> is linear in x and w, so its gradients equal the backward outputs
    x = rng.standard_normal((2, 8, 8, 3))
    w = rng.standard_normal((4, 3, 3, 3))
    b = np.zeros(4)
    out, cache = conv_forward(x, w, b, stride=stride)
    g = rng.standard_normal(out.shape)
    dx, dw, db = conv_backward(g, w, cache, stride=stride)
    dx_dir = rng.standard_normal(x.shape)
    lhs = np.sum(conv_forward(dx_dir, w, b, stride=stride)[0] * g)
    assert lhs == pytest.approx(np.sum(dx * dx_dir), rel=1e-10)
    dw_dir = rng.standard_normal(w.shape)
    lhs = np.sum(conv_forward(x, dw_dir, b, stride=stride)[0] * g)
    assert lhs == pytest.approx(np.sum(dw * dw_dir), rel=1e-10)
    np.testing.assert_allclose(db, g.sum(axis=(0, 1, 2)))


def test_upsample_adjoint(rng):
    x = rng.standard_normal((1, 3, 4, 2))
    g = rng.standard_normal((1, 6, 8, 2))
    assert np.sum(upsample2(x) * g) == pytest.approx(np.sum(x * upsample2_backward(g)), rel=1e-12)


# -- network ------------------------------------------------------------------

@pytest.mark.parametrize("config", [SMALL_UNET, SMALL_TWO, NetConfig(T=50)])
def test_residual_init_is_identity(rng, config):
    net = DenoiserNet(config, seed=1)
    noisy = rng.uniform(0.1, 1.0, (16, 16))
    np.testing.assert_array_equal(forward(net, noisy, _tau(config.T)), noisy)


def test_forward_deterministic(rng):
    a = DenoiserNet(SMALL_UNET, seed=4)
    b = DenoiserNet(SMALL_UNET, seed=4)
    _randomize(a, 2)
    _randomize(b, 2)
    noisy = rng.uniform(0.1, 1.0, (16, 16))
    np.testing.assert_array_equal(forward(a, noisy, _tau(10)), forward(b, noisy, _tau(10)))


def test_param_count_grows_with_T():
    small = DenoiserNet(NetConfig(T=100)).num_params
    large = DenoiserNet(NetConfig(T=200)).num_params
    assert large - small == 100 * NetConfig(T=100).embedding_width


def test_shapes_and_flat_roundtrip():
    net = DenoiserNet(SMALL_UNET, seed=3)
    flat = net.flat_params()
    assert flat.size == net.num_params
    other = DenoiserNet(SMALL_UNET, seed=99)
    other.set_flat_params(flat)
    np.testing.assert_array_equal(other.flat_params(), flat)
    with pytest.raises(ShapeMismatch):
        other.set_flat_params(flat[:-1])


def test_tau_length_mismatch(rng):
    net = DenoiserNet(SMALL_UNET)
    with pytest.raises(TauLengthMismatch):
        forward(net, rng.uniform(size=(8, 8)), _tau(11))


def test_batch_shape_errors():
    net = DenoiserNet(SMALL_UNET)
    with pytest.raises(ShapeMismatch):
        net.forward_batch(np.zeros((1, 1, 6, 8)), _tau(10))
    with pytest.raises(ShapeMismatch):
        net.forward_batch(np.zeros((1, 2, 8, 8)), _tau(10))
    with pytest.raises(ShapeMismatch):
        forward(net, np.zeros((2, 2)), _tau(10))


def test_odd_sizes_padded_and_cropped(rng):
    net = DenoiserNet(SMALL_UNET, seed=0)
    _randomize(net, 0)
    img = rng.uniform(0.1, 0.9, (13, 18))
    assert forward(net, img, _tau(10)).shape == (13, 18)
    assert pad_to_multiple(img, 4).shape == (16, 20)


def test_loss_worked_example():
    net = DenoiserNet(SMALL_TWO)
    clean = np.full((4, 4), 0.5)
    assert net.loss(clean + 0.1, clean, _tau(10)) == pytest.approx(0.01, abs=1e-15)
    loss, _ = net.loss_and_grad(clean + 0.1, clean, _tau(10))
    assert loss == pytest.approx(0.01, abs=1e-15)


@pytest.mark.parametrize("config, shift", [(SMALL_TWO, 1), (SMALL_UNET, 4)])
def test_translation_equivariance(rng, config, shift):
    net = DenoiserNet(config, seed=5)
    _randomize(net, 5)
    img = rng.uniform(0.1, 0.9, (32, 32))
    base = forward(net, img, _tau(10))
    moved = forward(net, np.roll(img, (shift, shift), axis=(0, 1)), _tau(10))
    # compare away from the boundary where padding differs
    m = 12
    np.testing.assert_allclose(moved[m + shift:-m, m + shift:-m], base[m:-m - shift, m:-m - shift], atol=1e-12)


# -- gradient checking ---------------------------------------------------------

class _ScalarLinear:
    """prediction = w * x + b; loss = mean((pred - y)^2)."""

    def __init__(self):
        self.params = {"w": np.array([0.7]), "b": np.array([-0.2])}

    def loss(self, x, y, tau):
        return float(np.mean((self.params["w"][0] * x + self.params["b"][0] - y) ** 2))

    def loss_and_grad(self, x, y, tau):
        r = self.params["w"][0] * x + self.params["b"][0] - y
        return float(np.mean(r * r)), {"w": np.array([np.mean(2 * r * x)]), "b": np.array([np.mean(2 * r)])}


class _Corrupted:
    """Wraps a net and negates one gradient entry."""

    def __init__(self, net):
        self.net = net
        self.params = net.params

    def loss(self, *a):
        return self.net.loss(*a)

    def loss_and_grad(self, *a):
        loss, g = self.net.loss_and_grad(*a)
        g = {k: v.copy() for k, v in g.items()}
        g["conv1.weight"].reshape(-1)[0] *= -1
        return loss, g


def test_grad_check_scalar_linear(rng):
    x = rng.standard_normal(10)
    assert grad_check(_ScalarLinear(), x, 2 * x, None) < 1e-10


@pytest.mark.parametrize("config", [SMALL_TWO, SMALL_UNET])
def test_grad_check_networks(rng, config):
    net = DenoiserNet(config, seed=2)
    _randomize(net, 3)
    noisy, clean = _pair(rng)
    assert grad_check(net, noisy, clean, _tau(10)) < 1e-5


def test_grad_check_detects_corruption(rng):
    net = DenoiserNet(SMALL_TWO, seed=2)
    _randomize(net, 3)
    noisy, clean = _pair(rng)
    assert grad_check(_Corrupted(net), noisy, clean, _tau(10)) > 0.5


def test_grad_check_refuses_large_nets(rng):
    net = DenoiserNet(NetConfig(T=200))
    noisy, clean = _pair(rng)
    with pytest.raises(NetTooLarge):
        grad_check(net, noisy, clean, _tau(200))


# -- optimiser ----------------------------------------------------------------

def test_sgd_worked_example():
    stub = _ScalarLinear()
    stub.params["w"][0] = 1.0
    sgd_step(stub, {"w": np.array([2.0]), "b": np.array([0.0])}, 0.1)
    assert stub.params["w"][0] == pytest.approx(0.8, abs=1e-15)


def test_sgd_linear_in_gradient(rng):
    net = DenoiserNet(SMALL_TWO, seed=0)
    theta = net.flat_params()
    grads = {k: rng.standard_normal(v.shape) for k, v in net.params.items()}
    a, b = net.copy(), net.copy()
    sgd_step(a, grads, 0.1)
    sgd_step(b, {k: 2 * v for k, v in grads.items()}, 0.1)
    np.testing.assert_allclose(b.flat_params() - theta, 2 * (a.flat_params() - theta), atol=1e-14)


def test_sgd_shape_mismatch():
    net = DenoiserNet(SMALL_TWO)
    grads = {k: np.zeros(v.shape) for k, v in net.params.items()}
    grads["conv1.bias"] = np.zeros(99)
    with pytest.raises(ShapeMismatch):
        sgd_step(net, grads, 0.1)


def test_lr_schedule():
    cfg = SgdConfig(0.05)
    assert lr_at(cfg, 0) == 0.05
    assert lr_at(cfg, 19) == 0.05
    assert lr_at(cfg, 20) == pytest.approx(0.005)
    assert lr_at(cfg, 45) == pytest.approx(0.0005)


def test_small_enough_step_decreases_loss(rng):
    net = DenoiserNet(SMALL_UNET, seed=7)
    _randomize(net, 8)
    noisy, clean = _pair(rng, 16)
    loss0, grads = net.loss_and_grad(noisy, clean, _tau(10))
    lr = 1.0
    for _ in range(20):
        trial = net.copy()
        sgd_step(trial, grads, lr)
        if trial.loss(noisy, clean, _tau(10)) < loss0:
            break
        lr /= 2
    else:
        pytest.fail("no descent step found")


def test_training_steps_reduce_loss(rng):
    net = DenoiserNet(SMALL_UNET, seed=7)
    noisy, clean = _pair(rng, 16)
    first = net.loss(noisy, clean, _tau(10))
    for _ in range(50):
        _, grads = net.loss_and_grad(noisy, clean, _tau(10))
        sgd_step(net, grads, 0.05)
    assert net.loss(noisy, clean, _tau(10)) < first
