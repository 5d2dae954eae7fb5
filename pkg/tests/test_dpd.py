import numpy as np
import pytest

from splatfit import dpd as dp
from splatfit import nn


@pytest.fixture(scope="module")
def net():
    return dp.DpdNet(n_frames=20, seed=0)


def sigmoid(x):
    return 1.0 / (1.0 + np.exp(-x))


def mlp_eval(mlp, x):
    """Independent forward pass straight from the weight matrices."""
    h = np.atleast_2d(x)
    for w, b, act in zip(mlp.weights, mlp.biases, mlp.activations):
        h = h @ w + b
        if act == "tanh":
            h = np.tanh(h)
        elif act == "sigmoid":
            h = sigmoid(h)
        elif act == "relu":
            h = np.maximum(h, 0.0)
    return h


def test_temporal_weight_matches_scripted_formula(net):
    rng = np.random.default_rng(1)
    for _ in range(100):
        frame = int(rng.integers(1, 21))
        g = rng.normal(0, 0.5, (4, 14))
        fb = net.frame_bias(frame, g, training=False)
        enc = nn.positional_encode(np.array([float(frame)]), dp.TEMPORAL_K, 20.0)
        z = mlp_eval(net.encoder, enc)[0]
        psi = float(mlp_eval(net.weight_head, z)[0, 0])
        expect = 2.0 * sigmoid(psi) - 1.0
        assert abs(fb.omega - expect) < 1e-10


def test_bias_matches_scripted_formula(net):
    rng = np.random.default_rng(2)
    for _ in range(100):
        frame = int(rng.integers(1, 21))
        g = rng.normal(0, 0.5, (3, 14))
        fb = net.frame_bias(frame, g, training=False)
        enc = nn.positional_encode(np.array([float(frame)]), dp.TEMPORAL_K, 20.0)
        z = mlp_eval(net.encoder, enc)[0]
        inp = np.concatenate([np.tile(z, (3, 1)), g], axis=1)
        raw = dp.BIAS_GAIN * mlp_eval(net.bias_head, inp)
        assert np.max(np.abs(fb.bias.to_flat() - fb.omega * raw)) < 1e-10


def test_temporal_weight_is_strictly_inside_unit_interval(net):
    for frame in range(1, 21):
        fb = net.frame_bias(frame, np.zeros((2, 14)), training=False)
        assert -1.0 < fb.omega < 1.0


def test_dropout_frequency_is_thirty_percent():
    net = dp.DpdNet(n_frames=4, seed=0)
    rng = np.random.default_rng(123)
    g = np.zeros((2, 14))
    drops = sum(net.frame_bias(1, g, training=True, rng=rng).dropped
                for _ in range(100_000))
    assert 0.29 <= drops / 100_000 <= 0.31


def test_dropped_frames_produce_exactly_zero_bias():
    net = dp.DpdNet(n_frames=4, seed=0)
    rng = np.random.default_rng(7)
    g = np.ones((3, 14))
    seen_drop = False
    for _ in range(50):
        fb = net.frame_bias(2, g, training=True, rng=rng)
        if fb.dropped:
            seen_drop = True
            assert fb.omega == 0.0
            assert np.all(fb.bias.to_flat() == 0.0)
    assert seen_drop


def test_inference_mode_never_drops(net):
    for _ in range(50):
        fb = net.frame_bias(3, np.zeros((2, 14)), training=False,
                            rng=np.random.default_rng(0))
        assert not fb.dropped


def test_frame_outside_sequence_rejected(net):
    with pytest.raises(ValueError):
        net.frame_bias(0, np.zeros((1, 14)), training=False)
    with pytest.raises(ValueError):
        net.frame_bias(21, np.zeros((1, 14)), training=False)


def test_backward_matches_finite_differences(net):
    rng = np.random.default_rng(3)
    g = rng.normal(0, 0.5, (4, 14))
    gw = rng.normal(0, 1, (4, 14))

    def loss():
        fb = net.frame_bias(5, g, training=False)
        return float(np.sum(gw * fb.bias.to_flat()))

    fb = net.frame_bias(5, g, training=False)
    grads, d_g = net.backward(fb, gw)
    params = net.param_dict()
    h = 1e-6
    names = sorted(params)
    for name in names[:: max(1, len(names) // 6)]:
        flat = params[name].reshape(-1)
        idx = int(rng.integers(flat.size))
        orig = flat[idx]
        flat[idx] = orig + h
        lp = loss()
        flat[idx] = orig - h
        lm = loss()
        flat[idx] = orig
        num = (lp - lm) / (2 * h)
        an = grads[name].reshape(-1)[idx]
        assert abs(an - num) / max(1e-8, abs(an) + abs(num)) < 1e-6
    # attribute-input path
    idx = 7
    flat = g.reshape(-1)
    orig = flat[idx]
    flat[idx] = orig + h
    lp = loss()
    flat[idx] = orig - h
    lm = loss()
    flat[idx] = orig
    num = (lp - lm) / (2 * h)
    an = d_g.reshape(-1)[idx]
    assert abs(an - num) / max(1e-8, abs(an) + abs(num)) < 1e-6


def test_parameter_count_is_small():
    net = dp.DpdNet(n_frames=60, seed=0)
    assert net.n_params < 2000
    assert net.n_params == sum(v.size for v in net.param_dict().values())
