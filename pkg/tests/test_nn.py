import numpy as np
import pytest

from splatfit import nn


def test_positional_encode_matches_transcendental_oracle():
    x = np.array([0.3, -1.2])
    k, period = 3, 5.0
    enc = nn.positional_encode(x, k, period)
    assert enc.shape == (nn.encoded_width(2, k),)
    # component-major: all (sin, cos) pairs of x[0] first, then x[1]
    expect = []
    for comp in x:
        for j in range(k + 1):
            phase = (2.0 ** j) * np.pi * comp / period
            expect.extend([np.sin(phase), np.cos(phase)])
    assert np.allclose(enc, expect, atol=1e-15)


def test_positional_encode_validates_args():
    with pytest.raises(ValueError):
        nn.positional_encode(np.zeros(2), 2, 0.0)
    with pytest.raises(ValueError):
        nn.positional_encode(np.zeros(2), -1, 1.0)


def test_mlp_forward_matches_hand_rolled():
    rng = np.random.default_rng(2)
    mlp = nn.Mlp([3, 4, 2], ["tanh", "identity"], rng)
    x = rng.normal(0, 1, (5, 3))
    h = np.tanh(x @ mlp.weights[0] + mlp.biases[0])
    expect = h @ mlp.weights[1] + mlp.biases[1]
    assert np.allclose(mlp(x), expect, atol=1e-14)


def test_single_linear_layer_weight_grad_is_outer_product():
    mlp = nn.Mlp([3, 2], ["identity"], np.random.default_rng(0))
    x = np.array([1.5, -0.5, 2.0])
    mlp(x)
    dws, dbs, dx = mlp.backward(np.ones(2))
    assert np.allclose(dws[0], np.outer(x, np.ones(2)))
    assert np.allclose(dbs[0], np.ones(2))
    assert np.allclose(dx, mlp.weights[0] @ np.ones(2))


def test_mlp_gradcheck_below_tolerance():
    rng = np.random.default_rng(3)
    mlp = nn.Mlp([2, 3, 1], ["tanh", "identity"], rng)
    x = rng.normal(0, 1, (4, 2))
    params = dict(mlp.param_items("m"))

    def f():
        out = mlp(x)
        loss = float(np.sum(out ** 2))
        dws, dbs, _ = mlp.backward(2.0 * out)
        return loss, dict(mlp.grad_items("m", dws, dbs))

    assert nn.gradcheck(f, params) < 1e-5


def test_mlp_shape_and_activation_validation():
    with pytest.raises(nn.DimensionError):
        nn.Mlp([3, 4], ["relu", "relu"], np.random.default_rng(0))
    with pytest.raises(ValueError):
        nn.Mlp([3, 4], ["softplus"], np.random.default_rng(0))
    mlp = nn.Mlp([3, 4], ["relu"], np.random.default_rng(0))
    with pytest.raises(nn.DimensionError):
        mlp(np.zeros(5))
    with pytest.raises(nn.StateError):
        nn.Mlp([3, 4], ["relu"], np.random.default_rng(0)).backward(np.zeros(4))


def test_adam_two_steps_match_hand_rolled_oracle():
    p = {"w": np.array([1.0, -2.0])}
    opt = nn.Adam({"w": p["w"]}, lr=0.1)
    g1 = np.array([0.5, -1.0])
    g2 = np.array([-0.25, 2.0])

    # independent reference implementation
    m = np.zeros(2)
    v = np.zeros(2)
    ref = np.array([1.0, -2.0])
    for t, g in [(1, g1), (2, g2)]:
        m = 0.9 * m + 0.1 * g
        v = 0.999 * v + 0.001 * g * g
        mh = m / (1 - 0.9 ** t)
        vh = v / (1 - 0.999 ** t)
        ref = ref - 0.1 * mh / (np.sqrt(vh) + 1e-8)

    opt.step({"w": g1})
    opt.step({"w": g2})
    assert np.allclose(p["w"], ref, atol=1e-15)


def test_adam_rejects_non_finite_gradients():
    p = np.zeros(2)
    opt = nn.Adam({"w": p})
    with pytest.raises(nn.OptimizerError):
        opt.step({"w": np.array([np.nan, 0.0])})


def test_adam_state_round_trip_continues_identically():
    rng = np.random.default_rng(4)
    p1 = rng.normal(0, 1, 5)
    p2 = p1.copy()
    o1 = nn.Adam({"w": p1}, lr=0.05)
    o2 = nn.Adam({"w": p2}, lr=0.05)
    g = rng.normal(0, 1, 5)
    o1.step({"w": g})
    o2.step({"w": g})
    state = o1.state_tensors("s")
    o2.load_state_tensors({k: v.copy() for k, v in state.items()}, "s")
    g2 = rng.normal(0, 1, 5)
    o1.step({"w": g2})
    o2.step({"w": g2})
    assert np.array_equal(p1, p2)
