import numpy as np
import pytest

from splatfit.avatar import AvatarNet, texture_feature_pool
from splatfit.dpd import DpdNet
from splatfit.template import PoseState, build_template


@pytest.fixture(scope="module")
def tpl():
    return build_template(n_vertices=48, seed=0)


@pytest.fixture(scope="module")
def net(tpl):
    return AvatarNet(tpl, seed=0)


def rand_pose(tpl, rng):
    return PoseState(rng.uniform(-0.5, 0.5, (tpl.n_joints, 3)),
                     rng.normal(0, 0.1, 10), rng.normal(0, 0.1, 3))


def test_predicted_attributes_are_valid(net, tpl):
    rng = np.random.default_rng(1)
    gset, aux = net.forward(rand_pose(tpl, rng))
    assert len(gset) == tpl.n_vertices
    assert np.all((gset.o > 0) & (gset.o < 1))
    assert np.allclose(np.linalg.norm(gset.q, axis=1), 1.0, atol=1e-12)
    assert np.all(gset.s > 0)
    assert np.all((gset.c >= 0) & (gset.c <= 1))
    assert np.all((aux["xi"] > 0) & (aux["xi"] < 1))


def test_one_splat_per_template_vertex(net, tpl):
    gset, _ = net.forward(PoseState.identity(tpl.n_joints))
    assert np.array_equal(gset.vertex_idx, np.arange(tpl.n_vertices))


def test_forward_is_deterministic(net, tpl):
    rng = np.random.default_rng(2)
    state = rand_pose(tpl, rng)
    a, _ = net.forward(state)
    b, _ = net.forward(state)
    assert np.array_equal(a.to_flat(), b.to_flat())


def test_centers_track_the_posed_template(net, tpl):
    # splat centers stay within a few edge lengths of the posed vertices
    rng = np.random.default_rng(3)
    state = rand_pose(tpl, rng)
    gset, aux = net.forward(state)
    d = np.linalg.norm(gset.p - aux["v1"], axis=1)
    assert np.max(d) < 5 * tpl.mean_edge_length


def test_pooled_texture_feature_is_vertex_mean(net, tpl):
    _, aux = net.forward(PoseState.identity(tpl.n_joints))
    assert np.allclose(aux["pooled_tex"],
                       texture_feature_pool(aux["x_t"]), atol=1e-15)


def test_param_dict_covers_all_parameters(net):
    params = net.param_dict()
    assert sum(v.size for v in params.values()) == net.n_params
    assert "avatar.latents" in params


def test_backward_matches_finite_differences(net, tpl):
    rng = np.random.default_rng(4)
    state = rand_pose(tpl, rng)
    n = tpl.n_vertices
    gp = {k: rng.normal(0, 1, shape) for k, shape in
          [("p", (n, 3)), ("o", (n,)), ("q", (n, 4)), ("s", (n, 3)),
           ("c", (n, 3)), ("xi", (n,))]}

    def loss():
        gset, aux = net.forward(state)
        return float(sum(np.sum(gp[k] * v) for k, v in
                         [("p", gset.p), ("o", gset.o), ("q", gset.q),
                          ("s", gset.s), ("c", gset.c), ("xi", aux["xi"])]))

    _, aux = net.forward(state)
    grads = net.backward(aux, gp)
    params = net.param_dict()
    h = 1e-4          # loss is smooth at this scale; tiny h amplifies roundoff
    for name in sorted(params)[:: max(1, len(params) // 8)]:
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
        assert abs(an - num) / max(1e-6, abs(an) + abs(num)) < 1e-4


def test_frame_bias_network_is_tiny_next_to_prediction_network(tpl):
    avatar = AvatarNet(build_template(n_vertices=512, seed=0), seed=0)
    bias_net = DpdNet(n_frames=60, seed=0)
    assert bias_net.n_params / avatar.n_params < 0.02
