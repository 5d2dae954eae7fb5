import numpy as np
import pytest

from splatfit import template as tp


@pytest.fixture(scope="module")
def tpl():
    return tp.build_template(n_vertices=80, seed=0)


def test_skinning_rows_sum_to_one(tpl):
    assert np.allclose(tpl.skin_weights.sum(axis=1), 1.0, atol=1e-9)
    assert np.all(tpl.skin_weights >= 0)


def test_joint_hierarchy_is_acyclic_rooted(tpl):
    parent = tpl.joint_parent
    assert np.sum(parent == -1) == 1
    for j in range(len(parent)):
        seen = set()
        while j != -1:
            assert j not in seen
            seen.add(j)
            j = int(parent[j])


def test_neighbor_graph_shape_and_no_self_loops(tpl):
    n, k = tpl.neighbors.shape
    assert n == tpl.n_vertices
    assert np.all(tpl.neighbors != np.arange(n)[:, None])
    assert np.all((0 <= tpl.neighbors) & (tpl.neighbors < n))


def test_identity_pose_returns_rest_vertices(tpl):
    state = tp.PoseState.identity(tpl.n_joints)
    v, _ = tp.pose(tpl, state)
    assert np.allclose(v, tpl.rest_vertices, atol=1e-12)


def test_global_translation_is_rigid(tpl):
    state = tp.PoseState.identity(tpl.n_joints)
    state = tp.PoseState(state.theta, state.beta, np.array([0.3, -0.2, 1.1]))
    v, _ = tp.pose(tpl, state)
    assert np.allclose(v, tpl.rest_vertices + [0.3, -0.2, 1.1], atol=1e-12)


def test_root_rotation_is_rigid_about_pivot(tpl):
    # rotating only the root applies one rigid transform to every vertex
    theta = np.zeros((tpl.n_joints, 3))
    theta[0] = [0.0, 0.0, 0.7]
    v, _ = tp.pose(tpl, tp.PoseState(theta, np.zeros(10), np.zeros(3)))
    rot = tp._axis_angle_to_matrix(theta[0])[0]
    piv = tpl.joint_pivots[0]
    expect = (tpl.rest_vertices - piv) @ rot.T + piv
    assert np.allclose(v, expect, atol=1e-10)


def test_pose_wraps_angles():
    state = tp.PoseState(np.full((3, 3), 3 * np.pi), np.zeros(10), np.zeros(3))
    assert np.allclose(state.theta, np.pi, atol=1e-12)


def test_axis_angle_rodrigues_oracle():
    rng = np.random.default_rng(1)
    for _ in range(20):
        axis = rng.normal(0, 1, 3)
        axis /= np.linalg.norm(axis)
        angle = rng.uniform(-np.pi, np.pi)
        r = tp._axis_angle_to_matrix(axis * angle)[0]
        k = np.array([[0, -axis[2], axis[1]],
                      [axis[2], 0, -axis[0]],
                      [-axis[1], axis[0], 0]])
        expect = np.eye(3) + np.sin(angle) * k + (1 - np.cos(angle)) * k @ k
        assert np.allclose(r, expect, atol=1e-12)


def test_laplacian_energy_matches_sparse_quadratic_oracle(tpl):
    rng = np.random.default_rng(2)
    v = tpl.rest_vertices + rng.normal(0, 0.05, tpl.rest_vertices.shape)
    e = tp.laplacian_energy(v, tpl.neighbors)
    n, k = tpl.neighbors.shape
    ref = 0.0
    for i in range(n):
        diff = v[i] - v[tpl.neighbors[i]].mean(axis=0)
        ref += float(diff @ diff)
    ref /= n
    assert abs(e - ref) < 1e-12
    # rest pose of a smooth surface is not penalized much more than noise
    assert tp.laplacian_energy(v, tpl.neighbors) > tp.laplacian_energy(
        tpl.rest_vertices, tpl.neighbors)


def test_laplacian_gradient_matches_finite_differences(tpl):
    rng = np.random.default_rng(3)
    v = tpl.rest_vertices + rng.normal(0, 0.05, tpl.rest_vertices.shape)
    g = tp.laplacian_energy_backward(v, tpl.neighbors)
    h = 1e-6
    flat = v.reshape(-1)
    for idx in rng.integers(0, flat.size, 20):
        orig = flat[idx]
        flat[idx] = orig + h
        lp = tp.laplacian_energy(v, tpl.neighbors)
        flat[idx] = orig - h
        lm = tp.laplacian_energy(v, tpl.neighbors)
        flat[idx] = orig
        num = (lp - lm) / (2 * h)
        an = g.reshape(-1)[idx]
        assert abs(an - num) / max(1e-8, abs(an) + abs(num)) < 1e-6


def test_shape_dirs_are_orthonormal(tpl):
    d = tpl.shape_dirs.reshape(-1, 10)
    gram = d.T @ d
    assert np.allclose(gram, np.eye(10), atol=1e-10)


def test_template_save_load_round_trip(tmp_path, tpl):
    path = tmp_path / "tpl.wgta"
    tpl.save(path)
    back = tp.Template.load(path)
    assert np.allclose(back.rest_vertices, tpl.rest_vertices, atol=1e-6)
    assert np.array_equal(back.joint_parent, tpl.joint_parent)
    assert np.array_equal(back.neighbors, tpl.neighbors)
    assert np.allclose(back.skin_weights, tpl.skin_weights, atol=1e-6)


def test_pose_vector_round_trip(tpl):
    rng = np.random.default_rng(4)
    state = tp.PoseState(rng.uniform(-1, 1, (tpl.n_joints, 3)),
                         rng.normal(0, 1, 10), rng.normal(0, 1, 3))
    vec = state.to_vector()
    assert vec.shape == (tp.PoseState.vector_dim(tpl.n_joints),)
    back = tp.PoseState.from_vector(vec, tpl.n_joints)
    assert np.allclose(back.to_vector(), vec, atol=1e-15)
