"""Seeded finite-difference verification of every differentiable path.

Each check builds a small random instance, computes analytic gradients, and
compares against central differences at 64-bit.  Relative error per entry is
|a - n| / max(1e-8, |a| + |n|).  MLP-path tolerances are tighter than
renderer paths, whose compositing chains accumulate more roundoff.

Central differences are evaluated at two step sizes and the smaller error
kept, which separates truncation noise (better at the larger h) from
kink-crossing artifacts (better at the smaller h).
"""

from __future__ import annotations

import numpy as np

from . import losses, pao
from .avatar import AvatarNet
from .dpd import DpdNet
from .gaussians import GaussianSet, covariance3d, covariance3d_backward
from .renderer import Camera, rasterize, rasterize_backward
from .template import (PoseState, build_template, laplacian_energy,
                       laplacian_energy_backward, pose, pose_backward)

TOL_RENDER = 1e-4
TOL_MLP = 1e-5


def _rel(a, n):
    return abs(a - n) / max(1e-8, abs(a) + abs(n))


def _max_err(f, arrays, coords, analytic, hs):
    worst = 0.0
    for ai, idx in coords:
        flat = arrays[ai].reshape(-1)
        orig = flat[idx]
        errs = []
        for h in hs:
            flat[idx] = orig + h
            lp = f()
            flat[idx] = orig - h
            lm = f()
            flat[idx] = orig
            errs.append(_rel(analytic[ai].reshape(-1)[idx], (lp - lm) / (2 * h)))
        worst = max(worst, min(errs))
    return worst


def _small_camera(size=8):
    return Camera(10.0, 10.0, size / 2, size / 2, np.eye(3),
                  np.array([0.0, 0.0, 4.0]), size, size)


def check_renderer(seed):
    rng = np.random.default_rng(seed)
    n, size = 5, 8
    gset = GaussianSet(
        rng.normal(0, 0.6, (n, 3)),
        rng.uniform(0.2, 0.9, n),
        np.array([[1.0, 0, 0, 0]] * n) + rng.normal(0, 0.2, (n, 4)),
        np.exp(rng.uniform(-1.5, -0.5, (n, 3))),
        rng.uniform(0.05, 0.95, (n, 3)))
    cam = _small_camera(size)
    target = rng.random((size, size, 3))

    def f():
        out = rasterize(gset, cam)
        return float(np.abs(out.rgb - target).sum())

    out = rasterize(gset, cam)
    d_rgb = np.sign(out.rgb - target)
    g = rasterize_backward(out, d_rgb)
    arrays = [gset.p, gset.o, gset.q, gset.s, gset.c]
    analytic = [g["p"], g["o"], g["q"], g["s"], g["c"]]
    coords = [(ai, i) for ai, arr in enumerate(arrays)
              for i in range(arr.size)]
    return _max_err(f, arrays, coords, analytic, hs=(1e-5, 1e-6))


def check_covariance(seed):
    rng = np.random.default_rng(seed)
    q = rng.normal(0, 1, (6, 4))
    s = np.exp(rng.uniform(-1, 0.5, (6, 3)))
    a = rng.normal(0, 1, (6, 3, 3))

    def f():
        return float(np.sum(a * covariance3d(q, s)))

    dq, ds = covariance3d_backward(q, s, a)
    arrays, analytic = [q, s], [dq, ds]
    coords = [(ai, i) for ai, arr in enumerate(arrays) for i in range(arr.size)]
    return _max_err(f, arrays, coords, analytic, hs=(1e-5, 1e-6))


def check_pose(seed):
    rng = np.random.default_rng(seed)
    tpl = build_template(n_vertices=40, seed=seed)
    theta = rng.uniform(-0.8, 0.8, (tpl.n_joints, 3))
    beta = rng.normal(0, 0.2, 10)
    t = rng.normal(0, 0.3, 3)
    offsets = rng.normal(0, 0.02, (40, 3))
    g = rng.normal(0, 1, (40, 3))

    def f():
        state = PoseState(theta.copy(), beta, t)
        v, _ = pose(tpl, state, offsets)
        return float(np.sum(g * v)) + laplacian_energy(v, tpl.neighbors)

    state = PoseState(theta.copy(), beta, t)
    v, cache = pose(tpl, state, offsets)
    d_v = g + laplacian_energy_backward(v, tpl.neighbors)
    pg = pose_backward(cache, d_v)
    arrays = [theta, beta, t, offsets]
    analytic = [pg["theta"], pg["beta"], pg["t"], pg["offsets"]]
    coords = [(ai, i) for ai, arr in enumerate(arrays) for i in range(arr.size)]
    return _max_err(f, arrays, coords, analytic, hs=(1e-5, 1e-6))


def check_avatar(seed, n_sample=24):
    rng = np.random.default_rng(seed)
    tpl = build_template(n_vertices=24, seed=seed)
    net = AvatarNet(tpl, seed=seed)
    state = PoseState(rng.uniform(-0.5, 0.5, (tpl.n_joints, 3)),
                      rng.normal(0, 0.1, 10), rng.normal(0, 0.1, 3))
    n = tpl.n_vertices
    gp = {k: rng.normal(0, 1, shape) for k, shape in
          [("p", (n, 3)), ("o", (n,)), ("q", (n, 4)), ("s", (n, 3)),
           ("c", (n, 3)), ("xi", (n,)), ("pooled_tex", (64,))]}

    def f():
        gset, aux = net.forward(state)
        return float(sum(np.sum(gp[k] * v) for k, v in
                         [("p", gset.p), ("o", gset.o), ("q", gset.q),
                          ("s", gset.s), ("c", gset.c), ("xi", aux["xi"]),
                          ("pooled_tex", aux["pooled_tex"])]))

    gset, aux = net.forward(state)
    grads = net.backward(aux, gp)
    params = net.param_dict()
    names = sorted(params)
    worst = 0.0
    for _ in range(n_sample):
        name = names[rng.integers(len(names))]
        idx = int(rng.integers(params[name].size))
        worst = max(worst, _max_err(f, [params[name]], [(0, idx)],
                                    [grads[name]], hs=(1e-4, 1e-5)))
    return worst


def check_dpd(seed, n_sample=120):
    rng = np.random.default_rng(seed)
    net = DpdNet(n_frames=12, seed=seed)
    g_flat = rng.normal(0, 0.5, (6, 14))
    frame = int(rng.integers(1, 13))
    gw = rng.normal(0, 1, (6, 14))

    def f():
        fb = net.frame_bias(frame, g_flat, training=False)
        return float(np.sum(gw * fb.bias.to_flat()))

    fb = net.frame_bias(frame, g_flat, training=False)
    pgrads, d_g = net.backward(fb, gw)
    params = net.param_dict()
    names = sorted(params)
    worst = 0.0
    for _ in range(n_sample):
        name = names[rng.integers(len(names))]
        idx = int(rng.integers(params[name].size))
        worst = max(worst, _max_err(f, [params[name]], [(0, idx)],
                                    [pgrads[name]], hs=(1e-5, 1e-6)))
    # attribute-input path
    worst = max(worst, _max_err(f, [g_flat],
                                [(0, int(rng.integers(g_flat.size)))
                                 for _ in range(10)],
                                [d_g], hs=(1e-5, 1e-6)))
    return worst


def check_pao(seed):
    rng = np.random.default_rng(seed)
    h = w = 12
    frame = rng.random((h, w, 3))
    render = 0.7 * frame + 0.3 * rng.random((h, w, 3))
    y_h = np.zeros((h, w), bool)
    y_h[3:9, 3:9] = True
    occ = np.zeros((h, w), bool)
    occ[5:7, 5:7] = True
    regions = pao.regions_from_masks(y_h, occ)
    dw = rng.random((h, w))
    params = pao.PaoParams()
    omega = float(rng.uniform(0, 0.8))

    def f():
        wm = pao.build_mask(frame, render, regions, y_h, omega, params)
        return float(np.sum(wm.w * dw))

    wm = pao.build_mask(frame, render, regions, y_h, omega, params)
    g = pao.mask_backward(wm, dw)
    arrays = [params.t_err, params.t_mu, params.t_bg]
    analytic = [g["pao.t_err"], g["pao.t_mu"], g["pao.t_bg"]]
    return _max_err(f, arrays, [(0, 0), (1, 0), (2, 0)], analytic,
                    hs=(1e-5, 1e-6))


def check_losses(seed):
    rng = np.random.default_rng(seed)
    frame = rng.random((10, 10, 3))
    render = rng.random((10, 10, 3))
    w = rng.random((10, 10))
    delta = rng.normal(0, 0.3, (8, 14))
    xi = rng.uniform(0.1, 0.9, 8)
    o = rng.uniform(0.1, 0.9, 8)
    weights = losses.LossWeights()
    pa = rng.normal(0, 1, 16)
    pb = rng.normal(0, 1, 16)

    def f():
        l1, _ = losses.reconstruction_loss(frame, render, w)
        t, _ = losses.regularizers(delta, xi, o, 0.0, w, weights)
        lc, _, _ = losses.cross_consistency(pa, pb)
        return l1 + sum(t.values()) + weights.lam_cross * lc

    _, d_render = losses.reconstruction_loss(frame, render, w)
    _, rg = losses.regularizers(delta, xi, o, 0.0, w, weights)
    _, da, db = losses.cross_consistency(pa, pb)
    arrays = [render, delta, xi, o, pa, pb]
    analytic = [d_render, rg["d_delta"], rg["d_xi"], rg["d_o"],
                weights.lam_cross * da, weights.lam_cross * db]
    rngc = np.random.default_rng(seed + 1)
    coords = [(ai, int(rngc.integers(arrays[ai].size)))
              for ai in range(len(arrays)) for _ in range(8)]
    return _max_err(f, arrays, coords, analytic, hs=(1e-6, 1e-7))


CHECKS = [
    ("renderer", check_renderer, TOL_RENDER),
    ("covariance", check_covariance, TOL_RENDER),
    ("pose", check_pose, TOL_RENDER),
    ("avatar", check_avatar, TOL_MLP),
    ("dpd", check_dpd, TOL_MLP),
    ("pao-thresholds", check_pao, TOL_MLP),
    ("loss-terms", check_losses, TOL_MLP),
]


def run_gradchecks(seed=0, n_seeds=10, verbose=False):
    """Run every check over n_seeds instances; returns
    [(name, max rel err, tolerance)]."""
    results = []
    for name, fn, tol in CHECKS:
        worst = max(fn(seed + k) for k in range(n_seeds))
        results.append((name, worst, tol))
        if verbose:
            flag = "ok" if worst < tol else "FAIL"
            print(f"{name:16s} max rel err {worst:.3e}  (tol {tol:g})  {flag}")
    return results
