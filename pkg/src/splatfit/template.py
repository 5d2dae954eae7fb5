"""Procedural articulated template: an ellipsoid body with a skinned chain
appendage, linear blend skinning with analytic gradients, a neighbor-graph
Laplacian energy, and silhouette extraction from rendered alpha.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from . import wgt
from .renderer import rasterize

N_SHAPE = 10


@dataclass
class PoseState:
    """Articulated pose: per-joint axis-angle, shape coefficients, global
    translation.  Angles are wrapped to (-pi, pi] per component."""
    theta: np.ndarray        # (J, 3)
    beta: np.ndarray         # (10,)
    t: np.ndarray            # (3,)

    def __post_init__(self):
        self.theta = np.asarray(self.theta, dtype=np.float64)
        self.beta = np.asarray(self.beta, dtype=np.float64)
        self.t = np.asarray(self.t, dtype=np.float64)
        if not (np.all(np.isfinite(self.theta)) and np.all(np.isfinite(self.beta))
                and np.all(np.isfinite(self.t))):
            raise ValueError("non-finite pose state")
        self.theta = np.mod(self.theta - np.pi, -2 * np.pi) + np.pi

    @classmethod
    def identity(cls, n_joints):
        return cls(np.zeros((n_joints, 3)), np.zeros(N_SHAPE), np.zeros(3))

    def to_vector(self):
        return np.concatenate([self.theta.ravel(), self.beta, self.t])

    @classmethod
    def from_vector(cls, vec, n_joints):
        vec = np.asarray(vec, dtype=np.float64)
        j3 = n_joints * 3
        return cls(vec[:j3].reshape(n_joints, 3), vec[j3:j3 + N_SHAPE], vec[j3 + N_SHAPE:])

    @classmethod
    def vector_dim(cls, n_joints):
        return n_joints * 3 + N_SHAPE + 3


@dataclass
class Template:
    rest_vertices: np.ndarray   # (N, 3)
    joint_parent: np.ndarray    # (J,), -1 for the root
    joint_pivots: np.ndarray    # (J, 3) rest pivot positions
    skin_weights: np.ndarray    # (N, J), rows sum to 1
    neighbors: np.ndarray       # (N, k) symmetric-by-construction k-NN graph
    shape_dirs: np.ndarray      # (N, 3, 10) orthonormal blend fields

    @property
    def n_vertices(self):
        return self.rest_vertices.shape[0]

    @property
    def n_joints(self):
        return self.joint_pivots.shape[0]

    @property
    def mean_edge_length(self):
        d = self.rest_vertices[:, None, :] - self.rest_vertices[self.neighbors]
        return float(np.linalg.norm(d, axis=-1).mean())

    @property
    def bbox_diagonal(self):
        ext = self.rest_vertices.max(axis=0) - self.rest_vertices.min(axis=0)
        return float(np.linalg.norm(ext))

    def save(self, path, sidecar_path=None):
        wgt.write_archive(path, {
            "rest_vertices": self.rest_vertices,
            "skin_weights": self.skin_weights,
            "shape_dirs": self.shape_dirs.reshape(self.n_vertices, -1),
            "joint_pivots": self.joint_pivots,
        })
        sidecar = sidecar_path or (str(path) + ".json")
        with open(sidecar, "w") as fh:
            json.dump({"joint_parent": self.joint_parent.tolist(),
                       "neighbors": self.neighbors.tolist()}, fh)

    @classmethod
    def load(cls, path, sidecar_path=None):
        tensors, _ = wgt.read_archive(path)
        sidecar = sidecar_path or (str(path) + ".json")
        with open(sidecar) as fh:
            side = json.load(fh)
        n = tensors["rest_vertices"].shape[0]
        return cls(tensors["rest_vertices"].astype(np.float64),
                   np.array(side["joint_parent"], dtype=int),
                   tensors["joint_pivots"].astype(np.float64),
                   tensors["skin_weights"].astype(np.float64),
                   np.array(side["neighbors"], dtype=int),
                   tensors["shape_dirs"].astype(np.float64).reshape(n, 3, N_SHAPE))


# ---------------------------------------------------------------------------
# procedural template generation

def _fibonacci_sphere(n, rng):
    i = np.arange(n) + 0.5
    phi = np.arccos(1 - 2 * i / n)
    theta = np.pi * (1 + 5 ** 0.5) * i
    pts = np.stack([np.cos(theta) * np.sin(phi),
                    np.sin(theta) * np.sin(phi),
                    np.cos(phi)], axis=-1)
    return pts + rng.normal(0, 0.01, pts.shape)


def build_template(n_vertices=512, n_joints=6, k_neighbors=6, seed=0) -> Template:
    """Ellipsoid body plus a tapered, articulated chain appendage.

    The chain (n_joints-1 segments off a root joint) bends enough to
    self-occlude the body, which is all the fitting pipeline needs from the
    geometry.
    """
    rng = np.random.default_rng(seed)
    n_chain = max(n_joints - 1, 1)
    n_body = int(n_vertices * 0.6)
    n_tube = n_vertices - n_body

    body = _fibonacci_sphere(n_body, rng) * np.array([0.5, 0.35, 0.18])

    seg_len = 0.22
    x0 = 0.45
    i = np.arange(n_tube)
    frac = (i + 0.5) / n_tube
    x = x0 + frac * seg_len * n_chain
    ang = 2 * np.pi * ((i * 0.61803398875) % 1.0)
    radius = 0.12 - 0.06 * frac
    tube = np.stack([x, radius * np.cos(ang), radius * np.sin(ang)], axis=-1)
    tube += rng.normal(0, 0.004, tube.shape)

    verts = np.concatenate([body, tube], axis=0)

    parents = np.full(n_joints, -1, dtype=int)
    parents[1:] = np.arange(n_joints - 1)
    pivots = np.zeros((n_joints, 3))
    pivots[1:, 0] = x0 + seg_len * np.arange(n_chain)

    # skinning: body rides the root; tube vertices blend between the two
    # nearest chain joints along x
    weights = np.zeros((n_vertices, n_joints))
    weights[:n_body, 0] = 1.0
    for vi in range(n_tube):
        xv = tube[vi, 0]
        u = (xv - x0) / seg_len          # segment-space coordinate
        j = int(np.clip(np.floor(u), 0, n_chain - 1)) + 1
        frac_j = np.clip(u - (j - 1), 0.0, 1.0)
        blend = np.clip((frac_j - 0.7) / 0.3, 0.0, 1.0) if j < n_joints - 1 else 0.0
        weights[n_body + vi, j] = 1.0 - blend
        if j < n_joints - 1:
            weights[n_body + vi, j + 1] = blend
    weights /= weights.sum(axis=1, keepdims=True)

    d2 = np.sum((verts[:, None] - verts[None, :]) ** 2, axis=-1)
    np.fill_diagonal(d2, np.inf)
    neighbors = np.argsort(d2, axis=1)[:, :k_neighbors]

    raw = rng.normal(size=(3 * n_vertices, N_SHAPE))
    qmat, _ = np.linalg.qr(raw)
    shape_dirs = qmat.reshape(n_vertices, 3, N_SHAPE)

    return Template(verts, parents, pivots, weights, neighbors, shape_dirs)


# ---------------------------------------------------------------------------
# rotations

def _axis_angle_to_matrix(theta):
    """(J,3) axis-angle -> (J,3,3) via Rodrigues."""
    theta = np.atleast_2d(theta)
    phi = np.linalg.norm(theta, axis=-1)
    small = phi < 1e-8
    phi_safe = np.where(small, 1.0, phi)
    k = theta / phi_safe[:, None]
    kx = np.zeros((theta.shape[0], 3, 3))
    kx[:, 0, 1], kx[:, 0, 2] = -k[:, 2], k[:, 1]
    kx[:, 1, 0], kx[:, 1, 2] = k[:, 2], -k[:, 0]
    kx[:, 2, 0], kx[:, 2, 1] = -k[:, 1], k[:, 0]
    sin, cos = np.sin(phi), np.cos(phi)
    eye = np.eye(3)[None]
    rot = eye + sin[:, None, None] * kx + (1 - cos)[:, None, None] * (kx @ kx)
    # first-order fallback at the origin
    tx = np.zeros_like(kx)
    tx[:, 0, 1], tx[:, 0, 2] = -theta[:, 2], theta[:, 1]
    tx[:, 1, 0], tx[:, 1, 2] = theta[:, 2], -theta[:, 0]
    tx[:, 2, 0], tx[:, 2, 1] = -theta[:, 1], theta[:, 0]
    rot = np.where(small[:, None, None], eye + tx, rot)
    return rot


def _axis_angle_backward(theta, rot, d_rot):
    """Gradient of sum(d_rot * R(theta)) w.r.t. theta (Gallego-Yezzi form)."""
    theta = np.atleast_2d(theta)
    phi2 = np.sum(theta * theta, axis=-1)
    small = phi2 < 1e-16
    out = np.zeros_like(theta)
    eye = np.eye(3)
    for idx in range(theta.shape[0]):
        g = d_rot[idx]
        if small[idx]:
            # dR/dtheta_i ~ [e_i]x at the origin
            out[idx] = np.array([g[2, 1] - g[1, 2],
                                 g[0, 2] - g[2, 0],
                                 g[1, 0] - g[0, 1]])
            continue
        v = theta[idx]
        r = rot[idx]
        for i in range(3):
            e = eye[i]
            w = v[i] * v + np.cross(v, (eye - r) @ e)
            wx = np.array([[0, -w[2], w[1]], [w[2], 0, -w[0]], [-w[1], w[0], 0]])
            d_r_i = (wx / phi2[idx]) @ r
            out[idx, i] = np.sum(g * d_r_i)
    return out


# ---------------------------------------------------------------------------
# posing

def _joint_transforms(template: Template, theta):
    """Per-joint world affine transforms (R, t) from local axis-angle."""
    rot_local = _axis_angle_to_matrix(theta)
    j = template.n_joints
    rots = np.zeros((j, 3, 3))
    trans = np.zeros((j, 3))
    for jj in range(j):
        piv = template.joint_pivots[jj]
        r_l = rot_local[jj]
        t_l = piv - r_l @ piv
        par = template.joint_parent[jj]
        if par < 0:
            rots[jj], trans[jj] = r_l, t_l
        else:
            rots[jj] = rots[par] @ r_l
            trans[jj] = rots[par] @ t_l + trans[par]
    return rots, trans, rot_local


def pose(template: Template, state: PoseState, offsets=None):
    """Posed vertices V = LBS(shaped rest vertices + offsets, theta) + t.

    Returns (V, cache); the cache feeds pose_backward.
    """
    n = template.n_vertices
    if offsets is None:
        offsets = np.zeros((n, 3))
    offsets = np.asarray(offsets, dtype=np.float64)
    if offsets.shape != (n, 3):
        raise ValueError(f"offsets shape {offsets.shape} != ({n}, 3)")
    scale = 1.0 + template.shape_dirs @ state.beta          # (N,3)
    base = template.rest_vertices * scale + offsets
    rots, trans, rot_local = _joint_transforms(template, state.theta)
    w = template.skin_weights
    blended_r = np.einsum("nj,jab->nab", w, rots)           # (N,3,3)
    blended_t = w @ trans                                   # (N,3)
    v = np.einsum("nab,nb->na", blended_r, base) + blended_t + state.t
    cache = {"template": template, "state": state, "base": base,
             "scale": scale, "rots": rots, "trans": trans,
             "rot_local": rot_local, "blended_r": blended_r}
    return v, cache


def pose_backward(cache, d_v):
    """Gradients of sum(d_v * V) w.r.t. theta, beta, t and offsets."""
    template = cache["template"]
    state = cache["state"]
    w = template.skin_weights
    base = cache["base"]
    rots, trans = cache["rots"], cache["trans"]
    d_v = np.asarray(d_v, dtype=np.float64)

    d_t_global = d_v.sum(axis=0)
    # per-joint world-transform grads
    wd = w[:, :, None] * d_v[:, None, :]                    # (N,J,3)
    d_rots = np.einsum("nja,nb->jab", wd, base)             # (J,3,3)
    d_trans = wd.sum(axis=0)                                # (J,3)
    d_base = np.einsum("nj,jab,na->nb", w, rots, d_v)

    # walk the hierarchy leaves-first: A_j = A_par * L_j
    j = template.n_joints
    d_rot_local = np.zeros((j, 3, 3))
    d_rots = d_rots.copy()
    d_trans = d_trans.copy()
    for jj in reversed(range(j)):
        par = template.joint_parent[jj]
        piv = template.joint_pivots[jj]
        r_l = cache["rot_local"][jj]
        t_l = piv - r_l @ piv
        if par < 0:
            r_par = np.eye(3)
        else:
            r_par = rots[par]
            d_rots[par] += d_rots[jj] @ r_l.T + np.outer(d_trans[jj], t_l)
            d_trans[par] += d_trans[jj]
        d_l_rot = r_par.T @ d_rots[jj]
        d_l_trans = r_par.T @ d_trans[jj]
        # t_l = piv - R_l piv couples the local translation back into R_l
        d_rot_local[jj] = d_l_rot - np.outer(d_l_trans, piv)
    d_theta = _axis_angle_backward(state.theta, cache["rot_local"], d_rot_local)

    d_offsets = d_base
    d_scale = d_base * template.rest_vertices
    d_beta = np.einsum("na,nak->k", d_scale, template.shape_dirs)
    return {"theta": d_theta, "beta": d_beta, "t": d_t_global,
            "offsets": d_offsets}


# ---------------------------------------------------------------------------
# Laplacian energy

def laplacian_energy(v, neighbors):
    """Mean squared distance of each vertex to its neighbor centroid."""
    v = np.asarray(v, dtype=np.float64)
    diff = v - v[neighbors].mean(axis=1)
    return float(np.sum(diff * diff) / v.shape[0])


def laplacian_energy_backward(v, neighbors):
    """d energy / d V for laplacian_energy."""
    v = np.asarray(v, dtype=np.float64)
    n, k = neighbors.shape
    diff = v - v[neighbors].mean(axis=1)
    grad = 2.0 * diff / n
    # each vertex also appears in the neighbor centroids of other vertices
    back = np.zeros_like(v)
    for j in range(k):
        np.add.at(back, neighbors[:, j], -grad / k)
    return grad + back


def silhouette(gset, cam, threshold=0.5):
    """Binary target mask from rendered alpha; empty scenes give all zeros."""
    out = rasterize(gset, cam)
    return out.alpha > threshold
