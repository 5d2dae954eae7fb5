"""Gaussian splat attributes, additive attribute biases, and covariance
construction from rotation quaternions and anisotropic scales.

Attribute layout used everywhere a flattened per-splat vector is needed:
[p(3), o(1), q(4), s(3), c(3)] -> 14 entries.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import wgt

ATTR_DIM = 14
SCALE_FLOOR = 1e-6


@dataclass
class Gaussian:
    """One splat: position, opacity, unit rotation quaternion (w,x,y,z),
    positive scales, RGB color in [0,1]."""
    p: np.ndarray
    o: float
    q: np.ndarray
    s: np.ndarray
    c: np.ndarray


@dataclass
class AttributeBias:
    dp: np.ndarray
    do: np.ndarray
    dq: np.ndarray
    ds: np.ndarray
    dc: np.ndarray

    @classmethod
    def zeros(cls, n):
        return cls(np.zeros((n, 3)), np.zeros(n), np.zeros((n, 4)),
                   np.zeros((n, 3)), np.zeros((n, 3)))

    @classmethod
    def from_flat(cls, raw):
        raw = np.atleast_2d(np.asarray(raw, dtype=np.float64))
        return cls(raw[:, 0:3], raw[:, 3], raw[:, 4:8], raw[:, 8:11], raw[:, 11:14])

    def to_flat(self):
        return np.concatenate(
            [self.dp, self.do[:, None], self.dq, self.ds, self.dc], axis=1)


@dataclass
class GaussianSet:
    """Struct-of-arrays splat collection; one splat per template vertex."""
    p: np.ndarray            # (N, 3)
    o: np.ndarray            # (N,)
    q: np.ndarray            # (N, 4)
    s: np.ndarray            # (N, 3)
    c: np.ndarray            # (N, 3)
    vertex_idx: np.ndarray = field(default=None)  # (N,) int

    def __post_init__(self):
        if self.vertex_idx is None:
            self.vertex_idx = np.arange(len(self.o))

    def __len__(self):
        return int(self.o.shape[0])

    def to_flat(self):
        return np.concatenate(
            [self.p, self.o[:, None], self.q, self.s, self.c], axis=1)

    @classmethod
    def from_flat(cls, raw, vertex_idx=None):
        raw = np.asarray(raw, dtype=np.float64)
        return cls(raw[:, 0:3].copy(), raw[:, 3].copy(), raw[:, 4:8].copy(),
                   raw[:, 8:11].copy(), raw[:, 11:14].copy(), vertex_idx)

    def save(self, path):
        wgt.write_archive(path, {
            "p": self.p, "o": self.o, "q": self.q, "s": self.s, "c": self.c,
            "vertex_idx": self.vertex_idx.astype(np.float64),
        })

    @classmethod
    def load(cls, path):
        t, _ = wgt.read_archive(path)
        return cls(t["p"].astype(np.float64), t["o"].astype(np.float64),
                   t["q"].astype(np.float64), t["s"].astype(np.float64),
                   t["c"].astype(np.float64),
                   np.round(t["vertex_idx"]).astype(int))


# ---------------------------------------------------------------------------
# quaternion helpers (batched, (N,4) with scalar-first convention)

def quat_normalize(q):
    q = np.atleast_2d(np.asarray(q, dtype=np.float64))
    norm = np.linalg.norm(q, axis=-1, keepdims=True)
    if np.any(norm < 1e-12):
        raise ValueError("zero-norm quaternion")
    return q / norm


def quat_normalize_backward(q_raw, d_unit):
    """Chain an upstream gradient on the unit quaternion back to the raw one."""
    q_raw = np.atleast_2d(np.asarray(q_raw, dtype=np.float64))
    d_unit = np.atleast_2d(np.asarray(d_unit, dtype=np.float64))
    norm = np.linalg.norm(q_raw, axis=-1, keepdims=True)
    u = q_raw / norm
    return (d_unit - u * np.sum(u * d_unit, axis=-1, keepdims=True)) / norm


def quat_to_rotmat(q_unit):
    """(N,4) unit quaternions -> (N,3,3) rotation matrices."""
    w, x, y, z = q_unit[:, 0], q_unit[:, 1], q_unit[:, 2], q_unit[:, 3]
    rot = np.empty((q_unit.shape[0], 3, 3))
    rot[:, 0, 0] = 1 - 2 * (y * y + z * z)
    rot[:, 0, 1] = 2 * (x * y - w * z)
    rot[:, 0, 2] = 2 * (x * z + w * y)
    rot[:, 1, 0] = 2 * (x * y + w * z)
    rot[:, 1, 1] = 1 - 2 * (x * x + z * z)
    rot[:, 1, 2] = 2 * (y * z - w * x)
    rot[:, 2, 0] = 2 * (x * z - w * y)
    rot[:, 2, 1] = 2 * (y * z + w * x)
    rot[:, 2, 2] = 1 - 2 * (x * x + y * y)
    return rot


def quat_rotmat_backward(q_unit, d_rot):
    """Gradient of sum(d_rot * R(q)) w.r.t. the unit quaternion, (N,4)."""
    w, x, y, z = q_unit[:, 0], q_unit[:, 1], q_unit[:, 2], q_unit[:, 3]
    g = d_rot
    dw = 2 * (-z * g[:, 0, 1] + y * g[:, 0, 2]
              + z * g[:, 1, 0] - x * g[:, 1, 2]
              - y * g[:, 2, 0] + x * g[:, 2, 1])
    dx = 2 * (y * g[:, 0, 1] + z * g[:, 0, 2]
              + y * g[:, 1, 0] - 2 * x * g[:, 1, 1] - w * g[:, 1, 2]
              + z * g[:, 2, 0] + w * g[:, 2, 1] - 2 * x * g[:, 2, 2])
    dy = 2 * (-2 * y * g[:, 0, 0] + x * g[:, 0, 1] + w * g[:, 0, 2]
              + x * g[:, 1, 0] + z * g[:, 1, 2]
              - w * g[:, 2, 0] + z * g[:, 2, 1] - 2 * y * g[:, 2, 2])
    dz = 2 * (-2 * z * g[:, 0, 0] - w * g[:, 0, 1] + x * g[:, 0, 2]
              + w * g[:, 1, 0] - 2 * z * g[:, 1, 1] + y * g[:, 1, 2]
              + x * g[:, 2, 0] + y * g[:, 2, 1])
    return np.stack([dw, dx, dy, dz], axis=-1)


# ---------------------------------------------------------------------------
# bias application

def apply_bias_set(gset: GaussianSet, bias: AttributeBias):
    """Componentwise g + delta with validity repair: q renormalized, o and c
    clamped to [0,1], s floored at 1e-6.  Returns (biased set, cache)."""
    p = gset.p + bias.dp
    o_raw = gset.o + bias.do
    q_raw = gset.q + bias.dq
    s_raw = gset.s + bias.ds
    c_raw = gset.c + bias.dc
    out = GaussianSet(
        p=p,
        o=np.clip(o_raw, 0.0, 1.0),
        q=quat_normalize(q_raw),
        s=np.maximum(s_raw, SCALE_FLOOR),
        c=np.clip(c_raw, 0.0, 1.0),
        vertex_idx=gset.vertex_idx,
    )
    cache = {
        "o_mask": (o_raw > 0.0) & (o_raw < 1.0),
        "s_mask": s_raw > SCALE_FLOOR,
        "c_mask": (c_raw > 0.0) & (c_raw < 1.0),
        "q_raw": q_raw,
    }
    return out, cache


def apply_bias_backward(cache, dp, do, dq, ds, dc):
    """Gradients on the biased attributes -> gradients on the pre-bias sum.

    The same gradient applies to g and to delta (both enter additively);
    clamped components get zero gradient, the quaternion chains through
    its renormalization.
    """
    return {
        "p": np.asarray(dp, dtype=np.float64),
        "o": np.where(cache["o_mask"], do, 0.0),
        "q": quat_normalize_backward(cache["q_raw"], dq),
        "s": np.where(cache["s_mask"], ds, 0.0),
        "c": np.where(cache["c_mask"], dc, 0.0),
    }


def apply_bias(g: Gaussian, bias: AttributeBias) -> Gaussian:
    """Single-splat convenience wrapper over apply_bias_set."""
    gset = GaussianSet(g.p[None], np.array([g.o]), g.q[None], g.s[None], g.c[None])
    out, _ = apply_bias_set(gset, bias)
    return Gaussian(out.p[0], float(out.o[0]), out.q[0], out.s[0], out.c[0])


# ---------------------------------------------------------------------------
# 3D covariance

def covariance3d(q, s):
    """Sigma = R(q) diag(s^2) R(q)^T for one splat or a batch.

    q is normalized internally (zero norm is an error); s must be positive.
    """
    single = np.asarray(q).ndim == 1
    q = np.atleast_2d(np.asarray(q, dtype=np.float64))
    s = np.atleast_2d(np.asarray(s, dtype=np.float64))
    q_unit = quat_normalize(q)
    rot = quat_to_rotmat(q_unit)
    sig = np.einsum("nij,nj,nkj->nik", rot, s * s, rot)
    return sig[0] if single else sig


def covariance3d_backward(q, s, d_sigma):
    """Gradients of sum(d_sigma * Sigma) w.r.t. the raw q and s."""
    q = np.atleast_2d(np.asarray(q, dtype=np.float64))
    s = np.atleast_2d(np.asarray(s, dtype=np.float64))
    single = np.asarray(d_sigma).ndim == 2
    d_sigma = np.asarray(d_sigma, dtype=np.float64).reshape(-1, 3, 3)
    q_unit = quat_normalize(q)
    rot = quat_to_rotmat(q_unit)
    # Sigma = R D R^T, D = diag(s^2)
    d_diag = np.einsum("nji,njk,nkl->nil", rot, d_sigma, rot)  # R^T dS R
    ds = 2.0 * s * np.stack([d_diag[:, 0, 0], d_diag[:, 1, 1], d_diag[:, 2, 2]], axis=-1)
    d2 = s * s
    d_rot = (np.einsum("nij,njk,nk->nik", d_sigma, rot, d2)
             + np.einsum("nji,njk,nk->nik", d_sigma, rot, d2))
    dq_unit = quat_rotmat_backward(q_unit, d_rot)
    dq = quat_normalize_backward(q, dq_unit)
    if single:
        return dq[0], ds[0]
    return dq, ds
