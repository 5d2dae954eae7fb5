"""Per-scene prediction network: a per-vertex identity latent table plus
four MLP heads producing splat attributes, shadow coefficients, template
offsets, and pose refinements.

Head output parameterizations keep attributes valid with live gradients:
opacity and color via sigmoid, scales via gained exp, rotation via a
normalized near-identity quaternion.  The network trains from scratch.
"""

from __future__ import annotations

import numpy as np

from .gaussians import GaussianSet, quat_normalize, quat_normalize_backward
from .nn import Mlp, positional_encode, encoded_width
from .template import PoseState, Template, pose, pose_backward

LATENT_DIM = 33
FEATURE_DIM = 64
VERTEX_ENC_K = 4
POSE_GAIN = 0.01
QUAT_GAIN = 0.1


class AvatarNet:
    """Identity latents + feature extractors + four prediction heads."""

    def __init__(self, template: Template, seed=0):
        self.template = template
        rng = np.random.default_rng(seed)
        n = template.n_vertices
        self.pose_dim = PoseState.vector_dim(template.n_joints)
        self.enc_period = 2.0 * template.bbox_diagonal
        self.enc_width = encoded_width(3, VERTEX_ENC_K)
        edge = template.mean_edge_length
        self.scale_gain = 0.01 * edge
        self.dp_gain = 0.1 * edge
        self.offset_gain = 0.1 * edge

        self.latents = rng.normal(0, 0.1, (n, LATENT_DIM))
        self.mlp_geom = Mlp([2 * self.enc_width, FEATURE_DIM, FEATURE_DIM],
                            ["relu", "identity"], rng)
        self.mlp_tex = Mlp([LATENT_DIM, FEATURE_DIM, FEATURE_DIM],
                           ["relu", "identity"], rng)
        self.head_attr = Mlp([2 * FEATURE_DIM, 64, 64, 14],
                             ["relu", "relu", "identity"], rng)
        self.head_shadow = Mlp([FEATURE_DIM, 64, 64, 1],
                               ["relu", "relu", "sigmoid"], rng)
        self.head_offset = Mlp([FEATURE_DIM + self.enc_width, 64, 64, 3],
                               ["relu", "relu", "identity"], rng)
        self.head_pose = Mlp([2 * FEATURE_DIM, 64, 64, self.pose_dim],
                             ["relu", "relu", "identity"], rng)
        # output-bias seeding so the very first renders cover the target:
        # opacity starts near 0.88, scales near half the vertex spacing,
        # shadow coefficient near 1 (where its regularizer pulls it anyway)
        self.head_attr.biases[-1][3] = 2.0
        self.head_attr.biases[-1][8:11] = np.log(50.0)
        self.head_shadow.biases[-1][0] = 2.0
        self._enc_rest = positional_encode(template.rest_vertices,
                                           VERTEX_ENC_K, self.enc_period)

    @property
    def n_params(self):
        return (self.latents.size + self.mlp_geom.n_params + self.mlp_tex.n_params
                + self.head_attr.n_params + self.head_shadow.n_params
                + self.head_offset.n_params + self.head_pose.n_params)

    def param_dict(self, prefix="avatar"):
        out = {f"{prefix}.latents": self.latents}
        for name, mlp in self._mlps():
            out.update(dict(mlp.param_items(f"{prefix}.{name}")))
        return out

    def _mlps(self):
        return [("geom", self.mlp_geom), ("tex", self.mlp_tex),
                ("attr", self.head_attr), ("shadow", self.head_shadow),
                ("offset", self.head_offset), ("pose", self.head_pose)]

    # -- forward ------------------------------------------------------------

    def extract_features(self, v_posed):
        """Geometry features from posed+rest vertex encodings, texture
        features from the latent rows."""
        enc_v = positional_encode(v_posed, VERTEX_ENC_K, self.enc_period)
        x_g = self.mlp_geom(np.concatenate([enc_v, self._enc_rest], axis=1))
        x_t = self.mlp_tex(self.latents)
        return x_g, x_t

    def forward(self, pose_state: PoseState):
        """Full prediction pass for one frame; returns (GaussianSet, aux).

        aux carries the shadow coefficients, offsets, pose refinement and
        every intermediate needed by backward().
        """
        v0, _ = pose(self.template, pose_state)
        x_g, x_t = self.extract_features(v0)
        gset, aux = self.predict(x_g, x_t, pose_state)
        aux["v0"] = v0
        return gset, aux

    def predict(self, x_g, x_t, pose_state: PoseState):
        """Run the four heads on precomputed features."""
        off_raw = self.head_offset(np.concatenate([x_t, self._enc_rest], axis=1))
        offsets = self.offset_gain * off_raw

        feat = np.concatenate([x_g, x_t], axis=1)
        pooled = feat.mean(axis=0)
        dh_raw = self.head_pose(pooled)
        dh = POSE_GAIN * dh_raw
        refined = PoseState.from_vector(pose_state.to_vector() + dh,
                                        self.template.n_joints)
        v1, pose_cache = pose(self.template, refined, offsets)

        raw = self.head_attr(feat)
        xi = self.head_shadow(x_g)[:, 0]

        dp_raw, o_raw = raw[:, 0:3], raw[:, 3]
        q_raw, s_raw, c_raw = raw[:, 4:8], raw[:, 8:11], raw[:, 11:14]
        o = 1.0 / (1.0 + np.exp(-o_raw))
        q_pre = QUAT_GAIN * q_raw + np.array([1.0, 0.0, 0.0, 0.0])
        q = quat_normalize(q_pre)
        s = self.scale_gain * np.exp(s_raw)
        c_base = 1.0 / (1.0 + np.exp(-c_raw))
        c = c_base * xi[:, None]
        p = v1 + self.dp_gain * dp_raw

        gset = GaussianSet(p, o, q, s, c)
        aux = {"xi": xi, "offsets": offsets, "dh": dh, "v1": v1,
               "x_g": x_g, "x_t": x_t, "o": o, "q_pre": q_pre, "s": s,
               "c_base": c_base, "pose_cache": pose_cache,
               "pooled_tex": x_t.mean(axis=0)}
        return gset, aux

    # -- backward -----------------------------------------------------------

    def backward(self, aux, grads):
        """Reverse pass for the last forward().

        grads may hold 'p','o','q','s','c' (attribute grads), 'xi'
        (shadow-coefficient grads), 'v1' (extra posed-vertex grads, e.g.
        from the Laplacian term) and 'offsets'.  Returns a parameter grad
        dict matching param_dict().
        """
        n = self.template.n_vertices
        zero3 = np.zeros((n, 3))
        d_p = np.asarray(grads.get("p", zero3), dtype=np.float64)
        d_o = np.asarray(grads.get("o", np.zeros(n)), dtype=np.float64)
        d_q = np.asarray(grads.get("q", np.zeros((n, 4))), dtype=np.float64)
        d_s = np.asarray(grads.get("s", zero3), dtype=np.float64)
        d_c = np.asarray(grads.get("c", zero3), dtype=np.float64)
        d_xi = np.asarray(grads.get("xi", np.zeros(n)), dtype=np.float64).copy()
        d_v1 = np.asarray(grads.get("v1", zero3), dtype=np.float64).copy()
        d_offsets = np.asarray(grads.get("offsets", zero3), dtype=np.float64).copy()

        xi, o, s, c_base = aux["xi"], aux["o"], aux["s"], aux["c_base"]

        d_c_base = d_c * xi[:, None]
        d_xi += np.sum(d_c * c_base, axis=1)
        d_raw = np.empty((n, 14))
        d_raw[:, 0:3] = self.dp_gain * d_p
        d_raw[:, 3] = d_o * o * (1.0 - o)
        d_raw[:, 4:8] = QUAT_GAIN * quat_normalize_backward(aux["q_pre"], d_q)
        d_raw[:, 8:11] = d_s * s
        d_raw[:, 11:14] = d_c_base * c_base * (1.0 - c_base)
        d_v1 += d_p

        out = {}
        dws, dbs, d_feat = self.head_attr.backward(d_raw)
        out.update(dict(self.head_attr.grad_items("avatar.attr", dws, dbs)))
        d_x_g = d_feat[:, :FEATURE_DIM].copy()
        d_x_t = d_feat[:, FEATURE_DIM:].copy()

        dws, dbs, d_in = self.head_shadow.backward(d_xi[:, None])
        out.update(dict(self.head_shadow.grad_items("avatar.shadow", dws, dbs)))
        d_x_g += d_in

        if "pooled_tex" in grads:
            d_x_t += np.asarray(grads["pooled_tex"], dtype=np.float64)[None, :] / n

        pg = pose_backward(aux["pose_cache"], d_v1)
        d_offsets += pg["offsets"]
        d_dh = np.concatenate([pg["theta"].ravel(), pg["beta"], pg["t"]])
        dws, dbs, d_pooled = self.head_pose.backward(POSE_GAIN * d_dh)
        out.update(dict(self.head_pose.grad_items("avatar.pose", dws, dbs)))
        d_x_g += d_pooled[:FEATURE_DIM][None, :] / n
        d_x_t += d_pooled[FEATURE_DIM:][None, :] / n

        dws, dbs, d_in = self.head_offset.backward(self.offset_gain * d_offsets)
        out.update(dict(self.head_offset.grad_items("avatar.offset", dws, dbs)))
        d_x_t += d_in[:, :FEATURE_DIM]

        dws, dbs, _ = self.mlp_geom.backward(d_x_g)
        out.update(dict(self.mlp_geom.grad_items("avatar.geom", dws, dbs)))
        dws, dbs, d_latents = self.mlp_tex.backward(d_x_t)
        out.update(dict(self.mlp_tex.grad_items("avatar.tex", dws, dbs)))
        out["avatar.latents"] = d_latents
        return out


def texture_feature_pool(x_t):
    """Mean texture feature over vertices; feeds the cross-entity
    consistency term in two-entity scenes."""
    return np.asarray(x_t, dtype=np.float64).mean(axis=0)
