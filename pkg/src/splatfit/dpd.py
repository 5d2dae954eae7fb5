"""Dynamic perturbation disentanglement: per-frame attribute biases scaled
by a bounded temporal weight, learned during fitting and dropped at
inference.

The module is deliberately tiny (three shallow blocks) so it can only soak
up frame-specific perturbations, never the canonical attributes.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .gaussians import ATTR_DIM, AttributeBias
from .nn import Mlp, positional_encode

TEMPORAL_K = 9
EMBED_DIM = 32
DROPOUT_P = 0.3
BIAS_GAIN = 0.1


@dataclass
class FrameBias:
    frame: int
    omega: float             # effective weight (0 when dropout fired)
    bias: AttributeBias
    dropped: bool
    cache: dict = None


class DpdNet:
    """Temporal encoder + bias head + weight head."""

    def __init__(self, n_frames: int, seed=0):
        self.n_frames = int(n_frames)
        rng = np.random.default_rng(seed)
        enc_w = 2 * (TEMPORAL_K + 1)
        self.encoder = Mlp([enc_w, EMBED_DIM], ["tanh"], rng)
        self.bias_head = Mlp([EMBED_DIM + ATTR_DIM, ATTR_DIM], ["identity"], rng)
        self.weight_head = Mlp([EMBED_DIM, 1], ["identity"], rng)

    @property
    def n_params(self):
        return (self.encoder.n_params + self.bias_head.n_params
                + self.weight_head.n_params)

    def param_dict(self, prefix="dpd"):
        out = {}
        for name, mlp in [("enc", self.encoder), ("bias", self.bias_head),
                          ("weight", self.weight_head)]:
            out.update(dict(mlp.param_items(f"{prefix}.{name}")))
        return out

    def temporal_embed(self, frame: int):
        if not 1 <= frame <= self.n_frames:
            raise ValueError(f"frame {frame} outside [1, {self.n_frames}]")
        enc = positional_encode(np.array([float(frame)]), TEMPORAL_K,
                                float(self.n_frames))
        return self.encoder(enc)

    def frame_bias(self, frame: int, g_flat, training: bool, rng=None) -> FrameBias:
        """Predict the per-splat additive bias for one frame.

        In training mode the temporal weight is zeroed with probability 0.3
        (one draw per call), which forces the prediction network to also fit
        each frame without its bias.
        """
        g_flat = np.asarray(g_flat, dtype=np.float64)
        z = self.temporal_embed(frame)
        psi = float(self.weight_head(z)[0])
        omega = 2.0 / (1.0 + np.exp(-psi)) - 1.0
        dropped = bool(training and rng is not None and rng.random() < DROPOUT_P)
        omega_eff = 0.0 if dropped else omega
        n = g_flat.shape[0]
        inp = np.concatenate([np.broadcast_to(z, (n, EMBED_DIM)), g_flat], axis=1)
        raw = BIAS_GAIN * self.bias_head(inp)
        delta = omega_eff * raw
        cache = {"raw": raw, "omega": omega, "omega_eff": omega_eff,
                 "dropped": dropped, "n": n}
        return FrameBias(frame, omega_eff, AttributeBias.from_flat(delta),
                         dropped, cache)

    def backward(self, fb: FrameBias, d_delta):
        """Gradients for the last frame_bias call.

        d_delta is (N, 14) on the scaled bias.  Returns (param grads,
        gradient w.r.t. the attribute input g_flat).
        """
        cache = fb.cache
        raw, omega_eff = cache["raw"], cache["omega_eff"]
        d_delta = np.asarray(d_delta, dtype=np.float64)
        d_raw = omega_eff * d_delta
        out = {}
        dws, dbs, d_in = self.bias_head.backward(BIAS_GAIN * d_raw)
        out.update(dict(self.bias_head.grad_items("dpd.bias", dws, dbs)))
        d_z = d_in[:, :EMBED_DIM].sum(axis=0)
        d_g = d_in[:, EMBED_DIM:]
        if fb.dropped:
            d_omega = 0.0
            d_g = np.zeros_like(d_g)
            d_z[:] = 0.0
        else:
            d_omega = float(np.sum(d_delta * raw))
        d_psi = d_omega * 0.5 * (1.0 - cache["omega"] ** 2)
        dws, dbs, d_in = self.weight_head.backward(np.array([d_psi]))
        out.update(dict(self.weight_head.grad_items("dpd.weight", dws, dbs)))
        d_z = d_z + d_in
        dws, dbs, _ = self.encoder.backward(d_z)
        out.update(dict(self.encoder.grad_items("dpd.enc", dws, dbs)))
        return out, d_g
