"""Training objective terms and evaluation metrics.

The reconstruction term is a mask-weighted mean l1; the regularizer bundle
covers bias sparsity, shadow and opacity pull-to-one, Laplacian smoothness,
and the mask reward.  PSNR and SSIM follow the usual conventions for
images in [0, 1].
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass
class LossWeights:
    lam_bias: float = 0.1
    lam_xi: float = 0.001
    lam_o: float = 0.1
    lam_lap: float = 0.1
    lam_w: float = 0.5
    lam_cross: float = 0.1

    def __post_init__(self):
        for name in ("lam_bias", "lam_xi", "lam_o", "lam_lap", "lam_w",
                     "lam_cross"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be nonnegative")


@dataclass
class LossReport:
    total: float
    recon: float
    reg_bias: float
    reg_xi: float
    reg_o: float
    reg_lap: float
    reg_w: float
    cross: float = 0.0
    omega: float = 0.0
    mask_mean: float = 0.0
    mask_hand_mean: float = 0.0
    mask_bg_mean: float = 0.0

    def parts_sum(self):
        return (self.recon + self.reg_bias + self.reg_xi + self.reg_o
                + self.reg_lap + self.reg_w + self.cross)


def reconstruction_loss(frame, render, w):
    """Weighted l1: mean over pixels of W * channel-sum |I_l - I|.

    Returns (loss, d_render).  W is stop-gradient here; its threshold
    gradients come from the mask builder via the d_w seed below.
    """
    frame = np.asarray(frame, dtype=np.float64)
    render = np.asarray(render, dtype=np.float64)
    w = np.asarray(w, dtype=np.float64)
    diff = render - frame
    npix = float(w.size)
    loss = float(np.sum(w * np.abs(diff).sum(axis=-1)) / npix)
    d_render = w[..., None] * np.sign(diff) / npix
    return loss, d_render


def recon_mask_seed(frame, render, lam_w):
    """d(loss)/dW per pixel for the reconstruction + mask-reward terms;
    residual treated as a constant."""
    frame = np.asarray(frame, dtype=np.float64)
    render = np.asarray(render, dtype=np.float64)
    l1 = np.abs(render - frame).sum(axis=-1)
    return (l1 - lam_w) / float(l1.size)


def regularizers(delta_flat, xi, o, lap_energy, w, weights: LossWeights):
    """Eq-style per-splat penalties plus smoothness and mask reward.

    Returns (terms dict, grads dict) where grads hold d_delta, d_xi, d_o
    and d_lap (scalar factor for the Laplacian chain).
    """
    delta_flat = np.asarray(delta_flat, dtype=np.float64)
    xi = np.asarray(xi, dtype=np.float64)
    o = np.asarray(o, dtype=np.float64)
    n = float(delta_flat.shape[0])
    terms = {
        "reg_bias": weights.lam_bias * float(np.abs(delta_flat).sum()) / n,
        "reg_xi": weights.lam_xi * float(np.sum((xi - 1.0) ** 2)) / n,
        "reg_o": weights.lam_o * float(np.sum((o - 1.0) ** 2)) / n,
        "reg_lap": weights.lam_lap * float(lap_energy),
        "reg_w": -weights.lam_w * float(np.mean(w)),
    }
    grads = {
        "d_delta": weights.lam_bias * np.sign(delta_flat) / n,
        "d_xi": weights.lam_xi * 2.0 * (xi - 1.0) / n,
        "d_o": weights.lam_o * 2.0 * (o - 1.0) / n,
        "d_lap": weights.lam_lap,
    }
    return terms, grads


def cross_consistency(pooled_a, pooled_b):
    """Normalized l1 between two pooled texture features; returns
    (loss, d_a, d_b)."""
    a = np.asarray(pooled_a, dtype=np.float64)
    b = np.asarray(pooled_b, dtype=np.float64)
    f = float(a.size)
    loss = float(np.abs(a - b).sum()) / f
    d_a = np.sign(a - b) / f
    return loss, d_a, -d_a


# -- metrics ------------------------------------------------------------------

PSNR_CAP = 100.0
_MSE_FLOOR = 1e-10


def psnr(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError("psnr shape mismatch")
    mse = float(np.mean((a - b) ** 2))
    if mse < _MSE_FLOOR:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * np.log10(1.0 / mse))


def _gauss_kernel(size=11, sigma=1.5):
    x = np.arange(size) - (size - 1) / 2.0
    k = np.exp(-(x ** 2) / (2.0 * sigma ** 2))
    return k / k.sum()


def _filter2(img, kernel):
    # separable valid-mode convolution; symmetric kernel so no flip needed
    from scipy.signal import convolve

    out = convolve(img, kernel[:, None], mode="valid")
    return convolve(out, kernel[None, :], mode="valid")


def ssim(a, b, k1=0.01, k2=0.03):
    """Mean structural similarity over 11x11 Gaussian windows, data range 1;
    channel dimension averaged if present."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError("ssim shape mismatch")
    if a.ndim == 3:
        return float(np.mean([ssim(a[..., c], b[..., c], k1, k2)
                              for c in range(a.shape[-1])]))
    kern = _gauss_kernel()
    c1, c2 = k1 ** 2, k2 ** 2
    mu_a = _filter2(a, kern)
    mu_b = _filter2(b, kern)
    var_a = _filter2(a * a, kern) - mu_a ** 2
    var_b = _filter2(b * b, kern) - mu_b ** 2
    cov = _filter2(a * b, kern) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a ** 2 + mu_b ** 2 + c1) * (var_a + var_b + c2)
    return float(np.mean(num / den))
