"""Perturbation-aware optimization: region intake, per-region anisotropic
loss weights, and the per-pixel weighted mask with learnable thresholds.

Residuals and region statistics are treated as constants by the backward
pass; gradients reach only the three thresholds.  The renderer therefore
cannot shrink its own supervision by inflating errors.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

DENOM_CLAMP = 1e-3


@dataclass
class RegionSet:
    masks: np.ndarray        # (U, H, W) bool; regions may overlap
    provenance: str          # "ground-truth" | "grid"
    names: list = field(default_factory=list)

    def __post_init__(self):
        self.masks = np.asarray(self.masks, dtype=bool)
        if self.masks.ndim != 3 or self.masks.shape[0] == 0:
            raise ValueError("RegionSet needs at least one (H, W) mask")
        if not self.names:
            self.names = [f"region{u}" for u in range(self.masks.shape[0])]

    def __len__(self):
        return int(self.masks.shape[0])


@dataclass
class PaoParams:
    """Learnable thresholds (error / overlap / background) plus the fixed
    scaling factors of the region-weight formula."""
    t_err: np.ndarray = field(default_factory=lambda: np.array([1.0]))
    t_mu: np.ndarray = field(default_factory=lambda: np.array([0.3]))
    t_bg: np.ndarray = field(default_factory=lambda: np.array([3.0]))
    alpha: float = 1.0
    beta_temporal: float = 1.0

    def __post_init__(self):
        self.t_err = np.atleast_1d(np.asarray(self.t_err, dtype=np.float64))
        self.t_mu = np.atleast_1d(np.asarray(self.t_mu, dtype=np.float64))
        self.t_bg = np.atleast_1d(np.asarray(self.t_bg, dtype=np.float64))

    def param_dict(self, prefix="pao"):
        return {f"{prefix}.t_err": self.t_err, f"{prefix}.t_mu": self.t_mu,
                f"{prefix}.t_bg": self.t_bg}


@dataclass
class WeightedMask:
    w: np.ndarray            # (H, W), >= 0
    lambdas: np.ndarray      # (U,) per-region weights
    cache: dict = field(repr=False, default=None)


def region_weight(err_mean, mu, omega, params: PaoParams):
    """Anisotropic weight for one region: gated by rendering error and
    target overlap, damped by the frame's temporal weight."""
    t_e = float(params.t_err[0])
    t_m = float(params.t_mu[0])
    denom = max(1.0 + params.beta_temporal * omega, DENOM_CLAMP)
    lam = (params.alpha * max(t_e - err_mean, 0.0) * max(mu - t_m, 0.0) / denom)
    return lam


def _pixel_residual(frame, render):
    return np.abs(np.asarray(frame, dtype=np.float64)
                  - np.asarray(render, dtype=np.float64)).sum(axis=-1)


def region_stats(frame, render, regions: RegionSet, y_h):
    """Per-region mean residual and overlap-with-target fraction."""
    resid = _pixel_residual(frame, render)
    y_h = np.asarray(y_h, dtype=bool)
    h_area = int(y_h.sum())
    errs, mus = [], []
    for u in range(len(regions)):
        mask = regions.masks[u]
        npix = int(mask.sum())
        errs.append(float(resid[mask].mean()) if npix else 0.0)
        mus.append(float((mask & y_h).sum()) / h_area if h_area else 0.0)
    return np.array(errs), np.array(mus), resid


def build_mask(frame, render, regions: RegionSet, y_h, omega,
               params: PaoParams) -> WeightedMask:
    """Per-pixel loss weights: region term plus gated background term."""
    y_h = np.asarray(y_h, dtype=bool)
    errs, mus, resid = region_stats(frame, render, regions, y_h)
    lams = np.array([region_weight(errs[u], mus[u], omega, params)
                     for u in range(len(regions))])
    w = np.einsum("u,uhw->hw", lams, regions.masks.astype(np.float64))
    t_b = float(params.t_bg[0])
    bg_gate = (~y_h) & (resid < t_b)
    w = w + bg_gate * (t_b - resid)
    cache = {"errs": errs, "mus": mus, "omega": omega, "params": params,
             "masks": regions.masks, "bg_gate": bg_gate,
             "lam_active": (errs < float(params.t_err[0])) & (mus > float(params.t_mu[0]))}
    return WeightedMask(w, lams, cache)


def mask_backward(wm: WeightedMask, d_w):
    """Threshold gradients for the last build_mask; everything else is
    stop-gradient by design."""
    cache = wm.cache
    params = cache["params"]
    d_w = np.asarray(d_w, dtype=np.float64)
    errs, mus, omega = cache["errs"], cache["mus"], cache["omega"]
    denom = max(1.0 + params.beta_temporal * omega, DENOM_CLAMP)
    d_te = 0.0
    d_tm = 0.0
    t_e = float(params.t_err[0])
    t_m = float(params.t_mu[0])
    for u in range(len(errs)):
        if not cache["lam_active"][u]:
            continue
        pix = float(d_w[cache["masks"][u]].sum())
        d_te += pix * params.alpha * (mus[u] - t_m) / denom
        d_tm += pix * params.alpha * (t_e - errs[u]) * (-1.0) / denom
    d_tb = float(d_w[cache["bg_gate"]].sum())
    return {"pao.t_err": np.array([d_te]), "pao.t_mu": np.array([d_tm]),
            "pao.t_bg": np.array([d_tb])}


def segment_grid(height, width, tiles=8) -> RegionSet:
    """Regular g x g tiling; the promptless stand-in region provider."""
    if tiles < 1:
        raise ValueError("tiles must be >= 1")
    ys = np.linspace(0, height, tiles + 1).round().astype(int)
    xs = np.linspace(0, width, tiles + 1).round().astype(int)
    masks, names = [], []
    for i in range(tiles):
        for j in range(tiles):
            m = np.zeros((height, width), dtype=bool)
            m[ys[i]:ys[i + 1], xs[j]:xs[j + 1]] = True
            if m.any():
                masks.append(m)
                names.append(f"tile{i}_{j}")
    return RegionSet(np.array(masks), "grid", names)


def regions_from_masks(entity_mask, occluder_mask=None) -> RegionSet:
    """Ground-truth region provider: visible target, occluder, background.

    This mirrors what a promptable segmenter would return on the synthetic
    scenes; occluded target pixels belong to the occluder region.
    """
    entity_mask = np.asarray(entity_mask, dtype=bool)
    occ = (np.asarray(occluder_mask, dtype=bool) if occluder_mask is not None
           else np.zeros_like(entity_mask))
    visible = entity_mask & ~occ
    background = ~(entity_mask | occ)
    masks, names = [], []
    for m, name in [(visible, "entity"), (occ, "occluder"),
                    (background, "background")]:
        if m.any():
            masks.append(m)
            names.append(name)
    return RegionSet(np.array(masks), "ground-truth", names)
