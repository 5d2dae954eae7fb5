"""Per-scene optimization loop: prediction network + per-frame biases +
weighted masks, two Adam groups, step-decay schedule, best-validation
checkpointing, evaluation, and the three-row ablation driver.
"""

from __future__ import annotations

import copy
import csv
import json
import os
from dataclasses import dataclass, field, asdict

import numpy as np

from . import losses, pao, wgt
from .avatar import AvatarNet
from .dpd import DpdNet
from .gaussians import AttributeBias, apply_bias_set, apply_bias_backward
from .nn import Adam, OptimizerError
from .renderer import rasterize, rasterize_backward
from .synth import BACKGROUND, Dataset
from .template import laplacian_energy, laplacian_energy_backward


@dataclass
class TrainConfig:
    epochs: int = 50
    batch: int = 4
    lr_main: float = 1e-4
    lr_thresholds: float = 1e-6
    decay: float = 0.5
    decay_every: int = 5
    seed: int = 0
    sequential: bool = False
    enable_dpd: bool = True
    enable_pao: bool = True
    region_provider: str = "ground-truth"   # or "grid"
    grid_tiles: int = 8
    pao_alpha: float = 1.0
    pao_beta: float = 1.0

    def __post_init__(self):
        if self.lr_main <= 0 or self.lr_thresholds <= 0:
            raise ValueError("learning rates must be positive")
        if self.batch < 1 or self.epochs < 0:
            raise ValueError("bad batch/epoch count")
        if self.region_provider not in ("ground-truth", "grid"):
            raise ValueError("region_provider must be ground-truth or grid")
        if self.pao_alpha <= 0 or self.pao_beta < 0:
            raise ValueError("bad mask scaling factors")

    def lr_at(self, epoch):
        return self.lr_main * self.decay ** (epoch // self.decay_every)

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


class NumericalAbort(RuntimeError):
    """Raised when the loss goes non-finite; carries the last-good state."""

    def __init__(self, frame, checkpoint_path=None):
        super().__init__(f"non-finite loss at frame {frame}")
        self.frame = frame
        self.checkpoint_path = checkpoint_path


class Trainer:
    """Wires all modules together for one dataset."""

    def __init__(self, dataset: Dataset, config: TrainConfig):
        self.ds = dataset
        self.cfg = config
        self.two_entity = dataset.config.entities == 2
        self.avatar = AvatarNet(dataset.template, seed=config.seed)
        self.avatars = [self.avatar]
        if self.two_entity:
            self.avatars.append(AvatarNet(dataset.template, seed=config.seed + 1))
        self.dpd = DpdNet(dataset.n_frames, seed=config.seed)
        self.pao_params = pao.PaoParams(alpha=config.pao_alpha,
                                        beta_temporal=config.pao_beta)
        self.weights = losses.LossWeights()
        self.rng = np.random.default_rng(config.seed)

        main_params = {}
        for i, av in enumerate(self.avatars):
            main_params.update(av.param_dict(f"avatar{i}"))
        main_params.update(self.dpd.param_dict())
        self.opt_main = Adam(main_params, lr=config.lr_main)
        self.opt_thresh = Adam(self.pao_params.param_dict(),
                               lr=config.lr_thresholds)
        self.epoch = 0
        self.best_val = -np.inf
        self.best_state = None
        self.log = []

    # -- per-frame forward/backward --------------------------------------

    def _regions(self, l, y_h):
        if self.cfg.region_provider == "grid":
            return pao.segment_grid(self.ds.camera.height,
                                    self.ds.camera.width, self.cfg.grid_tiles)
        return pao.regions_from_masks(y_h, self.ds.mask(l, "occluder"))

    def _baseline_mask(self, frame, render, y_h):
        """No-PAO supervision: weight 1 on the target silhouette plus the
        fixed-threshold background term."""
        resid = np.abs(frame - render).sum(axis=-1)
        t_b = 3.0
        w = y_h.astype(np.float64) + (~y_h) * np.maximum(t_b - resid, 0.0)
        return w

    def frame_step(self, l, training=True):
        """Forward + backward for one frame; returns (report, grads dicts)."""
        cfg = self.cfg
        frame = self.ds.frame(l)
        y_h = self.ds.mask(l, "entity")
        cam = self.ds.camera
        pose_state = self.ds.pose_state(l)

        gsets, auxes, fbs, biased_sets, bias_caches = [], [], [], [], []
        n_total = 0
        for av in self.avatars:
            gset, aux = av.forward(pose_state)
            fb = (self.dpd.frame_bias(l, gset.to_flat(), training, self.rng)
                  if cfg.enable_dpd else None)
            if fb is not None:
                biased, bcache = apply_bias_set(gset, fb.bias)
            else:
                biased, bcache = gset, None
            gsets.append(gset)
            auxes.append(aux)
            fbs.append(fb)
            biased_sets.append(biased)
            bias_caches.append(bcache)
            n_total += len(gset)

        merged = _merge_sets(biased_sets)
        out = rasterize(merged, cam, BACKGROUND, sequential=cfg.sequential)
        omega = fbs[0].omega if fbs[0] is not None else 0.0

        if cfg.enable_pao:
            regions = self._regions(l, y_h)
            wm = pao.build_mask(frame, out.rgb, regions, y_h, omega,
                                self.pao_params)
            w = wm.w
        else:
            wm = None
            w = self._baseline_mask(frame, out.rgb, y_h)

        recon, d_render = losses.reconstruction_loss(frame, out.rgb, w)
        delta_flat = (np.concatenate([fb.bias.to_flat() for fb in fbs])
                      if cfg.enable_dpd else np.zeros((n_total, 14)))
        xi = np.concatenate([aux["xi"] for aux in auxes])
        o = np.concatenate([g.o for g in gsets])
        lap = sum(laplacian_energy(aux["v1"], self.ds.template.neighbors)
                  for aux in auxes)
        terms, rg = losses.regularizers(delta_flat, xi, o, lap, w, self.weights)

        cross = 0.0
        d_pooled = [None] * len(self.avatars)
        if self.two_entity:
            c, da, db = losses.cross_consistency(auxes[0]["pooled_tex"],
                                                 auxes[1]["pooled_tex"])
            cross = self.weights.lam_cross * c
            d_pooled = [self.weights.lam_cross * da,
                        self.weights.lam_cross * db]

        total = recon + sum(terms.values()) + cross
        report = losses.LossReport(
            total=total, recon=recon, cross=cross, omega=omega,
            mask_mean=float(np.mean(w)),
            mask_hand_mean=float(w[y_h].mean()) if y_h.any() else 0.0,
            mask_bg_mean=float(w[~y_h].mean()) if (~y_h).any() else 0.0,
            **terms)
        if not np.isfinite(total):
            raise NumericalAbort(l)

        # backward
        dsplat = rasterize_backward(out, d_render)
        grads = {}
        n = self.ds.template.n_vertices
        offset = 0
        for i, (av, aux, fb, bcache) in enumerate(
                zip(self.avatars, auxes, fbs, bias_caches)):
            sl = slice(offset, offset + n)
            dp, do = dsplat["p"][sl], dsplat["o"][sl]
            dq, dsg = dsplat["q"][sl], dsplat["s"][sl]
            dc = dsplat["c"][sl]
            if fb is not None:
                bg = apply_bias_backward(bcache, dp, do, dq, dsg, dc)
                dp, do = bg["p"], bg["o"]
                dq, dsg, dc = bg["q"], bg["s"], bg["c"]
                d_delta = AttributeBias(dp, do, dq, dsg, dc).to_flat()
                d_delta = d_delta + rg["d_delta"][sl]
                dpd_grads, d_g = self.dpd.backward(fb, d_delta)
                for k, v in dpd_grads.items():
                    grads[k] = grads.get(k, 0.0) + v
                ab = AttributeBias.from_flat(d_g)
                dp = dp + ab.dp
                do = do + ab.do
                dq = dq + ab.dq
                dsg = dsg + ab.ds
                dc = dc + ab.dc
            av_grads = av.backward(aux, {
                "p": dp, "o": do + rg["d_o"][sl], "q": dq, "s": dsg, "c": dc,
                "xi": rg["d_xi"][sl],
                "v1": rg["d_lap"] * laplacian_energy_backward(
                    aux["v1"], self.ds.template.neighbors),
                **({"pooled_tex": d_pooled[i]} if d_pooled[i] is not None else {}),
            })
            for k, v in av_grads.items():
                grads[f"avatar{i}.{k.split('.', 1)[1]}"] = v
            offset += n

        tgrads = {}
        if wm is not None:
            seed = losses.recon_mask_seed(frame, out.rgb, self.weights.lam_w)
            tgrads = pao.mask_backward(wm, seed)
        return report, grads, tgrads

    # -- loop -------------------------------------------------------------

    def train_epoch(self):
        cfg = self.cfg
        lr = cfg.lr_at(self.epoch)
        self.opt_main.lr = lr
        self.opt_thresh.lr = cfg.lr_thresholds * (lr / cfg.lr_main)
        frames = list(self.ds.split["train"])
        order = self.rng.permutation(len(frames))
        reports = []
        for start in range(0, len(frames), cfg.batch):
            batch = [frames[i] for i in order[start:start + cfg.batch]]
            acc_g, acc_t = {}, {}
            for l in batch:
                report, grads, tgrads = self.frame_step(l)
                reports.append(report)
                for k, v in grads.items():
                    acc_g[k] = acc_g.get(k, 0.0) + v / len(batch)
                for k, v in tgrads.items():
                    acc_t[k] = acc_t.get(k, 0.0) + v / len(batch)
            self.opt_main.step(acc_g)
            if cfg.enable_pao and acc_t:
                self.opt_thresh.step(acc_t)
        self.epoch += 1
        return reports

    def render_frame(self, l, with_bias=False):
        pose_state = self.ds.pose_state(l)
        sets = []
        for av in self.avatars:
            gset, _ = av.forward(pose_state)
            if with_bias and self.cfg.enable_dpd:
                fb = self.dpd.frame_bias(l, gset.to_flat(), training=False)
                gset, _ = apply_bias_set(gset, fb.bias)
            sets.append(gset)
        return rasterize(_merge_sets(sets), self.ds.camera, BACKGROUND,
                         sequential=self.cfg.sequential)

    def validate(self):
        vals = []
        for l in self.ds.split["val"]:
            out = self.render_frame(l)
            vals.append(losses.psnr(out.rgb, self.ds.clean(l)))
        return float(np.mean(vals)) if vals else 0.0

    def fit(self, log_path=None):
        last_good = self.snapshot()
        try:
            for _ in range(self.cfg.epochs):
                reports = self.train_epoch()
                val = self.validate()
                rec = {"epoch": self.epoch,
                       "lr": self.cfg.lr_at(self.epoch - 1),
                       "train_loss": float(np.mean([r.total for r in reports])),
                       "recon": float(np.mean([r.recon for r in reports])),
                       "mask_mean": float(np.mean([r.mask_mean for r in reports])),
                       "val_psnr": val}
                self.log.append(rec)
                if log_path:
                    with open(log_path, "a") as fh:
                        fh.write(json.dumps(rec, sort_keys=True) + "\n")
                if val >= self.best_val:
                    self.best_val = val
                    self.best_state = self.snapshot()
                last_good = self.snapshot()
        except (NumericalAbort, OptimizerError) as exc:
            self.restore(last_good)
            frame = exc.frame if isinstance(exc, NumericalAbort) else -1
            raise NumericalAbort(frame) from exc
        if self.best_state is not None:
            self.restore(self.best_state)
        return self.log

    # -- state ------------------------------------------------------------

    def _all_tensors(self):
        out = {}
        out.update(self.opt_main.params)
        out.update(self.pao_params.param_dict())
        out.update(self.opt_main.state_tensors("adam_main"))
        out.update(self.opt_thresh.state_tensors("adam_thresh"))
        return out

    def snapshot(self):
        return {"tensors": {k: v.copy() for k, v in self._all_tensors().items()},
                "epoch": self.epoch, "best_val": self.best_val,
                "rng": copy.deepcopy(self.rng.bit_generator.state)}

    def restore(self, snap):
        live = self._all_tensors()
        for k, v in snap["tensors"].items():
            live[k][...] = v
        self.opt_main.load_state_tensors(snap["tensors"], "adam_main")
        self.opt_thresh.load_state_tensors(snap["tensors"], "adam_thresh")
        self.epoch = snap["epoch"]
        self.best_val = snap["best_val"]
        self.rng.bit_generator.state = copy.deepcopy(snap["rng"])

    def save_checkpoint(self, path):
        rng_state = copy.deepcopy(self.rng.bit_generator.state)
        rng_state["state"] = {k: str(v) for k, v in rng_state["state"].items()}
        meta = {"epoch": self.epoch, "best_val": self.best_val,
                "rng": rng_state, "config": self.cfg.to_dict(),
                "entities": self.ds.config.entities}
        wgt.write_archive(path, self._all_tensors(), meta)

    def load_checkpoint(self, path):
        tensors, meta = wgt.read_archive(path)
        live = self._all_tensors()
        for k, v in live.items():
            v[...] = tensors[k].astype(np.float64).reshape(v.shape)
        self.opt_main.load_state_tensors(
            {k: t.astype(np.float64) for k, t in tensors.items()
             if k.startswith("adam_main")}, "adam_main")
        self.opt_thresh.load_state_tensors(
            {k: t.astype(np.float64) for k, t in tensors.items()
             if k.startswith("adam_thresh")}, "adam_thresh")
        self.epoch = int(meta["epoch"])
        self.best_val = float(meta["best_val"])
        rng_state = dict(meta["rng"])
        rng_state["state"] = {k: int(v) for k, v in rng_state["state"].items()}
        self.rng.bit_generator.state = rng_state


def _merge_sets(sets):
    if len(sets) == 1:
        return sets[0]
    from .gaussians import GaussianSet
    return GaussianSet(
        np.concatenate([s.p for s in sets]),
        np.concatenate([s.o for s in sets]),
        np.concatenate([s.q for s in sets]),
        np.concatenate([s.s for s in sets]),
        np.concatenate([s.c for s in sets]))


# -- evaluation / ablation ----------------------------------------------------

def evaluate(trainer: Trainer, split="test", with_bias=False, csv_path=None,
             dump_mask_dir=None):
    """Metrics on a split: per-frame PSNR/SSIM vs clean references plus mask
    statistics.  Returns the list of row dicts."""
    rows = []
    for l in trainer.ds.split[split]:
        out = trainer.render_frame(l, with_bias=with_bias)
        clean = trainer.ds.clean(l)
        y_h = trainer.ds.mask(l, "entity")
        frame = trainer.ds.frame(l)
        if trainer.cfg.enable_pao:
            regions = trainer._regions(l, y_h)
            if trainer.cfg.enable_dpd:
                gset, _ = trainer.avatar.forward(trainer.ds.pose_state(l))
                omega = trainer.dpd.frame_bias(l, gset.to_flat(),
                                               training=False).omega
            else:
                omega = 0.0
            w = pao.build_mask(frame, out.rgb, regions, y_h, omega,
                               trainer.pao_params).w
        else:
            omega = 0.0
            w = trainer._baseline_mask(frame, out.rgb, y_h)
        if dump_mask_dir:
            os.makedirs(dump_mask_dir, exist_ok=True)
            wgt.write_tensor(os.path.join(dump_mask_dir, f"{l:04d}_w.wgt"), w)
        rows.append({
            "frame_index": l,
            "psnr": losses.psnr(out.rgb, clean),
            "ssim": losses.ssim(out.rgb, clean),
            "mean_W_hand": float(w[y_h].mean()) if y_h.any() else 0.0,
            "mean_W_background": float(w[~y_h].mean()) if (~y_h).any() else 0.0,
            "omega": float(omega),
        })
    if csv_path:
        with open(csv_path, "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=list(rows[0].keys()))
            writer.writeheader()
            writer.writerows(rows)
    return rows


ABLATION_MODES = [("baseline", False, False), ("dpd", True, False),
                  ("full", True, True)]


def ablate(dataset: Dataset, config: TrainConfig):
    """Three fits differing only in enabled modules; returns mode -> mean
    test PSNR/SSIM."""
    table = {}
    for name, use_dpd, use_pao in ABLATION_MODES:
        cfg = copy.deepcopy(config)
        cfg.enable_dpd = use_dpd
        cfg.enable_pao = use_pao
        trainer = Trainer(dataset, cfg)
        trainer.fit()
        rows = evaluate(trainer, "test")
        table[name] = {"psnr": float(np.mean([r["psnr"] for r in rows])),
                       "ssim": float(np.mean([r["ssim"] for r in rows]))}
    return table
