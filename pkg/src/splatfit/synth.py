"""Synthetic monocular sequence generator.

Ground truth comes from this package's own renderer applied to a hidden
oracle GaussianSet riding the articulated template through a smooth random
pose trajectory, so reconstruction error has a known floor of zero.  Four
perturbation injectors (occluder, illumination, blur, pose-extreme) corrupt
scheduled frame ranges; clean references and ground-truth region masks are
kept for every frame.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field

import numpy as np

from . import wgt
from .gaussians import GaussianSet
from .renderer import Camera, load_png, rasterize, save_png
from .template import PoseState, Template, build_template

PERTURBATION_TYPES = ("occluder", "illumination", "blur", "pose-extreme")
BACKGROUND = 0.5
OCCLUDER_COLOR = np.array([0.15, 0.2, 0.3])


@dataclass
class Perturbation:
    kind: str
    start: int               # 1-based, inclusive
    end: int                 # inclusive
    strength: float

    def __post_init__(self):
        if self.kind not in PERTURBATION_TYPES:
            raise ValueError(f"unknown perturbation type {self.kind!r}")
        if not 0.0 <= self.strength <= 1.0:
            raise ValueError("strength must be in [0,1]")
        if self.start > self.end:
            raise ValueError("empty frame range")

    def covers(self, frame):
        return self.start <= frame <= self.end

    def to_dict(self):
        return {"type": self.kind, "start": self.start, "end": self.end,
                "strength": self.strength}

    @classmethod
    def from_dict(cls, d):
        return cls(d["type"], d["start"], d["end"], d["strength"])


@dataclass
class SceneConfig:
    n_frames: int = 60
    height: int = 64
    width: int = 64
    schedule: list = field(default_factory=list)
    seed: int = 0
    entities: int = 1
    test_fraction: float = 0.1
    n_vertices: int = 512

    def __post_init__(self):
        self.schedule = [p if isinstance(p, Perturbation)
                         else Perturbation.from_dict(p) for p in self.schedule]
        if self.entities not in (1, 2):
            raise ValueError("entities must be 1 or 2")
        if not 0.0 <= self.test_fraction < 1.0:
            raise ValueError("test_fraction must be in [0,1)")
        for p in self.schedule:
            if p.start < 1 or p.end > self.n_frames:
                raise ValueError("schedule range outside [1, L]")

    def to_dict(self):
        return {"n_frames": self.n_frames, "height": self.height,
                "width": self.width,
                "schedule": [p.to_dict() for p in self.schedule],
                "seed": self.seed, "entities": self.entities,
                "test_fraction": self.test_fraction,
                "n_vertices": self.n_vertices}

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


def default_camera(template: Template, height, width) -> Camera:
    diag = template.bbox_diagonal
    dist = 2.5 * diag
    # target fills roughly 60% of the frame
    f = 0.6 * min(height, width) * dist / diag
    return Camera(f, f, width / 2.0, height / 2.0, np.eye(3),
                  np.array([0.0, 0.0, dist]), width, height)


def _color_field(rest, rng):
    """Smooth per-vertex albedo: per-channel sinusoid over rest position."""
    freqs = rng.uniform(1.0, 3.0, (3, 3))
    phases = rng.uniform(0, 2 * np.pi, 3)
    c = 0.5 + 0.45 * np.sin(rest @ freqs.T + phases)
    return np.clip(c, 0.0, 1.0)


def _trajectory(cfg: SceneConfig, n_joints, rng):
    """Smooth sinusoidal per-joint angle curves; returns (L, J, 3).

    Frequencies are even so the pose loop closes with period L/2: every
    pose seen during a perturbed span recurs unperturbed elsewhere, which
    is what makes corrupted supervision conflict with clean supervision
    instead of being memorized per pose.
    """
    amp = rng.uniform(0.1, 0.45, (n_joints, 3))
    amp[0] *= 0.3
    freq = 2 * rng.integers(1, 3, (n_joints, 3))
    phase = rng.uniform(0, 2 * np.pi, (n_joints, 3))
    ls = np.arange(1, cfg.n_frames + 1)[:, None, None]
    return amp * np.sin(2 * np.pi * freq * ls / cfg.n_frames + phase)


class OracleScene:
    """Hidden ground-truth scene: template, albedo, trajectory, camera."""

    def __init__(self, cfg: SceneConfig):
        self.cfg = cfg
        rng = np.random.default_rng(cfg.seed)
        self.template = build_template(n_vertices=cfg.n_vertices,
                                       seed=cfg.seed)
        self.camera = default_camera(self.template, cfg.height, cfg.width)
        self.colors = _color_field(self.template.rest_vertices, rng)
        self.theta = _trajectory(cfg, self.template.n_joints, rng)
        edge = self.template.mean_edge_length
        n = self.template.n_vertices
        self.opacity = np.full(n, 0.9)
        self.scales = np.full((n, 3), 0.6 * edge)
        self.quats = np.tile([1.0, 0.0, 0.0, 0.0], (n, 1))
        if cfg.entities == 2:
            # mirror twin: reflected rest colors, shifted sideways
            self.twin_shift = np.array([0.9 * self.template.bbox_diagonal, 0, 0])
        else:
            self.twin_shift = None

    def pose_state(self, frame, scale=1.0):
        from .template import N_SHAPE
        return PoseState(scale * self.theta[frame - 1], np.zeros(N_SHAPE),
                         np.zeros(3))

    def gaussian_set(self, frame, theta_scale=1.0) -> GaussianSet:
        from .template import pose

        state = self.pose_state(frame, theta_scale)
        v, _ = pose(self.template, state)
        p, o = v, self.opacity
        q, s, c = self.quats, self.scales, self.colors
        if self.twin_shift is not None:
            mirror = v * np.array([-1.0, 1.0, 1.0]) + self.twin_shift
            half = self.twin_shift / 2.0
            p = np.concatenate([v - half, mirror - half])
            o = np.concatenate([o, o])
            q = np.concatenate([q, q])
            s = np.concatenate([s, s])
            c = np.concatenate([c, c])     # shared texture, mirrored geometry
        return GaussianSet(p.copy(), o.copy(), q.copy(), s.copy(), c.copy())


# -- injectors ----------------------------------------------------------------

def inject_occluder(frame_img, entity_mask, strength, phase):
    """Opaque disc over the entity; returns (image, occluder mask).

    `phase` in [0,1] moves the disc across the entity bounding box.
    """
    h, w = frame_img.shape[:2]
    radius = strength * 0.25 * min(h, w)
    if radius <= 0 or not entity_mask.any():
        return frame_img.copy(), np.zeros((h, w), dtype=bool)
    ys, xs = np.nonzero(entity_mask)
    y0, y1 = ys.min(), ys.max()
    x0, x1 = xs.min(), xs.max()
    cy = y0 + (y1 - y0) * (0.3 + 0.4 * np.sin(2 * np.pi * phase) ** 2)
    cx = x0 + (x1 - x0) * phase
    yy, xx = np.mgrid[0:h, 0:w]
    disc = (yy - cy) ** 2 + (xx - cx) ** 2 <= radius ** 2
    out = frame_img.copy()
    out[disc] = OCCLUDER_COLOR
    return out, disc


def inject_illumination(frame_img, strength, phase):
    """Global gain 1 + strength * sin ramp; output clamped to [0,1].

    The ramp phase stays in the interior of the half period so every
    scheduled frame gets a real gain (peak 1 + strength mid-range).
    """
    gain = 1.0 + strength * np.sin(np.pi * (0.2 + 0.6 * phase))
    return np.clip(frame_img * gain, 0.0, 1.0)


def _line_kernel(length, direction):
    """Normalized 2D kernel: `length` bilinear taps along `direction`."""
    if length <= 1:
        return np.ones((1, 1))
    d = np.asarray(direction, dtype=np.float64)
    nrm = np.linalg.norm(d)
    d = d / nrm if nrm > 1e-12 else np.array([1.0, 0.0])
    half = (length - 1) / 2.0
    # one cell of slack per side so bilinear taps on the rim stay in bounds
    size = int(np.ceil(half)) * 2 + 3
    kern = np.zeros((size, size))
    c = size // 2
    for t in np.linspace(-half, half, length):
        y, x = c + t * d[0], c + t * d[1]
        iy, ix = int(np.floor(y)), int(np.floor(x))
        fy, fx = y - iy, x - ix
        kern[iy, ix] += (1 - fy) * (1 - fx)
        kern[iy, ix + 1] += (1 - fy) * fx
        kern[iy + 1, ix] += fy * (1 - fx)
        kern[iy + 1, ix + 1] += fy * fx
    return kern / kern.sum()


def inject_blur(frame_img, strength, velocity):
    """Line-kernel motion blur along the image-space velocity direction."""
    from scipy.ndimage import convolve

    length = 1 + int(round(8 * strength))
    kern = _line_kernel(length, velocity)
    if kern.size == 1:
        return frame_img.copy()
    out = np.empty_like(frame_img)
    for ch in range(frame_img.shape[2]):
        out[:, :, ch] = convolve(frame_img[:, :, ch], kern, mode="nearest")
    return out


# -- dataset writer -----------------------------------------------------------

def _split_frames(cfg: SceneConfig):
    """Clean test frames from unperturbed spans, then val, then train."""
    frames = list(range(1, cfg.n_frames + 1))
    perturbed = {l for p in cfg.schedule for l in range(p.start, p.end + 1)}
    clean = [l for l in frames if l not in perturbed]
    n_test = int(round(cfg.test_fraction * cfg.n_frames))
    n_test = min(n_test, len(clean))
    idx = np.linspace(0, len(clean) - 1, n_test).round().astype(int) if n_test else []
    test = [clean[i] for i in idx]
    rest = [l for l in frames if l not in set(test)]
    n_val = int(round(0.1 * cfg.n_frames))
    vidx = np.linspace(0, len(rest) - 1, n_val).round().astype(int) if n_val else []
    val = [rest[i] for i in vidx]
    train = [l for l in rest if l not in set(val)]
    return train, val, test


def _entity_centroid_px(mask):
    if not mask.any():
        return None
    ys, xs = np.nonzero(mask)
    return np.array([ys.mean(), xs.mean()])


def synthesize(cfg: SceneConfig, out_dir):
    """Generate the full dataset directory; bitwise reproducible from cfg."""
    scene = OracleScene(cfg)
    for sub in ("frames", "clean", "masks"):
        os.makedirs(os.path.join(out_dir, sub), exist_ok=True)
    scene.camera.save(os.path.join(out_dir, "camera.json"))
    scene.template.save(os.path.join(out_dir, "template.wgta"))

    pose_rows, frame_table = [], []
    prev_centroid = None
    for l in range(1, cfg.n_frames + 1):
        active = [p for p in cfg.schedule if p.covers(l)]
        theta_scale = 1.0
        for p in active:
            if p.kind == "pose-extreme":
                theta_scale *= 1.0 + 2.0 * p.strength
        gset_clean = scene.gaussian_set(l)
        out_clean = rasterize(gset_clean, scene.camera, BACKGROUND)
        entity_mask = out_clean.alpha > 0.5
        if theta_scale != 1.0:
            out_obs = rasterize(scene.gaussian_set(l, theta_scale),
                                scene.camera, BACKGROUND)
            img = out_obs.rgb
        else:
            img = out_clean.rgb
        centroid = _entity_centroid_px(entity_mask)
        velocity = (centroid - prev_centroid
                    if centroid is not None and prev_centroid is not None
                    else np.array([0.0, 1.0]))
        prev_centroid = centroid

        occ_mask = np.zeros(entity_mask.shape, dtype=bool)
        labels = []
        for p in active:
            phase = ((l - p.start) / max(p.end - p.start, 1))
            if p.kind == "occluder":
                img, disc = inject_occluder(img, entity_mask, p.strength, phase)
                occ_mask |= disc
            elif p.kind == "illumination":
                img = inject_illumination(img, p.strength, phase)
            elif p.kind == "blur":
                img = inject_blur(img, p.strength, velocity)
            labels.append(p.kind)

        stem = f"{l:04d}"
        save_png(os.path.join(out_dir, "frames", stem + ".png"), img)
        wgt.write_tensor(os.path.join(out_dir, "frames", stem + ".wgt"), img)
        save_png(os.path.join(out_dir, "clean", stem + ".png"), out_clean.rgb)
        wgt.write_tensor(os.path.join(out_dir, "clean", stem + ".wgt"),
                         out_clean.rgb)
        bg_mask = ~(entity_mask | occ_mask)
        for region, m in [("entity", entity_mask), ("occluder", occ_mask),
                          ("background", bg_mask)]:
            save_png(os.path.join(out_dir, "masks", f"{stem}_{region}.png"),
                     m[..., None].repeat(3, axis=2).astype(np.float64))
        pose_rows.append(scene.pose_state(l).to_vector())
        frame_table.append({"frame": l, "perturbations": sorted(labels)})

    wgt.write_tensor(os.path.join(out_dir, "poses.wgt"), np.array(pose_rows))
    train, val, test = _split_frames(cfg)
    manifest = {"config": cfg.to_dict(),
                "frames": frame_table,
                "split": {"train": train, "val": val, "test": test}}
    with open(os.path.join(out_dir, "manifest.json"), "w") as fh:
        json.dump(manifest, fh, indent=1, sort_keys=True)
    return out_dir


# -- dataset reader -----------------------------------------------------------

class Dataset:
    """Lazy reader over a synthesized directory."""

    def __init__(self, root):
        self.root = root
        with open(os.path.join(root, "manifest.json")) as fh:
            self.manifest = json.load(fh)
        self.config = SceneConfig.from_dict(self.manifest["config"])
        self.camera = Camera.load(os.path.join(root, "camera.json"))
        self.template = Template.load(os.path.join(root, "template.wgta"))
        self.poses = wgt.read_tensor(os.path.join(root, "poses.wgt")).astype(np.float64)
        self.split = self.manifest["split"]

    @property
    def n_frames(self):
        return self.config.n_frames

    def frame(self, l):
        return wgt.read_tensor(
            os.path.join(self.root, "frames", f"{l:04d}.wgt")).astype(np.float64)

    def clean(self, l):
        return wgt.read_tensor(
            os.path.join(self.root, "clean", f"{l:04d}.wgt")).astype(np.float64)

    def mask(self, l, region):
        img = load_png(os.path.join(self.root, "masks", f"{l:04d}_{region}.png"))
        return img[..., 0] > 0.5

    def pose_state(self, l) -> PoseState:
        return PoseState.from_vector(self.poses[l - 1], self.template.n_joints)

    def perturbations(self, l):
        return self.manifest["frames"][l - 1]["perturbations"]
