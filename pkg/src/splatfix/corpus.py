"""Procedural mannequin scenes that stand in for scanned humans.

A mannequin is a capsule torso, a sphere head and four limb capsules covered
in small Gaussians. Each part draws its tone from a random 2-4 color palette,
and the torso's front and back get different tones so that a single frontal
view genuinely under-determines the unseen side.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .scene import CameraPose, GaussianScene, RingRig, load_scene, logit, save_scene

GENERATOR_ID = "mannequin-v1"

PALETTE = np.array([
    [0.85, 0.68, 0.55],  # skin
    [0.80, 0.15, 0.12],
    [0.15, 0.35, 0.80],
    [0.95, 0.85, 0.20],
    [0.10, 0.60, 0.25],
    [0.55, 0.25, 0.65],
    [0.95, 0.95, 0.95],
    [0.15, 0.15, 0.15],
])


@dataclass(frozen=True)
class SyntheticScene:
    generator: str
    seed: int
    truth: GaussianScene
    frontal: CameraPose

    def save(self, directory) -> None:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        save_scene(self.truth, directory / "truth.scene")
        manifest = {"generator": self.generator, "seed": self.seed, "scene": "truth.scene"}
        (directory / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")

    @classmethod
    def load(cls, directory, rig: RingRig | None = None) -> "SyntheticScene":
        directory = Path(directory)
        manifest = json.loads((directory / "manifest.json").read_text())
        truth = load_scene(directory / manifest["scene"])
        rig = rig or RingRig()
        return cls(manifest["generator"], int(manifest["seed"]), truth, rig.pose_at(0.0))


def _capsule_points(rng, n, a, b, radius):
    """Area-uniform surface samples on the capsule with axis endpoints ``a`` -> ``b``.

    Returns points and their outward normals.
    """
    a, b = np.asarray(a, float), np.asarray(b, float)
    axis = b - a
    length = np.linalg.norm(axis)
    u = axis / length
    helper = np.array([1.0, 0, 0]) if abs(u[0]) < 0.9 else np.array([0, 0, 1.0])
    e1 = np.cross(u, helper)
    e1 /= np.linalg.norm(e1)
    e2 = np.cross(u, e1)
    side = 2 * math.pi * radius * length
    caps = 4 * math.pi * radius**2
    on_side = rng.random(n) < side / (side + caps)
    theta = rng.uniform(0, 2 * math.pi, n)
    s = rng.uniform(0, 1, n)
    v = rng.normal(size=(n, 3))
    v /= np.linalg.norm(v, axis=1, keepdims=True)
    radial = np.cos(theta)[:, None] * e1 + np.sin(theta)[:, None] * e2
    side_pts = a + s[:, None] * axis + radius * radial
    along = v @ u
    cap_center = np.where((along >= 0)[:, None], b, a)
    cap_pts = cap_center + radius * v
    pts = np.where(on_side[:, None], side_pts, cap_pts)
    normals = np.where(on_side[:, None], radial, v)
    return pts, normals


def mannequin(seed: int, count: int = 400, scale: float = 0.035) -> GaussianScene:
    """Ground-truth Gaussian mannequin, deterministic in ``seed``."""
    rng = np.random.default_rng(seed)
    jitter = lambda x, r=0.12: x * (1.0 + rng.uniform(-r, r))  # noqa: E731
    torso_r = jitter(0.16)
    head_r = jitter(0.11)
    limb_r = jitter(0.055)
    hip_y, neck_y = -0.05, jitter(0.33, 0.08)
    legs_x = jitter(0.085)
    arm_spread = jitter(0.1, 0.5)
    parts = [
        ("torso", (0, hip_y, 0), (0, neck_y, 0), torso_r),
        ("head", (0, neck_y + head_r + 0.04, 0), (0, neck_y + head_r + 0.0401, 0), head_r),
        ("leg_l", (-legs_x, hip_y, 0), (-legs_x, -0.62, 0), limb_r),
        ("leg_r", (legs_x, hip_y, 0), (legs_x, -0.62, 0), limb_r),
        ("arm_l", (-(torso_r + limb_r), neck_y - 0.02, 0),
         (-(torso_r + limb_r + arm_spread), -0.12, 0.02), 0.8 * limb_r),
        ("arm_r", (torso_r + limb_r, neck_y - 0.02, 0),
         (torso_r + limb_r + arm_spread, -0.12, 0.02), 0.8 * limb_r),
    ]
    n_tones = int(rng.integers(2, 5))
    tones = PALETTE[1 + rng.choice(len(PALETTE) - 1, n_tones, replace=False)]
    tone = lambda: tones[rng.integers(n_tones)]  # noqa: E731
    front_tone, back_tone = tones[0], tones[1]
    legs_tone, arms_tone = tone(), tone()
    band_tone = tone()
    band_y = rng.uniform(hip_y + 0.05, neck_y - 0.05)

    areas = np.array([
        2 * math.pi * r * np.linalg.norm(np.subtract(b, a)) + 4 * math.pi * r**2
        for _, a, b, r in parts
    ])
    counts = np.maximum(8, np.round(count * areas / areas.sum()).astype(int))
    pts_all, cols_all = [], []
    for (name, a, b, r), n in zip(parts, counts):
        pts, normals = _capsule_points(rng, int(n), a, b, r)
        if name == "torso":
            cols = np.where((normals[:, 2] >= 0)[:, None], front_tone, back_tone)
            band = (np.abs(pts[:, 1] - band_y) < 0.045) & (normals[:, 2] >= 0)
            cols = np.where(band[:, None], band_tone, cols)
        elif name == "head":
            cols = np.tile(PALETTE[0], (len(pts), 1))
            hair = (normals[:, 2] < -0.2) | (normals[:, 1] > 0.6)
            cols = np.where(hair[:, None], PALETTE[7], cols)
        elif name.startswith("leg"):
            cols = np.tile(legs_tone, (len(pts), 1))
        else:
            cols = np.tile(arms_tone, (len(pts), 1))
        pts_all.append(pts)
        cols_all.append(cols)
    pts = np.concatenate(pts_all)
    cols = np.clip(np.concatenate(cols_all) + rng.normal(0, 0.02, (len(pts), 3)), 0, 1)
    k = len(pts)
    log_scales = np.log(scale * rng.uniform(0.8, 1.25, (k, 3)))
    quats = rng.normal(size=(k, 4))
    lo, hi = pts.min(0), pts.max(0)
    pad = 0.1
    return GaussianScene(
        positions=pts,
        log_scales=log_scales,
        quats=quats,
        colors=cols,
        opacity_logits=np.full(k, float(logit(0.9))),
        bound=np.stack([lo - pad, hi + pad]),
    )


def make_synthetic_scene(seed: int, rig: RingRig | None = None, count: int = 400) -> SyntheticScene:
    rig = rig or RingRig()
    return SyntheticScene(GENERATOR_ID, seed, mannequin(seed, count), rig.pose_at(0.0))


def make_corpus(count: int, seed: int, rig: RingRig | None = None) -> list[SyntheticScene]:
    if count < 1:
        raise ValueError("corpus must contain at least one scene")
    seeds = np.random.default_rng(seed).integers(0, 2**31 - 1, size=count)
    return [make_synthetic_scene(int(s), rig) for s in seeds]
