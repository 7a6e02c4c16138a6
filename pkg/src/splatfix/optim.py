"""Fitting a Gaussian scene to posed target images with Adam."""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field

import numpy as np

from .errors import NumericAbort, ShapeMismatchError
from .metrics import psnr, ssim_and_grad
from .raster import DEFAULT_SETTINGS, RenderSettings, SceneGrads, render, render_backward
from .scene import CameraPose, GaussianScene

log = logging.getLogger(__name__)

DEFAULT_GROUP_LR = {
    "positions": 0.1,
    "log_scales": 1.0,
    "quats": 1.0,
    "colors": 1.0,
    "opacity_logits": 1.0,
}


@dataclass(frozen=True)
class FitConfig:
    iterations: int = 300
    lr: float = 0.01
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    l2_weight: float = 0.8
    ssim_weight: float = 0.2
    seed: int = 0
    # relative step size per parameter group; a group missing here is frozen
    group_lr: dict = field(default_factory=lambda: dict(DEFAULT_GROUP_LR))
    # views sampled per iteration (seeded); None uses every view every step
    views_per_step: int | None = None
    render: RenderSettings = DEFAULT_SETTINGS
    check_invariants: bool = False

    def __post_init__(self):
        if self.iterations < 0:
            raise ValueError("iterations must be >= 0")
        if not self.lr > 0:
            raise ValueError("step size must be positive")
        if not all(0.0 < b < 1.0 for b in self.betas):
            raise ValueError("moment decays must lie in (0, 1)")
        if self.views_per_step is not None and self.views_per_step < 1:
            raise ValueError("views_per_step must be >= 1")


@dataclass
class FitReport:
    losses: list[float]
    psnr_history: list[list[float]]  # per iteration, per view (None when the view was not sampled)
    final_psnr: list[float]

    def to_csv(self, path) -> None:
        n_views = len(self.final_psnr)
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["iteration", "loss"] + [f"psnr_view{v}" for v in range(n_views)])
            for i, (loss, row) in enumerate(zip(self.losses, self.psnr_history)):
                writer.writerow([i, repr(loss)] + ["" if p is None else repr(p) for p in row])
            writer.writerow(["final", ""] + [repr(p) for p in self.final_psnr])


def view_loss(image: np.ndarray, target: np.ndarray, cfg: FitConfig) -> tuple[float, np.ndarray]:
    """Loss ``l2_weight * MSE + ssim_weight * (1 - SSIM)`` and its image gradient."""
    diff = image - target
    loss = cfg.l2_weight * float(np.mean(diff * diff))
    grad = cfg.l2_weight * 2.0 * diff / diff.size
    if cfg.ssim_weight:
        s, g_s = ssim_and_grad(image, target)
        loss += cfg.ssim_weight * (1.0 - s)
        grad = grad - cfg.ssim_weight * g_s
    return loss, grad


class Adam:
    def __init__(self, params: dict[str, np.ndarray], cfg: FitConfig):
        self.cfg = cfg
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.t = 0

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> dict[str, np.ndarray]:
        b1, b2 = self.cfg.betas
        self.t += 1
        out = {}
        for name, p in params.items():
            scale = self.cfg.group_lr.get(name, 0.0)
            if scale == 0.0:
                out[name] = p
                continue
            g = grads[name]
            self.m[name] = b1 * self.m[name] + (1 - b1) * g
            self.v[name] = b2 * self.v[name] + (1 - b2) * g * g
            m_hat = self.m[name] / (1 - b1**self.t)
            v_hat = self.v[name] / (1 - b2**self.t)
            out[name] = p - self.cfg.lr * scale * m_hat / (np.sqrt(v_hat) + self.cfg.eps)
        return out


def _project_params(params: dict[str, np.ndarray], bound: np.ndarray) -> dict[str, np.ndarray]:
    """Restore the parameter invariants an unconstrained step can break."""
    center = bound.mean(0)
    half = 0.75 * (bound[1] - bound[0])
    params["positions"] = np.clip(params["positions"], center - half, center + half)
    params["colors"] = np.clip(params["colors"], 0.0, 1.0)
    return params


def check_scene_invariants(scene: GaussianScene) -> None:
    norms = np.linalg.norm(scene.quats, axis=1)
    assert np.all(np.abs(norms - 1.0) <= 1e-6), "quaternion drifted off the unit sphere"
    assert np.all(scene.scales > 0), "non-positive scale"
    alpha = scene.opacities
    assert np.all((alpha > 0) & (alpha <= 1)), "opacity out of range"
    scene.validate()


def fit(scene: GaussianScene, targets: list[tuple[np.ndarray, CameraPose]],
        cfg: FitConfig = FitConfig()) -> tuple[GaussianScene, FitReport]:
    """Minimize the mean per-view image loss over every Gaussian parameter."""
    if not targets:
        raise ValueError("fit needs at least one target view")
    for img, cam in targets:
        if np.shape(img) != (cam.height, cam.width, 3):
            raise ShapeMismatchError(
                f"target of shape {np.shape(img)} does not match camera resolution {cam.resolution}"
            )
    rng = np.random.default_rng(cfg.seed)
    params = {k: v.copy() for k, v in scene.params().items()}
    adam = Adam(params, cfg)
    losses: list[float] = []
    history: list[list[float]] = []
    n_views = len(targets)
    current = scene
    for it in range(cfg.iterations):
        if cfg.views_per_step is None or cfg.views_per_step >= n_views:
            views = range(n_views)
        else:
            views = np.sort(rng.choice(n_views, cfg.views_per_step, replace=False))
        total = 0.0
        grads = SceneGrads.zeros(len(current))
        row: list[float | None] = [None] * n_views
        for v in views:
            target, cam = targets[v]
            out = render(current, cam, cfg.render, keep_cache=True)
            loss, g_img = view_loss(out.image, target, cfg)
            total += loss
            row[v] = psnr(out.image, target)
            grads = grads + render_backward(current, cam, g_img, cfg.render, forward=out)
        total /= len(views)
        if not np.isfinite(total):
            raise NumericAbort(
                "non-finite reconstruction loss",
                iteration=it,
                **{f"{k}_norm": float(np.linalg.norm(v)) for k, v in params.items()},
            )
        losses.append(total)
        history.append(row)
        g = grads.scaled(1.0 / len(views)).as_dict()
        params = _project_params(adam.step(params, g), scene.bound)
        current = GaussianScene(bound=scene.bound, **params)
        # keep the optimizer state on the renormalized quaternions
        params["quats"] = current.quats.copy()
        if cfg.check_invariants:
            check_scene_invariants(current)
        if it % 100 == 0:
            log.debug("fit iteration %d loss %.6f", it, total)
    final = [psnr(render(current, cam, cfg.render).image, img) for img, cam in targets]
    return current, FitReport(losses, history, final)
