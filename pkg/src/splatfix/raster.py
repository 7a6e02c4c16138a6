"""Forward splatting renderer and its hand-derived backward pass.

Each Gaussian is projected to a screen-space ellipse and contributes a
per-pixel weight ``w_i(u) = a_i * exp(-0.5 (u - u_i)^T S_i^-1 (u - u_i))``.
The default blend is the normalized weighted average ``sum w_i c_i / sum w_i``
with Gaussians visited in a stable front-to-back depth order; a saturated
front-to-back alpha-compositing blend is available as ``mode="composite"``.

Tiles only restrict which Gaussians are evaluated for a block of pixels. A
Gaussian is dropped from a tile when its weight there is provably below
``weight_floor``, so the tiled path agrees with :func:`render_bruteforce`
to far below display precision.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, fields
from typing import NamedTuple

import numpy as np

from .errors import EmptySceneError, ShapeMismatchError
from .scene import CameraPose, Gaussian3D, GaussianScene, quat_to_rotmat

EPS_COV = 0.3
TAU_BG = 1e-4
WEIGHT_FLOOR = 1e-12
ALPHA_MAX = 0.99


@dataclass(frozen=True)
class RenderSettings:
    background: tuple[float, float, float] = (0.0, 0.0, 0.0)
    mode: str = "normalized"  # or "composite"
    tau_bg: float = TAU_BG
    eps_cov: float = EPS_COV
    weight_floor: float = WEIGHT_FLOOR
    tile: int = 16

    def __post_init__(self):
        if self.mode not in ("normalized", "composite"):
            raise ValueError(f"unknown blend mode {self.mode!r}")


DEFAULT_SETTINGS = RenderSettings()


@dataclass(frozen=True)
class Splat2D:
    center: np.ndarray
    cov2d: np.ndarray
    depth: float
    color: np.ndarray
    opacity: float

    @property
    def conic(self) -> np.ndarray:
        return np.linalg.inv(self.cov2d)

    def extent(self, weight_floor: float = WEIGHT_FLOOR) -> float:
        """Screen radius beyond which the weight is below ``weight_floor``."""
        return _extent_sigmas(self.opacity, weight_floor) * math.sqrt(np.linalg.eigvalsh(self.cov2d)[-1])


@dataclass
class RenderOutput:
    image: np.ndarray
    weight_sum: np.ndarray
    tau_bg: float = TAU_BG
    # per-tile weights kept for render_backward; not part of the value
    cache: object = field(default=None, repr=False, compare=False)

    @property
    def coverage(self) -> np.ndarray:
        return self.weight_sum > self.tau_bg


def _extent_sigmas(opacity, weight_floor):
    ratio = np.maximum(np.asarray(opacity, dtype=np.float64) / weight_floor, 1.0)
    return np.sqrt(2.0 * np.log(ratio))


def _jacobian(t: np.ndarray, focal: float) -> np.ndarray:
    tx, ty, tz = t[..., 0], t[..., 1], t[..., 2]
    J = np.zeros(t.shape[:-1] + (2, 3))
    J[..., 0, 0] = focal / tz
    J[..., 0, 2] = -focal * tx / tz**2
    J[..., 1, 1] = focal / tz
    J[..., 1, 2] = -focal * ty / tz**2
    return J


def project_gaussian(g: Gaussian3D, cam: CameraPose, eps_cov: float = EPS_COV,
                     weight_floor: float = WEIGHT_FLOOR) -> Splat2D | None:
    """Project one Gaussian; ``None`` means culled (behind the near plane or off-frame)."""
    t = cam.rotation @ g.position + cam.translation
    if t[2] <= cam.near:
        return None
    J = _jacobian(t, cam.focal)
    T = J @ cam.rotation
    cov2d = T @ g.covariance @ T.T + eps_cov * np.eye(2)
    center = cam.focal * t[:2] / t[2] + np.array(cam.principal)
    splat = Splat2D(center, cov2d, float(t[2]), np.asarray(g.color), float(g.opacity))
    r = splat.extent(weight_floor)
    if (center[0] + r < 0 or center[0] - r > cam.width
            or center[1] + r < 0 or center[1] - r > cam.height):
        return None
    return splat


def pixel_weight(s: Splat2D, u) -> float:
    d = np.asarray(u, dtype=np.float64) - s.center
    return float(s.opacity * math.exp(-0.5 * d @ s.conic @ d))


class _Projection(NamedTuple):
    t: np.ndarray        # camera-space positions (K, 3)
    J: np.ndarray        # projection Jacobians (K, 2, 3)
    T: np.ndarray        # J @ W (K, 2, 3)
    R: np.ndarray        # Gaussian rotations (K, 3, 3)
    scales: np.ndarray   # (K, 3)
    cov3d: np.ndarray    # (K, 3, 3)
    conic: np.ndarray    # inverse of the floored 2D covariance (K, 2, 2)
    mean2d: np.ndarray   # (K, 2)
    alpha: np.ndarray    # (K,)
    radius: np.ndarray   # cull radius in pixels (K,)
    order: np.ndarray    # visible Gaussian indices, front to back


def _project_all(scene: GaussianScene, cam: CameraPose, settings: RenderSettings) -> _Projection:
    W = cam.rotation
    t = scene.positions @ W.T + cam.translation
    front = t[:, 2] > cam.near
    tz_safe = np.where(front, t[:, 2], 1.0)
    t_safe = np.concatenate([t[:, :2], tz_safe[:, None]], axis=1)
    J = _jacobian(t_safe, cam.focal)
    T = J @ W
    R = quat_to_rotmat(scene.quats)
    scales = scene.scales
    cov3d = np.einsum("kij,kj,klj->kil", R, scales**2, R)
    cov2d = T @ cov3d @ T.transpose(0, 2, 1) + settings.eps_cov * np.eye(2)
    a, b, c = cov2d[:, 0, 0], cov2d[:, 0, 1], cov2d[:, 1, 1]
    det = a * c - b * b
    conic = np.stack([np.stack([c, -b], -1), np.stack([-b, a], -1)], -2) / det[:, None, None]
    mean2d = cam.focal * t_safe[:, :2] / tz_safe[:, None] + np.array(cam.principal)
    lam_max = 0.5 * (a + c) + np.sqrt(0.25 * (a - c) ** 2 + b * b)
    alpha = scene.opacities
    radius = _extent_sigmas(alpha, settings.weight_floor) * np.sqrt(lam_max)
    onscreen = (
        (mean2d[:, 0] + radius >= 0) & (mean2d[:, 0] - radius <= cam.width)
        & (mean2d[:, 1] + radius >= 0) & (mean2d[:, 1] - radius <= cam.height)
    )
    visible = np.flatnonzero(front & onscreen & (radius > 0))
    order = visible[np.argsort(t[visible, 2], kind="stable")]
    return _Projection(t_safe, J, T, R, scales, cov3d, conic, mean2d, alpha, radius, order)


def _tiles(cam: CameraPose, proj: _Projection, tile: int):
    """Yield (row slice, col slice, pixel centers, gaussian indices) per tile."""
    m = proj.mean2d[proj.order]
    r = proj.radius[proj.order]
    for y0 in range(0, cam.height, tile):
        y1 = min(y0 + tile, cam.height)
        for x0 in range(0, cam.width, tile):
            x1 = min(x0 + tile, cam.width)
            hit = (
                (m[:, 0] + r >= x0) & (m[:, 0] - r <= x1)
                & (m[:, 1] + r >= y0) & (m[:, 1] - r <= y1)
            )
            ys, xs = np.mgrid[y0:y1, x0:x1]
            px = np.stack([xs.ravel() + 0.5, ys.ravel() + 0.5], axis=1)
            yield slice(y0, y1), slice(x0, x1), px, proj.order[hit]


def _tile_weights(px, idx, proj):
    d = px[:, None, :] - proj.mean2d[idx][None, :, :]
    con = proj.conic[idx]
    dx, dy = d[..., 0], d[..., 1]
    power = -0.5 * (con[:, 0, 0] * dx * dx + 2.0 * con[:, 0, 1] * dx * dy + con[:, 1, 1] * dy * dy)
    w = proj.alpha[idx] * np.exp(power)
    return dx, dy, w


def _blend(w, colors, bg, settings):
    """Blend weights (P, G) of depth-ordered splats; returns pixel colors and weight sums."""
    wsum = w.sum(axis=1)
    if settings.mode == "normalized":
        covered = wsum > settings.tau_bg
        safe = np.where(covered, wsum, 1.0)
        out = np.where(covered[:, None], (w @ colors) / safe[:, None], bg)
        return out, wsum
    a = np.minimum(w, ALPHA_MAX)
    trans = np.cumprod(1.0 - a, axis=1)
    t_before = np.concatenate([np.ones((len(w), 1)), trans[:, :-1]], axis=1)
    out = (a * t_before) @ colors + trans[:, -1:] * bg
    return out, wsum


def _check_scene(scene: GaussianScene):
    if len(scene) == 0:
        raise EmptySceneError("cannot render an empty scene")


def render(scene: GaussianScene, cam: CameraPose, settings: RenderSettings = DEFAULT_SETTINGS,
           keep_cache: bool = False) -> RenderOutput:
    """Tiled forward pass. ``keep_cache`` stores the per-tile weights so a
    following :func:`render_backward` call can skip recomputing them."""
    _check_scene(scene)
    proj = _project_all(scene, cam, settings)
    bg = np.asarray(settings.background, dtype=np.float64)
    image = np.empty((cam.height, cam.width, 3))
    wsum = np.zeros((cam.height, cam.width))
    tiles = []
    for rows, cols, px, idx in _tiles(cam, proj, settings.tile):
        h, w_ = rows.stop - rows.start, cols.stop - cols.start
        if len(idx) == 0:
            image[rows, cols] = bg
            continue
        dx, dy, w = _tile_weights(px, idx, proj)
        out, ws = _blend(w, scene.colors[idx], bg, settings)
        image[rows, cols] = out.reshape(h, w_, 3)
        wsum[rows, cols] = ws.reshape(h, w_)
        if keep_cache:
            tiles.append((rows, cols, idx, dx, dy, w))
    cache = (scene, cam, settings, proj, tiles) if keep_cache else None
    return RenderOutput(image, wsum, settings.tau_bg, cache)


def render_bruteforce(scene: GaussianScene, cam: CameraPose,
                      settings: RenderSettings = DEFAULT_SETTINGS) -> RenderOutput:
    """Reference evaluator: every Gaussian in front of the camera, every pixel, no tiles.

    Deliberately scalar (one Gaussian, one pixel at a time) so that it shares
    no vectorized code with :func:`render`.
    """
    _check_scene(scene)
    splats = []
    for i in range(len(scene)):
        g = scene.gaussian(i)
        t = cam.rotation @ g.position + cam.translation
        if t[2] <= cam.near:
            continue
        J = _jacobian(t, cam.focal)
        T = J @ cam.rotation
        cov2d = T @ g.covariance @ T.T + settings.eps_cov * np.eye(2)
        center = cam.focal * t[:2] / t[2] + np.array(cam.principal)
        s = Splat2D(center, cov2d, float(t[2]), g.color, g.opacity)
        splats.append((s.depth, i, s))
    splats.sort(key=lambda e: (e[0], e[1]))
    bg = np.asarray(settings.background, dtype=np.float64)
    image = np.empty((cam.height, cam.width, 3))
    wsum = np.zeros((cam.height, cam.width))
    conics = [s.conic for _, _, s in splats]
    cols_ = np.array([s.color for _, _, s in splats]).reshape(-1, 3)
    for row in range(cam.height):
        for col in range(cam.width):
            u = np.array([col + 0.5, row + 0.5])
            ws = []
            for (_, _, s), con in zip(splats, conics):
                d = u - s.center
                ws.append(s.opacity * math.exp(-0.5 * (d @ con @ d)))
            ws = np.array(ws)
            total = ws.sum()
            wsum[row, col] = total
            if settings.mode == "normalized":
                image[row, col] = (ws @ cols_) / total if total > settings.tau_bg else bg
            else:
                acc = np.zeros(3)
                trans = 1.0
                for wi, ci in zip(ws, cols_):
                    a = min(wi, ALPHA_MAX)
                    acc += a * trans * ci
                    trans *= 1.0 - a
                image[row, col] = acc + trans * bg
    return RenderOutput(image, wsum, settings.tau_bg)


@dataclass
class SceneGrads:
    """Gradients with the same layout as :meth:`GaussianScene.params`."""

    positions: np.ndarray
    log_scales: np.ndarray
    quats: np.ndarray
    colors: np.ndarray
    opacity_logits: np.ndarray

    @classmethod
    def zeros(cls, k: int) -> "SceneGrads":
        return cls(np.zeros((k, 3)), np.zeros((k, 3)), np.zeros((k, 4)), np.zeros((k, 3)), np.zeros(k))

    def as_dict(self) -> dict[str, np.ndarray]:
        return {f.name: getattr(self, f.name) for f in fields(self)}

    def __add__(self, other: "SceneGrads") -> "SceneGrads":
        return SceneGrads(**{k: v + getattr(other, k) for k, v in self.as_dict().items()})

    def scaled(self, s: float) -> "SceneGrads":
        return SceneGrads(**{k: v * s for k, v in self.as_dict().items()})

    def norms(self) -> dict[str, float]:
        return {k: float(np.linalg.norm(v)) for k, v in self.as_dict().items()}


# dR/dq for q = (w, x, y, z), indexed [component][row][col] as functions of q
def _rot_quat_jacobian(q: np.ndarray) -> np.ndarray:
    w, x, y, z = q[:, 0], q[:, 1], q[:, 2], q[:, 3]
    o = np.zeros_like(w)
    dw = [[o, -2 * z, 2 * y], [2 * z, o, -2 * x], [-2 * y, 2 * x, o]]
    dx = [[o, 2 * y, 2 * z], [2 * y, -4 * x, -2 * w], [2 * z, 2 * w, -4 * x]]
    dy = [[-4 * y, 2 * x, 2 * w], [2 * x, o, 2 * z], [-2 * w, 2 * z, -4 * y]]
    dz = [[-4 * z, -2 * w, 2 * x], [2 * w, -4 * z, 2 * y], [2 * x, 2 * y, o]]
    # -> (K, 4, 3, 3)
    return np.stack([np.stack([np.stack(r, -1) for r in m], -2) for m in (dw, dx, dy, dz)], 1)


def render_backward(scene: GaussianScene, cam: CameraPose, grad_image: np.ndarray,
                    settings: RenderSettings = DEFAULT_SETTINGS,
                    forward: RenderOutput | None = None) -> SceneGrads:
    """Gradient of ``L = sum(grad_image * render(scene, cam).image)`` w.r.t. every
    stored scene parameter (log-scales, opacity logits, raw quaternions).

    ``forward`` may be the output of ``render(..., keep_cache=True)`` for the
    same scene, camera and settings.
    """
    _check_scene(scene)
    grad_image = np.asarray(grad_image, dtype=np.float64)
    if grad_image.shape != (cam.height, cam.width, 3):
        raise ShapeMismatchError(
            f"grad_image shape {grad_image.shape} does not match camera ({cam.height}, {cam.width}, 3)"
        )
    k = len(scene)
    cached = forward.cache if forward is not None else None
    if cached is not None and cached[0] is scene and cached[1] is cam and cached[2] == settings:
        proj, tiles = cached[3], cached[4]
    else:
        proj = _project_all(scene, cam, settings)
        tiles = [
            (rows, cols, idx, *_tile_weights(px, idx, proj))
            for rows, cols, px, idx in _tiles(cam, proj, settings.tile)
            if len(idx)
        ]
    bg = np.asarray(settings.background, dtype=np.float64)
    g_color = np.zeros((k, 3))
    g_alpha = np.zeros(k)
    # per-Gaussian sums of dL/dw * w * {dx, dy, dx^2, dx dy, dy^2}
    s_x, s_y, s_xx, s_xy, s_yy = (np.zeros(k) for _ in range(5))
    for rows, cols, idx, dx, dy, w in tiles:
        g = grad_image[rows, cols].reshape(-1, 3)
        colors = scene.colors[idx]
        if settings.mode == "normalized":
            wsum = w.sum(axis=1)
            covered = wsum > settings.tau_bg
            inv = np.where(covered, 1.0 / np.where(covered, wsum, 1.0), 0.0)
            out = (w @ colors) * inv[:, None]
            wn = w * inv[:, None]
            g_color[idx] += wn.T @ g
            # dL/dw_ip = g_p . (c_i - C_p) / W_p
            gw = ((g @ colors.T) - np.sum(g * out, axis=1, keepdims=True)) * inv[:, None]
        else:
            a = np.minimum(w, ALPHA_MAX)
            trans = np.cumprod(1.0 - a, axis=1)
            t_before = np.concatenate([np.ones((len(w), 1)), trans[:, :-1]], axis=1)
            contrib = (a * t_before)[:, :, None] * colors[None, :, :]  # (P, G, 3)
            tail = trans[:, -1:, None] * bg[None, None, :]
            after = np.cumsum(contrib[:, ::-1], axis=1)[:, ::-1] - contrib + tail
            g_color[idx] += (a * t_before).T @ g
            ga = np.einsum("pc,pgc->pg", g, t_before[:, :, None] * colors[None] - after / (1.0 - a)[:, :, None])
            gw = np.where(w < ALPHA_MAX, ga, 0.0)
        gww = gw * w
        g_alpha[idx] += gww.sum(axis=0) / proj.alpha[idx]
        s_x[idx] += (gww * dx).sum(0)
        s_y[idx] += (gww * dy).sum(0)
        s_xx[idx] += (gww * dx * dx).sum(0)
        s_xy[idx] += (gww * dx * dy).sum(0)
        s_yy[idx] += (gww * dy * dy).sum(0)

    con = proj.conic
    # d power / d mean = conic @ d
    g_mean = np.stack([con[:, 0, 0] * s_x + con[:, 0, 1] * s_y, con[:, 1, 0] * s_x + con[:, 1, 1] * s_y], 1)
    # d power / d conic = -0.5 d d^T
    g_conic = -0.5 * np.stack([np.stack([s_xx, s_xy], -1), np.stack([s_xy, s_yy], -1)], -2)
    g_cov2d = -con @ g_conic @ con
    T, Wc = proj.T, cam.rotation
    g_cov3d = T.transpose(0, 2, 1) @ g_cov2d @ T
    g_T = 2.0 * g_cov2d @ T @ proj.cov3d
    g_J = g_T @ Wc.T
    f = cam.focal
    tx, ty, tz = proj.t[:, 0], proj.t[:, 1], proj.t[:, 2]
    g_t = np.einsum("kij,ki->kj", proj.J, g_mean)
    g_t[:, 0] += g_J[:, 0, 2] * (-f / tz**2)
    g_t[:, 1] += g_J[:, 1, 2] * (-f / tz**2)
    g_t[:, 2] += (
        (g_J[:, 0, 0] + g_J[:, 1, 1]) * (-f / tz**2)
        + g_J[:, 0, 2] * (2 * f * tx / tz**3)
        + g_J[:, 1, 2] * (2 * f * ty / tz**3)
    )
    g_pos = g_t @ Wc

    R, s = proj.R, proj.scales
    M = R * s[:, None, :]
    g_M = 2.0 * g_cov3d @ M
    g_scale = np.einsum("kij,kij->kj", R, g_M)
    g_R = g_M * s[:, None, :]
    dR = _rot_quat_jacobian(scene.quats)
    g_qhat = np.einsum("kij,kqij->kq", g_R, dR)
    q = scene.quats
    g_q = g_qhat - q * np.sum(q * g_qhat, axis=1, keepdims=True)

    alpha = proj.alpha
    untouched = np.ones(k, dtype=bool)
    untouched[proj.order] = False
    grads = SceneGrads(
        positions=g_pos,
        log_scales=g_scale * s,
        quats=g_q,
        colors=g_color,
        opacity_logits=g_alpha * alpha * (1.0 - alpha),
    )
    for arr in grads.as_dict().values():
        arr[untouched] = 0.0
    return grads
