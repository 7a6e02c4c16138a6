"""Gaussian scenes, pinhole cameras, the orbital ring rig and image I/O.

Conventions: world space is right-handed with +y up. Cameras follow the
OpenCV convention (x right, y down, +z forward). Pixel ``(row, col)`` has
its center at image coordinate ``(col + 0.5, row + 0.5)``. Images are
``float64`` arrays of shape ``(H, W, 3)`` with values in ``[0, 1]``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import cv2
import numpy as np

from .errors import EmptySceneError, InvalidRigError, InvalidSpecError, ShapeMismatchError

SCENE_FORMAT = "splatfix-scene"
SCENE_VERSION = 1


def _frozen(a, dtype=np.float64) -> np.ndarray:
    out = np.array(a, dtype=dtype, copy=True)
    out.setflags(write=False)
    return out


def sigmoid(x):
    return 1.0 / (1.0 + np.exp(-x))


def logit(p):
    p = np.asarray(p, dtype=np.float64)
    return np.log(p) - np.log1p(-p)


def quat_to_rotmat(q: np.ndarray) -> np.ndarray:
    """Rotation matrices for unit quaternions ``(w, x, y, z)``; works on ``(..., 4)``."""
    q = np.asarray(q, dtype=np.float64)
    w, x, y, z = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    R = np.empty(q.shape[:-1] + (3, 3))
    R[..., 0, 0] = 1 - 2 * (y * y + z * z)
    R[..., 0, 1] = 2 * (x * y - w * z)
    R[..., 0, 2] = 2 * (x * z + w * y)
    R[..., 1, 0] = 2 * (x * y + w * z)
    R[..., 1, 1] = 1 - 2 * (x * x + z * z)
    R[..., 1, 2] = 2 * (y * z - w * x)
    R[..., 2, 0] = 2 * (x * z - w * y)
    R[..., 2, 1] = 2 * (y * z + w * x)
    R[..., 2, 2] = 1 - 2 * (x * x + y * y)
    return R


@dataclass(frozen=True)
class Gaussian3D:
    position: np.ndarray
    scale: np.ndarray
    rotation: np.ndarray  # unit quaternion (w, x, y, z)
    color: np.ndarray
    opacity: float

    def __post_init__(self):
        scale = np.asarray(self.scale, dtype=np.float64)
        if scale.shape != (3,) or np.any(scale <= 0):
            raise InvalidSpecError(f"scale must be three positive numbers, got {scale}")
        if not 0.0 < self.opacity <= 1.0:
            raise InvalidSpecError(f"opacity must lie in (0, 1], got {self.opacity}")
        q = np.asarray(self.rotation, dtype=np.float64)
        object.__setattr__(self, "position", _frozen(self.position))
        object.__setattr__(self, "scale", _frozen(scale))
        object.__setattr__(self, "rotation", _frozen(q / np.linalg.norm(q)))
        object.__setattr__(self, "color", _frozen(self.color))

    @property
    def covariance(self) -> np.ndarray:
        R = quat_to_rotmat(self.rotation)
        return R @ np.diag(self.scale**2) @ R.T


@dataclass(frozen=True, eq=False)
class GaussianScene:
    """Struct-of-arrays Gaussian scene in the optimizer's parameterization.

    Scales are stored as logs and opacities as logits so that any real-valued
    parameter vector maps to a valid scene. Quaternions are renormalized on
    construction.
    """

    positions: np.ndarray
    log_scales: np.ndarray
    quats: np.ndarray
    colors: np.ndarray
    opacity_logits: np.ndarray
    bound: np.ndarray = field(default=None)  # (2, 3): min corner, max corner

    PARAM_NAMES = ("positions", "log_scales", "quats", "colors", "opacity_logits")

    def __post_init__(self):
        pos = np.asarray(self.positions, dtype=np.float64).reshape(-1, 3)
        k = len(pos)
        shapes = {"log_scales": (k, 3), "quats": (k, 4), "colors": (k, 3), "opacity_logits": (k,)}
        for name, shape in shapes.items():
            arr = np.asarray(getattr(self, name), dtype=np.float64)
            if arr.shape != shape:
                raise ShapeMismatchError(f"{name} has shape {arr.shape}, expected {shape}")
        q = np.asarray(self.quats, dtype=np.float64)
        norms = np.linalg.norm(q, axis=1, keepdims=True)
        if np.any(norms == 0):
            raise InvalidSpecError("zero quaternion")
        bound = self.bound
        if bound is None:
            bound = (
                np.stack([pos.min(0), pos.max(0)]) if k else np.zeros((2, 3))
            )
        bound = np.asarray(bound, dtype=np.float64)
        if bound.shape != (2, 3):
            raise ShapeMismatchError(f"bound has shape {bound.shape}, expected (2, 3)")
        object.__setattr__(self, "positions", _frozen(pos))
        object.__setattr__(self, "log_scales", _frozen(self.log_scales))
        object.__setattr__(self, "quats", _frozen(q / norms))
        object.__setattr__(self, "colors", _frozen(self.colors))
        object.__setattr__(self, "opacity_logits", _frozen(self.opacity_logits))
        object.__setattr__(self, "bound", _frozen(bound))

    def __len__(self) -> int:
        return len(self.positions)

    @classmethod
    def from_gaussians(cls, gaussians, bound=None) -> "GaussianScene":
        gaussians = list(gaussians)
        return cls(
            positions=np.array([g.position for g in gaussians]).reshape(-1, 3),
            log_scales=np.log(np.array([g.scale for g in gaussians]).reshape(-1, 3)),
            quats=np.array([g.rotation for g in gaussians]).reshape(-1, 4),
            colors=np.array([g.color for g in gaussians]).reshape(-1, 3),
            opacity_logits=logit(np.array([min(g.opacity, 1 - 1e-12) for g in gaussians])),
            bound=bound,
        )

    def gaussian(self, i: int) -> Gaussian3D:
        return Gaussian3D(
            position=self.positions[i],
            scale=np.exp(self.log_scales[i]),
            rotation=self.quats[i],
            color=self.colors[i],
            opacity=float(self.opacities[i]),
        )

    @property
    def scales(self) -> np.ndarray:
        return np.exp(self.log_scales)

    @property
    def opacities(self) -> np.ndarray:
        return sigmoid(self.opacity_logits)

    def covariances(self) -> np.ndarray:
        R = quat_to_rotmat(self.quats)
        s2 = self.scales**2
        return np.einsum("kij,kj,klj->kil", R, s2, R)

    def params(self) -> dict[str, np.ndarray]:
        return {name: getattr(self, name) for name in self.PARAM_NAMES}

    def replace(self, **params) -> "GaussianScene":
        merged = self.params()
        merged.update(params)
        return GaussianScene(bound=self.bound, **merged)

    def permuted(self, order) -> "GaussianScene":
        order = np.asarray(order)
        return self.replace(**{k: v[order] for k, v in self.params().items()})

    def validate(self) -> None:
        """Check the invariants a renderable scene must satisfy."""
        if len(self) == 0:
            raise EmptySceneError("scene has no gaussians")
        for name, arr in self.params().items():
            if not np.all(np.isfinite(arr)):
                raise InvalidSpecError(f"non-finite values in {name}")
        center = self.bound.mean(0)
        half = 0.75 * (self.bound[1] - self.bound[0])  # 1.5x the box, about its center
        if np.any(np.abs(self.positions - center) > half + 1e-12):
            raise InvalidSpecError("gaussian positions escape 1.5x the scene bound")

    def equals(self, other: "GaussianScene") -> bool:
        return all(
            np.array_equal(a, b)
            for a, b in zip(
                (*self.params().values(), self.bound), (*other.params().values(), other.bound)
            )
        )


def save_scene(scene: GaussianScene, path) -> None:
    """Write the versioned text scene format (one record per Gaussian).

    Floats are written with ``repr`` so that a load reproduces them bit-exactly.
    """
    lines = [
        f"{SCENE_FORMAT} {SCENE_VERSION}",
        f"count {len(scene)}",
        "bound " + " ".join(repr(float(v)) for v in scene.bound.ravel()),
        "# x y z log_sx log_sy log_sz qw qx qy qz r g b opacity_logit",
    ]
    rows = np.concatenate(
        [scene.positions, scene.log_scales, scene.quats, scene.colors, scene.opacity_logits[:, None]],
        axis=1,
    )
    for row in rows:
        lines.append(" ".join(repr(float(v)) for v in row))
    Path(path).write_text("\n".join(lines) + "\n")


def load_scene(path) -> GaussianScene:
    text = Path(path).read_text().splitlines()
    head = text[0].split()
    if len(head) != 2 or head[0] != SCENE_FORMAT:
        raise InvalidSpecError(f"{path}: not a scene file")
    if int(head[1]) != SCENE_VERSION:
        raise InvalidSpecError(f"{path}: unsupported scene version {head[1]}")
    count = int(text[1].split()[1])
    bound = np.array([float(v) for v in text[2].split()[1:]]).reshape(2, 3)
    rows = [ln for ln in text[3:] if ln.strip() and not ln.startswith("#")]
    if len(rows) != count:
        raise InvalidSpecError(f"{path}: header says {count} gaussians, found {len(rows)}")
    data = np.array([[float(v) for v in ln.split()] for ln in rows]).reshape(count, 14)
    # quats are stored already normalized; bypass renormalization to stay bit-exact
    scene = GaussianScene(
        positions=data[:, 0:3],
        log_scales=data[:, 3:6],
        quats=data[:, 6:10],
        colors=data[:, 10:13],
        opacity_logits=data[:, 13],
        bound=bound,
    )
    object.__setattr__(scene, "quats", _frozen(data[:, 6:10]))
    return scene


@dataclass(frozen=True, eq=False)
class CameraPose:
    """Pinhole camera. ``rotation``/``translation`` map world to camera space."""

    rotation: np.ndarray
    translation: np.ndarray
    focal: float
    principal: tuple[float, float]
    resolution: tuple[int, int]  # (width, height)
    near: float = 0.01

    def __post_init__(self):
        R = np.asarray(self.rotation, dtype=np.float64)
        if R.shape != (3, 3) or not np.allclose(R @ R.T, np.eye(3), atol=1e-6):
            raise InvalidSpecError("camera rotation must be orthonormal")
        if abs(np.linalg.det(R) - 1.0) > 1e-6:
            raise InvalidSpecError("camera rotation must have determinant 1")
        if not self.focal > 0:
            raise InvalidSpecError("focal length must be positive")
        w, h = self.resolution
        if w < 8 or h < 8:
            raise InvalidSpecError(f"resolution {self.resolution} is below 8x8")
        object.__setattr__(self, "rotation", _frozen(R))
        object.__setattr__(self, "translation", _frozen(self.translation))
        object.__setattr__(self, "principal", (float(self.principal[0]), float(self.principal[1])))
        object.__setattr__(self, "resolution", (int(w), int(h)))

    @property
    def width(self) -> int:
        return self.resolution[0]

    @property
    def height(self) -> int:
        return self.resolution[1]

    @property
    def center(self) -> np.ndarray:
        """Camera position in world space."""
        return -self.rotation.T @ self.translation

    @classmethod
    def look_at(cls, eye, target, focal, resolution, principal=None, up=(0.0, 1.0, 0.0)):
        eye = np.asarray(eye, dtype=np.float64)
        forward = np.asarray(target, dtype=np.float64) - eye
        forward /= np.linalg.norm(forward)
        right = np.cross(forward, up)
        if np.linalg.norm(right) < 1e-9:
            raise InvalidSpecError("view direction is parallel to the up vector")
        right /= np.linalg.norm(right)
        down = np.cross(forward, right)
        R = np.stack([right, down, forward])
        if principal is None:
            principal = (resolution[0] / 2.0, resolution[1] / 2.0)
        return cls(R, -R @ eye, focal, principal, resolution)

    def with_resolution(self, resolution) -> "CameraPose":
        sx = resolution[0] / self.width
        sy = resolution[1] / self.height
        return CameraPose(
            self.rotation,
            self.translation,
            self.focal * sx,
            (self.principal[0] * sx, self.principal[1] * sy),
            resolution,
            self.near,
        )


@dataclass(frozen=True)
class RingRig:
    n_views: int = 8
    radius: float = 2.0
    elevation: float = 0.0
    look_at: tuple[float, float, float] = (0.0, 0.0, 0.0)
    focal: float = 40.0
    resolution: tuple[int, int] = (32, 32)

    @property
    def azimuths(self) -> np.ndarray:
        return 2.0 * np.pi * np.arange(self.n_views) / self.n_views

    def pose_at(self, azimuth: float) -> CameraPose:
        ce = math.cos(self.elevation)
        offset = self.radius * np.array(
            [ce * math.sin(azimuth), math.sin(self.elevation), ce * math.cos(azimuth)]
        )
        target = np.asarray(self.look_at, dtype=np.float64)
        return CameraPose.look_at(target + offset, target, self.focal, self.resolution)


def ring_poses(rig: RingRig) -> list[CameraPose]:
    """Cameras evenly spaced in azimuth around ``rig.look_at``; pose 0 is frontal (+z)."""
    if rig.n_views < 1:
        raise InvalidRigError(f"n_views must be >= 1, got {rig.n_views}")
    if not rig.radius > 0:
        raise InvalidRigError("ring radius must be positive")
    return [rig.pose_at(a) for a in rig.azimuths]


@dataclass(frozen=True)
class InitSpec:
    """Coarse-initialization settings: Gaussian count and the capsule proxy.

    The capsule stands vertical (along +y) at ``center``; ``height`` is the
    length of its cylindrical part. ``camera`` is the frontal view used to
    back-project reference colors; when omitted, a frontal ring camera at
    ``view_radius`` matching the reference resolution is used.
    """

    count: int = 200
    seed: int = 0
    center: tuple[float, float, float] = (0.0, 0.0, 0.0)
    height: float = 0.8
    radius: float = 0.25
    scale: float | None = None
    opacity: float = 0.8
    view_radius: float = 2.0
    focal: float = 40.0
    camera: CameraPose | None = None


def sample_capsule_surface(n, center, height, radius, rng) -> np.ndarray:
    """Area-uniform samples on a vertical capsule surface."""
    side = 2 * math.pi * radius * height
    caps = 4 * math.pi * radius**2
    on_side = rng.random(n) < side / (side + caps)
    theta = rng.uniform(0.0, 2 * math.pi, n)
    y = rng.uniform(-height / 2, height / 2, n)
    v = rng.normal(size=(n, 3))
    v /= np.linalg.norm(v, axis=1, keepdims=True)
    pts = np.empty((n, 3))
    pts[:, 0] = np.where(on_side, radius * np.sin(theta), radius * v[:, 0])
    pts[:, 2] = np.where(on_side, radius * np.cos(theta), radius * v[:, 2])
    cap_y = radius * v[:, 1] + np.sign(v[:, 1]) * height / 2
    pts[:, 1] = np.where(on_side, y, cap_y)
    return pts + np.asarray(center, dtype=np.float64)


def sample_image_bilinear(img: np.ndarray, uv: np.ndarray) -> np.ndarray:
    """Bilinear lookup at image coordinates ``uv`` (pixel centers at +0.5), edge-clamped."""
    h, w = img.shape[:2]
    x = np.clip(uv[:, 0] - 0.5, 0, w - 1)
    y = np.clip(uv[:, 1] - 0.5, 0, h - 1)
    x0 = np.floor(x).astype(int)
    y0 = np.floor(y).astype(int)
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    fx = (x - x0)[:, None]
    fy = (y - y0)[:, None]
    top = img[y0, x0] * (1 - fx) + img[y0, x1] * fx
    bot = img[y1, x0] * (1 - fx) + img[y1, x1] * fx
    return top * (1 - fy) + bot * fy


def frontal_camera(spec: InitSpec, resolution) -> CameraPose:
    if spec.camera is not None:
        return spec.camera
    rig = RingRig(n_views=1, radius=spec.view_radius, look_at=spec.center,
                  focal=spec.focal, resolution=tuple(resolution))
    return rig.pose_at(0.0)


def init_scene_from_reference(ref: np.ndarray, spec: InitSpec) -> GaussianScene:
    """Place ``spec.count`` isotropic Gaussians on the capsule proxy and color
    them by projecting each one into the frontal reference view."""
    ref = check_image(ref)
    if spec.count < 1:
        raise InvalidSpecError(f"gaussian count must be >= 1, got {spec.count}")
    rng = np.random.default_rng(spec.seed)
    if spec.count == 1:
        pts = np.asarray(spec.center, dtype=np.float64)[None, :]
    else:
        pts = sample_capsule_surface(spec.count, spec.center, spec.height, spec.radius, rng)
    cam = frontal_camera(spec, (ref.shape[1], ref.shape[0]))
    t = pts @ cam.rotation.T + cam.translation
    uv = cam.focal * t[:, :2] / t[:, 2:3] + np.array(cam.principal)
    colors = np.clip(sample_image_bilinear(ref, uv), 0.0, 1.0)
    if spec.scale is not None:
        s = spec.scale
    else:
        area = 2 * math.pi * spec.radius * spec.height + 4 * math.pi * spec.radius**2
        s = 0.5 * math.sqrt(area / spec.count)
    k = spec.count
    pad = spec.radius + 0.5 * s
    c = np.asarray(spec.center, dtype=np.float64)
    half = np.array([pad, spec.height / 2 + pad, pad])
    return GaussianScene(
        positions=pts,
        log_scales=np.full((k, 3), math.log(s)),
        quats=np.tile([1.0, 0.0, 0.0, 0.0], (k, 1)),
        colors=colors,
        opacity_logits=np.full(k, float(logit(spec.opacity))),
        bound=np.stack([c - half, c + half]),
    )


def check_image(img) -> np.ndarray:
    img = np.asarray(img, dtype=np.float64)
    if img.ndim != 3 or img.shape[2] != 3 or img.size == 0:
        raise ShapeMismatchError(f"expected an (H, W, 3) image, got shape {img.shape}")
    if not np.all(np.isfinite(img)):
        raise InvalidSpecError("image contains non-finite values")
    return img


def write_image(path, img: np.ndarray, bits: int = 8) -> None:
    """Write PNG (or PPM) with 8- or 16-bit channels."""
    img = np.clip(check_image(img), 0.0, 1.0)
    if bits == 8:
        data = np.round(img * 255.0).astype(np.uint8)
    elif bits == 16:
        data = np.round(img * 65535.0).astype(np.uint16)
    else:
        raise ValueError("bits must be 8 or 16")
    if not cv2.imwrite(str(path), np.ascontiguousarray(data[:, :, ::-1])):
        raise OSError(f"could not write image {path}")


def read_image(path) -> np.ndarray:
    data = cv2.imread(str(path), cv2.IMREAD_UNCHANGED)
    if data is None:
        raise OSError(f"could not read image {path}")
    if data.ndim == 2:
        data = np.repeat(data[:, :, None], 3, axis=2)
    data = data[:, :, 2::-1] if data.shape[2] >= 3 else data
    scale = 65535.0 if data.dtype == np.uint16 else 255.0
    return np.ascontiguousarray(data, dtype=np.float64) / scale
