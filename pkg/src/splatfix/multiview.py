"""Orbital multi-view videos and their cyclic form.

A cyclic video over ``N`` views stores ``N + 1`` frames for views
``0, 1, ..., N-1, 0``: the closing frame is a literal copy of frame 0.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image as PILImage

from .errors import CorruptVideoError, ShapeMismatchError
from .raster import DEFAULT_SETTINGS, RenderSettings, render
from .scene import GaussianScene, RingRig, read_image, ring_poses, write_image

VIDEO_FORMAT = "splatfix-video"
VIDEO_VERSION = 1


@dataclass(frozen=True, eq=False)
class Video:
    frames: np.ndarray  # (F, H, W, 3)
    cyclic: bool = False
    azimuths: tuple[float, ...] = ()

    def __post_init__(self):
        frames = np.array(self.frames, dtype=np.float64, copy=True)
        if frames.ndim != 4 or frames.shape[-1] != 3 or len(frames) == 0:
            raise ShapeMismatchError(f"video frames must be (F, H, W, 3) with F >= 1, got {frames.shape}")
        az = tuple(float(a) for a in self.azimuths) if len(self.azimuths) else tuple(
            2 * np.pi * i / len(frames) for i in range(len(frames))
        )
        if len(az) != len(frames):
            raise ShapeMismatchError(f"{len(az)} azimuths for {len(frames)} frames")
        if self.cyclic:
            if len(frames) < 2:
                raise CorruptVideoError("a cyclic video needs at least two frames")
            if not np.array_equal(frames[0], frames[-1]):
                raise CorruptVideoError("closing frame differs from frame 0")
            if not np.isclose(np.mod(az[-1] - az[0] + np.pi, 2 * np.pi) - np.pi, 0.0):
                raise CorruptVideoError("closing azimuth differs from the first azimuth")
        frames.setflags(write=False)
        object.__setattr__(self, "frames", frames)
        object.__setattr__(self, "azimuths", az)

    def __len__(self) -> int:
        return len(self.frames)

    @property
    def n_views(self) -> int:
        return len(self) - 1 if self.cyclic else len(self)

    @property
    def resolution(self) -> tuple[int, int]:
        return self.frames.shape[2], self.frames.shape[1]

    def equals(self, other: "Video") -> bool:
        return (
            self.cyclic == other.cyclic
            and self.azimuths == other.azimuths
            and np.array_equal(self.frames, other.frames)
        )


def render_ring(scene: GaussianScene, rig: RingRig, settings: RenderSettings = DEFAULT_SETTINGS) -> Video:
    poses = ring_poses(rig)
    frames = np.stack([render(scene, cam, settings).image for cam in poses])
    return Video(frames, cyclic=False, azimuths=tuple(rig.azimuths))


def make_cyclic(v: Video) -> Video:
    if v.cyclic:
        raise CorruptVideoError("video is already cyclic")
    frames = np.concatenate([v.frames, v.frames[:1]])
    return Video(frames, cyclic=True, azimuths=v.azimuths + v.azimuths[:1])


def strip_cycle(v: Video) -> Video:
    if not v.cyclic:
        raise CorruptVideoError("video is not cyclic")
    if not np.array_equal(v.frames[0], v.frames[-1]):
        raise CorruptVideoError("closing frame differs from frame 0")
    return Video(v.frames[:-1], cyclic=False, azimuths=v.azimuths[:-1])


def save_video(v: Video, directory, bits: int = 16, preview: bool = True) -> None:
    """Numbered PNG frames plus ``manifest.json``; optionally an animated ``preview.gif``."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    names = []
    for i, frame in enumerate(v.frames):
        name = f"frame_{i:03d}.png"
        write_image(directory / name, frame, bits=bits)
        names.append(name)
    manifest = {
        "format": VIDEO_FORMAT,
        "version": VIDEO_VERSION,
        "frame_count": len(v),
        "cyclic": v.cyclic,
        "azimuths": list(v.azimuths),
        "bits": bits,
        "frames": names,
    }
    (directory / "manifest.json").write_text(json.dumps(manifest, indent=2) + "\n")
    if preview:
        imgs = [PILImage.fromarray(np.round(np.clip(f, 0, 1) * 255).astype(np.uint8)) for f in v.frames]
        imgs[0].save(directory / "preview.gif", save_all=True, append_images=imgs[1:], duration=120, loop=0)


def load_video(directory) -> Video:
    directory = Path(directory)
    manifest = json.loads((directory / "manifest.json").read_text())
    if manifest.get("format") != VIDEO_FORMAT:
        raise ShapeMismatchError(f"{directory}: not a video manifest")
    frames = np.stack([read_image(directory / name) for name in manifest["frames"]])
    if len(frames) != manifest["frame_count"]:
        raise ShapeMismatchError(f"{directory}: manifest frame count mismatch")
    return Video(frames, cyclic=bool(manifest["cyclic"]), azimuths=tuple(manifest["azimuths"]))


def quantize(v: Video, bits: int = 16) -> Video:
    """The video as it will read back from disk at ``bits`` per channel."""
    scale = 2**bits - 1
    return Video(np.round(np.clip(v.frames, 0, 1) * scale) / scale, v.cyclic, v.azimuths)
