"""Lossless space-to-depth "latents" used in place of a pretrained VAE."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..errors import ShapeMismatchError
from ..multiview import Video


@dataclass(frozen=True, eq=False)
class LatentVideo:
    tokens: np.ndarray  # (frames, spatial tokens, channels)
    patch: int
    height: int
    width: int
    cyclic: bool = False
    azimuths: tuple[float, ...] = ()

    def __post_init__(self):
        f, s, c = self.tokens.shape
        if s != (self.height // self.patch) * (self.width // self.patch) or c != 3 * self.patch**2:
            raise ShapeMismatchError(f"tokens {self.tokens.shape} inconsistent with {self.height}x{self.width}/p{self.patch}")

    @property
    def frames(self) -> int:
        return self.tokens.shape[0]

    def with_tokens(self, tokens) -> "LatentVideo":
        return LatentVideo(np.asarray(tokens), self.patch, self.height, self.width, self.cyclic, self.azimuths)


def patchify(v: Video, p: int) -> LatentVideo:
    frames = v.frames
    f, h, w, c = frames.shape
    if h % p or w % p:
        raise ShapeMismatchError(f"frame size {h}x{w} is not divisible by patch size {p}")
    t = frames.reshape(f, h // p, p, w // p, p, c).transpose(0, 1, 3, 2, 4, 5)
    tokens = t.reshape(f, (h // p) * (w // p), p * p * c)
    return LatentVideo(tokens.copy(), p, h, w, v.cyclic, v.azimuths)


def unpatchify(lv: LatentVideo) -> Video:
    p, h, w = lv.patch, lv.height, lv.width
    f = lv.frames
    t = lv.tokens.reshape(f, h // p, w // p, p, p, 3).transpose(0, 1, 3, 2, 4, 5)
    return Video(t.reshape(f, h, w, 3), cyclic=lv.cyclic, azimuths=lv.azimuths)


def tokens_to_frames(tokens: np.ndarray, p: int, h: int, w: int) -> np.ndarray:
    """Inverse rearrangement for a raw (F, S, C) array, without Video invariants."""
    f = tokens.shape[0]
    t = tokens.reshape(f, h // p, w // p, p, p, 3).transpose(0, 1, 3, 2, 4, 5)
    return t.reshape(f, h, w, 3)


# pixels in [0, 1] <-> centered latents in [-1, 1]
def encode(v: Video, p: int) -> LatentVideo:
    lv = patchify(v, p)
    return lv.with_tokens(2.0 * lv.tokens - 1.0)


def decode(lv: LatentVideo) -> np.ndarray:
    """Frames in [0, 1] (clamped) from centered latents."""
    frames = tokens_to_frames(lv.tokens, lv.patch, lv.height, lv.width)
    return np.clip(0.5 * (frames + 1.0), 0.0, 1.0)
