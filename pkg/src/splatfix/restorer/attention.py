"""Boundary attention mask for cyclic videos and masked temporal attention.

In a cyclic video frame ``N`` repeats frame ``0``. The mask removes the four
attention interactions among those two boundary frames, so neither attends to
itself or to its duplicate; every other pair is untouched.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np
import torch

from ..errors import ShapeMismatchError

MASK_SENTINEL = -1e9


@dataclass(frozen=True, eq=False)
class BoundaryMask:
    matrix: np.ndarray  # (N+1, N+1), entries 0 or MASK_SENTINEL

    @property
    def n_frames(self) -> int:
        return self.matrix.shape[0]

    @property
    def masked(self) -> np.ndarray:
        return self.matrix <= MASK_SENTINEL

    def tensor(self, dtype=torch.float32) -> torch.Tensor:
        return torch.tensor(self.matrix, dtype=dtype)


def boundary_mask(n_frames: int) -> BoundaryMask:
    if n_frames < 2:
        raise ValueError(f"boundary mask needs at least 2 frames, got {n_frames}")
    if n_frames == 2:
        warnings.warn("with 2 frames the boundary mask blocks every attention entry", stacklevel=2)
    n = n_frames - 1
    m = np.zeros((n_frames, n_frames))
    for i, j in ((0, 0), (0, n), (n, 0), (n, n)):
        m[i, j] = MASK_SENTINEL
    m.setflags(write=False)
    return BoundaryMask(m)


def masked_temporal_attention(q: torch.Tensor, k: torch.Tensor, v: torch.Tensor,
                              mask: BoundaryMask | torch.Tensor | None = None,
                              bias: torch.Tensor | None = None,
                              return_weights: bool = False):
    """``softmax(q k^T / sqrt(d_k) + bias + mask) v`` over the frame axis.

    Inputs are ``(..., frames, d_k)``; every leading index (spatial token,
    head, batch) is an independent attention problem. Rows whose every
    entry is masked get all-zero weights.
    """
    frames, d_k = q.shape[-2], q.shape[-1]
    if k.shape[-2] != frames or v.shape[-2] != frames:
        raise ShapeMismatchError("q, k, v must share the frame axis")
    scores = q @ k.transpose(-2, -1) / math.sqrt(d_k)
    if bias is not None:
        scores = scores + bias
    blocked = None
    if mask is not None:
        m = mask.tensor(scores.dtype) if isinstance(mask, BoundaryMask) else mask.to(scores.dtype)
        if m.shape != (frames, frames):
            raise ShapeMismatchError(f"mask {tuple(m.shape)} does not match {frames} frames")
        scores = scores + m
        blocked = m <= MASK_SENTINEL
    weights = torch.softmax(scores, dim=-1)
    if blocked is not None:
        # the sentinel already underflows to exact zeros; fully blocked rows need an explicit zero
        keep = (~blocked).to(weights.dtype)
        row_open = keep.sum(-1, keepdim=True) > 0
        weights = torch.where(row_open, weights * keep, torch.zeros_like(weights))
    out = weights @ v
    return (out, weights) if return_weights else out
