"""Capture of temporal softmax matrices from a fixer during a probe pass."""

from __future__ import annotations

import numpy as np
import torch

from .latent import encode
from .model import FixerModel, denoise_tensor, reference_tokens
from .train import _model_video


def capture_temporal_attention(model: FixerModel, probes, sigma: float = 1.0, seed: int = 0) -> np.ndarray:
    """Temporal attention weights for every probe, layer and head.

    Each probe's truth latents are noised to ``sigma`` with seeded noise and
    passed once through the denoiser. Returns ``(probes, layers, heads, F, F)``
    with weights already averaged over spatial tokens.
    """
    probes = list(probes)
    if not probes:
        raise ValueError("attention statistics need at least one probe sample")
    cfg = model.cfg
    gen = torch.Generator().manual_seed(int(seed))
    layers = model.temporal_layers()
    out = []
    model.eval()
    try:
        for layer in layers:
            layer.capture = []
        for s in probes:
            z_gt = torch.as_tensor(encode(_model_video(s.truth, cfg.cyclic), cfg.patch).tokens, dtype=torch.float32)
            z_c = torch.as_tensor(encode(_model_video(s.coarse, cfg.cyclic), cfg.patch).tokens, dtype=torch.float32)
            m_f = torch.as_tensor(reference_tokens(s.reference, cfg.ref_grid, cfg.ref_cell).tokens, dtype=torch.float32)
            z_t = z_gt + sigma * torch.randn(z_gt.shape, generator=gen)
            with torch.no_grad():
                denoise_tensor(model, z_t[None], sigma, z_c[None], m_f[None])
            out.append(np.stack([layer.capture.pop().double().numpy() for layer in layers]))
    finally:
        for layer in layers:
            layer.capture = None
    return np.stack(out)
