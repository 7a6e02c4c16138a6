"""EDM noise levels, preconditioning and the deterministic Heun sampler."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from ..errors import NumericAbort, ShapeMismatchError
from ..multiview import Video
from .latent import LatentVideo, decode

SIGMA_DATA = 0.5
# a desk-scale fixer restores best with one denoiser call from sigma_max; longer
# Heun chains compound its errors (see the decisions notes for measurements)
DEFAULT_SAMPLE_STEPS = 1


@dataclass(frozen=True)
class NoiseSchedule:
    sigmas: tuple[float, ...]  # strictly decreasing; the last entry may be 0
    sigma_data: float = SIGMA_DATA

    def __post_init__(self):
        s = np.asarray(self.sigmas, dtype=np.float64)
        if len(s) < 2:
            raise ValueError("a schedule needs at least a start level and an end level")
        if np.any(np.diff(s) >= 0):
            raise ValueError("noise levels must be strictly decreasing")
        if np.any(s[:-1] <= 0) or s[-1] < 0:
            raise ValueError("noise levels must be positive (the final one may be 0)")
        object.__setattr__(self, "sigmas", tuple(float(x) for x in s))

    @property
    def steps(self) -> int:
        return len(self.sigmas) - 1

    @property
    def sigma_max(self) -> float:
        return self.sigmas[0]


def karras_schedule(steps: int, sigma_min: float = 0.002, sigma_max: float = 80.0,
                    rho: float = 7.0, sigma_data: float = SIGMA_DATA) -> NoiseSchedule:
    """``steps`` levels interpolated in ``sigma**(1/rho)``, followed by 0."""
    if steps < 1:
        raise ValueError("steps must be >= 1")
    if steps == 1:
        return NoiseSchedule((sigma_max, 0.0), sigma_data)
    i = np.arange(steps)
    inv = sigma_max ** (1 / rho) + i / (steps - 1) * (sigma_min ** (1 / rho) - sigma_max ** (1 / rho))
    return NoiseSchedule(tuple(inv**rho) + (0.0,), sigma_data)


def preconditioning(sigma, sigma_data: float = SIGMA_DATA):
    """(c_skip, c_out, c_in, c_noise) for noise level ``sigma`` (tensor or float)."""
    sigma = torch.as_tensor(sigma, dtype=torch.float64 if not torch.is_tensor(sigma) else sigma.dtype)
    sd2 = sigma_data**2
    c_skip = sd2 / (sigma**2 + sd2)
    c_out = sigma * sigma_data / torch.sqrt(sigma**2 + sd2)
    c_in = 1.0 / torch.sqrt(sigma**2 + sd2)
    c_noise = torch.log(sigma) / 4.0
    return c_skip, c_out, c_in, c_noise


def loss_weight(sigma, sigma_data: float = SIGMA_DATA):
    return (sigma**2 + sigma_data**2) / (sigma * sigma_data) ** 2


def forward_diffuse(z0: LatentVideo, sigma: float, noise: LatentVideo) -> LatentVideo:
    if noise.tokens.shape != z0.tokens.shape:
        raise ShapeMismatchError(f"noise {noise.tokens.shape} does not match latents {z0.tokens.shape}")
    return z0.with_tokens(z0.tokens + sigma * noise.tokens)


def heun_sample(denoiser, x: torch.Tensor, schedule: NoiseSchedule) -> torch.Tensor:
    """Deterministic second-order EDM sampler.

    ``denoiser(x, sigma)`` returns the denoised estimate of ``x`` at level
    ``sigma``. ``x`` must already be scaled to ``schedule.sigma_max``.
    """
    sig = schedule.sigmas
    for i in range(schedule.steps):
        s_cur, s_next = sig[i], sig[i + 1]
        d = (x - denoiser(x, s_cur)) / s_cur
        x_next = x + (s_next - s_cur) * d
        if s_next > 0:
            d2 = (x_next - denoiser(x_next, s_next)) / s_next
            x_next = x + (s_next - s_cur) * 0.5 * (d + d2)
        if not torch.all(torch.isfinite(x_next)):
            raise NumericAbort("non-finite sampler state", step=i, sigma=s_cur)
        x = x_next
    return x


def edm_sample(model, like: LatentVideo, z_c: LatentVideo, m_f, schedule: NoiseSchedule, seed: int = 0) -> Video:
    """Restore a video: integrate from pure noise at ``sigma_max`` down to 0.

    ``model`` is a :class:`FixerModel` or any callable
    ``(z_t, sigma, z_c, m_f) -> denoised`` on ``(frames, tokens, channels)``
    tensors. ``like`` supplies the latent geometry (patch size, frame count,
    cyclic flag, azimuths). For cyclic output the two estimates of view 0
    (first and closing frame) are averaged so the result is a valid cyclic video.
    """
    from .model import FixerModel, denoise_tensor

    shape = like.tokens.shape
    if z_c.tokens.shape[0] != shape[0]:
        raise ShapeMismatchError(f"coarse latents have {z_c.tokens.shape[0]} frames, expected {shape[0]}")
    gen = torch.Generator().manual_seed(int(seed))
    # sampler state stays in float64; only the network runs in float32
    noise = torch.randn(shape, generator=gen, dtype=torch.float64)
    zc = torch.as_tensor(z_c.tokens, dtype=torch.float32)
    if isinstance(model, FixerModel):
        model.eval()
        mf = torch.as_tensor(np.asarray(getattr(m_f, "tokens", m_f)), dtype=torch.float32)

        def denoiser(x, sigma):
            with torch.no_grad():
                return denoise_tensor(model, x[None].float(), sigma, zc[None], mf[None])[0].double()
    else:
        def denoiser(x, sigma):
            return torch.as_tensor(model(x, sigma, z_c.tokens, m_f), dtype=x.dtype)

    x = heun_sample(denoiser, schedule.sigma_max * noise, schedule)
    out = like.with_tokens(x.numpy())
    frames = decode(out)
    if like.cyclic:
        view0 = 0.5 * (frames[0] + frames[-1])
        frames[0] = view0
        frames[-1] = view0
    return Video(frames, cyclic=like.cyclic, azimuths=like.azimuths)
