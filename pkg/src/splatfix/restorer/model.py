"""The fixer network: a factorized spatio-temporal transformer denoiser.

Every block runs, in order, spatial self-attention inside each frame,
temporal self-attention across frames at each token location (with the
boundary mask for cyclic videos), cross-attention to the reference tokens
and an MLP. The network ``F`` is wrapped in EDM preconditioning:

    D(z_t; sigma) = c_skip z_t + c_out F([c_in z_t, z_c], c_noise, m_f)

where ``[., .]`` is channel concatenation with the coarse-render latents.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from ..errors import ShapeMismatchError
from .attention import boundary_mask, masked_temporal_attention
from .edm import SIGMA_DATA, preconditioning
from .latent import LatentVideo

MASK_MODES = ("none-noncyclic", "none-cyclic", "masked-cyclic")
MAX_FRAMES = 33


@dataclass(frozen=True)
class FixerConfig:
    height: int = 32
    width: int = 32
    patch: int = 8
    depth: int = 4
    dim: int = 128
    heads: int = 4
    mlp_ratio: int = 4
    ref_grid: int = 4        # reference tokens form a ref_grid x ref_grid layout
    ref_cell: int = 4        # each reference token is a ref_cell x ref_cell RGB block
    mask_mode: str = "masked-cyclic"
    condition: bool = True   # False replaces the coarse latents with zeros
    sigma_data: float = SIGMA_DATA
    aug_sigma: float = 0.0   # noise added to the coarse latents at train time
    p_mean: float = -1.2
    p_std: float = 1.2
    seed: int = 0

    def __post_init__(self):
        if self.mask_mode not in MASK_MODES:
            raise ValueError(f"mask_mode must be one of {MASK_MODES}, got {self.mask_mode!r}")
        if self.height % self.patch or self.width % self.patch:
            raise ValueError("frame size must be divisible by the patch size")
        if self.dim % self.heads:
            raise ValueError("dim must be divisible by heads")
        if self.height % self.ref_grid or self.width % self.ref_grid:
            raise ValueError("frame size must be divisible by ref_grid")

    @property
    def channels(self) -> int:
        return 3 * self.patch**2

    @property
    def tokens(self) -> int:
        return (self.height // self.patch) * (self.width // self.patch)

    @property
    def cyclic(self) -> bool:
        return self.mask_mode != "none-noncyclic"

    @property
    def masked(self) -> bool:
        return self.mask_mode == "masked-cyclic"

    @property
    def ref_tokens(self) -> int:
        return self.ref_grid**2

    @property
    def ref_channels(self) -> int:
        return 3 * self.ref_cell**2

    @property
    def d_k(self) -> int:
        return self.dim // self.heads

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True, eq=False)
class RefEmbedding:
    tokens: np.ndarray  # (n_t, C)

    def __post_init__(self):
        t = np.asarray(self.tokens, dtype=np.float64)
        if t.ndim != 2 or t.shape[0] < 1:
            raise ShapeMismatchError(f"reference embedding must be (n_t >= 1, C), got {t.shape}")
        if not np.all(np.isfinite(t)):
            raise ValueError("reference embedding has non-finite entries")
        object.__setattr__(self, "tokens", t)


def reference_tokens(image: np.ndarray, grid: int = 4, cell: int = 4) -> RefEmbedding:
    """Parameter-free reference tokens: the image cut into ``grid x grid`` patches,
    each block-averaged to ``cell x cell`` RGB and centered to [-1, 1].

    The fixer applies its own learned linear projection to these tokens.
    """
    img = np.asarray(image, dtype=np.float64)
    h, w = img.shape[:2]
    side = grid * cell
    if h % side or w % side:
        raise ShapeMismatchError(f"reference size {h}x{w} not divisible by {side}")
    small = img.reshape(side, h // side, side, w // side, 3).mean(axis=(1, 3))
    tok = small.reshape(grid, cell, grid, cell, 3).transpose(0, 2, 1, 3, 4).reshape(grid * grid, -1)
    return RefEmbedding(2.0 * tok - 1.0)


def _noise_features(c_noise: torch.Tensor, dim: int) -> torch.Tensor:
    half = dim // 2
    freqs = torch.exp(-math.log(1000.0) * torch.arange(half, dtype=torch.float32) / half)
    args = 100.0 * c_noise[:, None].float() * freqs[None]
    return torch.cat([torch.cos(args), torch.sin(args)], dim=-1)


class _SelfAttention(nn.Module):
    def __init__(self, dim, heads):
        super().__init__()
        self.heads = heads
        self.qkv = nn.Linear(dim, 3 * dim)
        self.out = nn.Linear(dim, dim)

    def split(self, x):
        b, n, d = x.shape
        q, k, v = self.qkv(x).reshape(b, n, 3, self.heads, d // self.heads).permute(2, 0, 3, 1, 4)
        return q, k, v

    def merge(self, y):
        b, h, n, dk = y.shape
        return self.out(y.transpose(1, 2).reshape(b, n, h * dk))

    def forward(self, x):
        q, k, v = self.split(x)
        return self.merge(F.scaled_dot_product_attention(q, k, v))


class TemporalAttention(_SelfAttention):
    """Self-attention over the frame axis with an optional boundary mask.

    ``bias`` is a learned per-head frame-pair offset added to the scores.
    """

    def __init__(self, dim, heads):
        super().__init__(dim, heads)
        self.bias = nn.Parameter(torch.zeros(heads, MAX_FRAMES, MAX_FRAMES))
        self.capture: list | None = None

    def forward(self, x, mask=None):
        n = x.shape[1]
        q, k, v = self.split(x)
        want = self.capture is not None
        res = masked_temporal_attention(q, k, v, mask, bias=self.bias[:, :n, :n], return_weights=want)
        if want:
            y, weights = res
            self.capture.append(weights.detach().mean(dim=0))  # (heads, frames, frames)
        else:
            y = res
        return self.merge(y)


class _CrossAttention(nn.Module):
    def __init__(self, dim, heads):
        super().__init__()
        self.heads = heads
        self.q = nn.Linear(dim, dim)
        self.kv = nn.Linear(dim, 2 * dim)
        self.out = nn.Linear(dim, dim)

    def forward(self, x, ctx):
        b, n, d = x.shape
        h = self.heads
        q = self.q(x).reshape(b, n, h, d // h).transpose(1, 2)
        k, v = self.kv(ctx).reshape(b, ctx.shape[1], 2, h, d // h).permute(2, 0, 3, 1, 4)
        y = F.scaled_dot_product_attention(q, k, v)
        return self.out(y.transpose(1, 2).reshape(b, n, d))


class FixerBlock(nn.Module):
    def __init__(self, cfg: FixerConfig):
        super().__init__()
        d = cfg.dim
        # shift, scale and gate per sub-layer from the noise embedding
        self.mod = nn.Linear(d, 12 * d)
        self.norm_s = nn.LayerNorm(d)
        self.spatial = _SelfAttention(d, cfg.heads)
        self.norm_t = nn.LayerNorm(d)
        self.temporal = TemporalAttention(d, cfg.heads)
        self.norm_c = nn.LayerNorm(d)
        self.cross = _CrossAttention(d, cfg.heads)
        self.norm_m = nn.LayerNorm(d)
        self.mlp = nn.Sequential(nn.Linear(d, cfg.mlp_ratio * d), nn.GELU(), nn.Linear(cfg.mlp_ratio * d, d))

    def forward(self, x, emb, ref, mask):
        b, f, s, d = x.shape
        m = self.mod(F.silu(emb))[:, None, None, :].chunk(12, dim=-1)
        mod = lambda norm, i: norm(x) * (1 + m[3 * i + 1]) + m[3 * i]  # noqa: E731
        x = x + m[2] * self.spatial(mod(self.norm_s, 0).reshape(b * f, s, d)).reshape(b, f, s, d)
        xt = mod(self.norm_t, 1).transpose(1, 2).reshape(b * s, f, d)
        x = x + m[5] * self.temporal(xt, mask).reshape(b, s, f, d).transpose(1, 2)
        x = x + m[8] * self.cross(mod(self.norm_c, 2).reshape(b, f * s, d), ref).reshape(b, f, s, d)
        return x + m[11] * self.mlp(mod(self.norm_m, 3))


class FixerModel(nn.Module):
    def __init__(self, cfg: FixerConfig = FixerConfig()):
        super().__init__()
        self.cfg = cfg
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(cfg.seed)
            self._build(cfg)

    def _build(self, cfg: FixerConfig):
        d = cfg.dim
        self.embed = nn.Linear(2 * cfg.channels, d)
        self.pos_space = nn.Parameter(0.02 * torch.randn(cfg.tokens, d))
        self.pos_time = nn.Parameter(0.02 * torch.randn(MAX_FRAMES, d))
        self.noise_mlp = nn.Sequential(nn.Linear(d, d), nn.SiLU(), nn.Linear(d, d))
        self.ref_proj = nn.Linear(cfg.ref_channels, d)
        self.blocks = nn.ModuleList(FixerBlock(cfg) for _ in range(cfg.depth))
        self.norm_out = nn.LayerNorm(d, elementwise_affine=False)
        self.mod_out = nn.Linear(d, 2 * d)
        self.head = nn.Linear(d, cfg.channels)
        for name, p in self.named_parameters():
            if p.dim() == 2 and not name.startswith(("pos_", "noise_mlp")):
                nn.init.normal_(p, std=0.02)
        # modulation starts as identity with open gates; the head starts at zero
        for blk in self.blocks:
            nn.init.zeros_(blk.mod.weight)
            nn.init.zeros_(blk.mod.bias)
            blk.mod.bias.data.view(12, d)[[2, 5, 8, 11]] = 1.0
        for lin in (self.mod_out, self.head):
            nn.init.zeros_(lin.weight)
            nn.init.zeros_(lin.bias)

    def temporal_mask(self, frames: int):
        return boundary_mask(frames).tensor() if self.cfg.masked else None

    def temporal_layers(self) -> list[TemporalAttention]:
        return [blk.temporal for blk in self.blocks]

    def forward(self, x_in, c_noise, ref):
        """Raw network on ``(B, F, S, 2C)`` inputs; returns ``(B, F, S, C)``."""
        b, f, s, _ = x_in.shape
        if f > MAX_FRAMES:
            raise ShapeMismatchError(f"at most {MAX_FRAMES} frames are supported, got {f}")
        if s != self.cfg.tokens:
            raise ShapeMismatchError(f"expected {self.cfg.tokens} tokens per frame, got {s}")
        x = self.embed(x_in) + self.pos_space[None, None] + self.pos_time[:f][None, :, None]
        emb = self.noise_mlp(_noise_features(c_noise, self.cfg.dim))
        ctx = self.ref_proj(ref)
        mask = self.temporal_mask(f)
        for blk in self.blocks:
            x = blk(x, emb, ctx, mask)
        shift, scale = self.mod_out(F.silu(emb))[:, None, None, :].chunk(2, dim=-1)
        return self.head(self.norm_out(x) * (1 + scale) + shift)


def denoise_tensor(model: FixerModel, z_t: torch.Tensor, sigma, z_c: torch.Tensor, m_f: torch.Tensor) -> torch.Tensor:
    """Preconditioned denoiser on batched tensors ``(B, F, S, C)``; ``sigma`` is a
    float or a ``(B,)`` tensor."""
    cfg = model.cfg
    if z_t.shape != z_c.shape:
        raise ShapeMismatchError(f"noisy latents {tuple(z_t.shape)} and coarse latents {tuple(z_c.shape)} differ")
    if z_t.shape[-1] != cfg.channels:
        raise ShapeMismatchError(f"model expects {cfg.channels} latent channels, got {z_t.shape[-1]}")
    sigma = torch.as_tensor(sigma, dtype=torch.float32).reshape(-1)
    if sigma.numel() == 1:
        sigma = sigma.expand(z_t.shape[0])
    c_skip, c_out, c_in, c_noise = preconditioning(sigma, cfg.sigma_data)
    bc = lambda c: c.to(z_t.dtype)[:, None, None, None]  # noqa: E731
    cond = z_c if cfg.condition else torch.zeros_like(z_c)
    x_in = torch.cat([bc(c_in) * z_t, cond], dim=-1)
    return bc(c_skip) * z_t + bc(c_out) * model(x_in, c_noise, m_f)


def denoise(model: FixerModel, z_t: LatentVideo, sigma: float, z_c: LatentVideo, m_f: RefEmbedding) -> LatentVideo:
    """Single-video convenience wrapper around :func:`denoise_tensor`."""
    if z_t.tokens.shape[:2] != z_c.tokens.shape[:2]:
        raise ShapeMismatchError("noisy and coarse latents must share frame and token dims")
    with torch.no_grad():
        out = denoise_tensor(
            model,
            torch.as_tensor(z_t.tokens, dtype=torch.float32)[None],
            sigma,
            torch.as_tensor(z_c.tokens, dtype=torch.float32)[None],
            torch.as_tensor(m_f.tokens, dtype=torch.float32)[None],
        )[0]
    return z_t.with_tokens(out.double().numpy())
