"""Desk-scale video restorer: patch latents, EDM diffusion and the fixer network."""

from .attention import MASK_SENTINEL, BoundaryMask, boundary_mask, masked_temporal_attention
from .checkpoint import load_checkpoint, save_checkpoint
from .edm import NoiseSchedule, edm_sample, forward_diffuse, karras_schedule, preconditioning
from .latent import LatentVideo, decode, encode, patchify, unpatchify
from .model import MASK_MODES, FixerConfig, FixerModel, RefEmbedding, denoise, reference_tokens
from .train import FixerTrainer, TrainConfig, restore, train_fixer, train_step

__all__ = [
    "MASK_SENTINEL", "BoundaryMask", "boundary_mask", "masked_temporal_attention",
    "load_checkpoint", "save_checkpoint",
    "NoiseSchedule", "edm_sample", "forward_diffuse", "karras_schedule", "preconditioning",
    "LatentVideo", "decode", "encode", "patchify", "unpatchify",
    "MASK_MODES", "FixerConfig", "FixerModel", "RefEmbedding", "denoise", "reference_tokens",
    "FixerTrainer", "TrainConfig", "restore", "train_fixer", "train_step",
]
