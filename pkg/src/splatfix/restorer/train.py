"""Training the fixer on paired (coarse, truth) videos and restoring new ones."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass

import numpy as np
import torch

from ..errors import NumericAbort, ShapeMismatchError
from ..multiview import Video, make_cyclic, strip_cycle
from .edm import DEFAULT_SAMPLE_STEPS, NoiseSchedule, edm_sample, karras_schedule, loss_weight
from .latent import encode
from .model import FixerModel, denoise_tensor, reference_tokens

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    steps: int = 3000
    batch_size: int = 8
    lr: float = 1e-3
    betas: tuple[float, float] = (0.9, 0.99)
    grad_clip: float = 1.0
    mirror: bool = True  # add left-right mirrored copies of every sample
    seed: int = 0


def _model_video(v: Video, cyclic: bool) -> Video:
    """The paired videos are stored cyclic; a non-cyclic model sees the N views only."""
    if v.cyclic == cyclic:
        return v
    return strip_cycle(v) if v.cyclic else make_cyclic(v)


def mirror_video(v: Video) -> Video:
    """Left-right mirror of an orbit: view at azimuth a becomes the flipped view at -a."""
    n = v.n_views
    order = [(-i) % n for i in range(n)]
    frames = v.frames[order][:, :, ::-1]
    az = tuple((-v.azimuths[i]) % (2 * math.pi) for i in order)
    out = Video(frames, cyclic=False, azimuths=az)
    return make_cyclic(out) if v.cyclic else out


@dataclass
class TensorBatch:
    z_gt: torch.Tensor  # (B, F, S, C)
    z_c: torch.Tensor
    m_f: torch.Tensor   # (B, n_t, C_ref)

    def __len__(self) -> int:
        return self.z_gt.shape[0]

    def subset(self, idx) -> "TensorBatch":
        return TensorBatch(self.z_gt[idx], self.z_c[idx], self.m_f[idx])


def prepare(samples, model: FixerModel, mirror: bool = False) -> TensorBatch:
    """Encode paired samples into model-ready tensors."""
    cfg = model.cfg
    zg, zc, mf = [], [], []
    for s in samples:
        variants = [(s.truth, s.coarse, s.reference)]
        if mirror:
            variants.append((mirror_video(s.truth), mirror_video(s.coarse), s.reference[:, ::-1]))
        for truth, coarse, ref in variants:
            if truth.frames.shape != coarse.frames.shape:
                raise ShapeMismatchError("coarse and truth videos differ in shape")
            zg.append(encode(_model_video(truth, cfg.cyclic), cfg.patch).tokens)
            zc.append(encode(_model_video(coarse, cfg.cyclic), cfg.patch).tokens)
            mf.append(reference_tokens(ref, cfg.ref_grid, cfg.ref_cell).tokens)
    if not zg:
        raise ValueError("no samples to prepare")
    as_t = lambda a: torch.as_tensor(np.stack(a), dtype=torch.float32)  # noqa: E731
    return TensorBatch(as_t(zg), as_t(zc), as_t(mf))


class FixerTrainer:
    """Owns a model, its Adam state and the noise-level RNG during training."""

    def __init__(self, model: FixerModel, cfg: TrainConfig = TrainConfig()):
        self.model = model
        self.cfg = cfg
        self.opt = torch.optim.Adam(model.parameters(), lr=cfg.lr, betas=cfg.betas)
        self.gen = torch.Generator().manual_seed(cfg.seed)
        self.step_count = 0
        self.log: list[tuple[int, float, float]] = []

    def loss(self, batch: TensorBatch, sigma: torch.Tensor, noise: torch.Tensor) -> torch.Tensor:
        mcfg = self.model.cfg
        z_t = batch.z_gt + sigma[:, None, None, None] * noise
        z_c = batch.z_c
        if mcfg.aug_sigma > 0:
            z_c = z_c + mcfg.aug_sigma * torch.randn(z_c.shape, generator=self.gen)
        denoised = denoise_tensor(self.model, z_t, sigma, z_c, batch.m_f)
        w = loss_weight(sigma, mcfg.sigma_data)[:, None, None, None]
        return (w * (denoised - batch.z_gt) ** 2).mean()

    def train_step(self, batch: TensorBatch) -> float:
        mcfg = self.model.cfg
        self.model.train()
        b = len(batch)
        sigma = torch.exp(mcfg.p_mean + mcfg.p_std * torch.randn(b, generator=self.gen))
        noise = torch.randn(batch.z_gt.shape, generator=self.gen)
        loss = self.loss(batch, sigma, noise)
        if not torch.isfinite(loss):
            raise NumericAbort(
                "non-finite fixer loss",
                step=self.step_count,
                sigmas=[round(float(s), 5) for s in sigma],
                batch=b,
            )
        self.opt.zero_grad(set_to_none=True)
        loss.backward()
        if self.cfg.grad_clip:
            torch.nn.utils.clip_grad_norm_(self.model.parameters(), self.cfg.grad_clip)
        self.opt.step()
        value = float(loss.detach())
        self.log.append((self.step_count, float(torch.exp(torch.log(sigma).mean())), value))
        self.step_count += 1
        return value

    def write_log(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["step", "sigma", "loss"])
            for step, sigma, loss in self.log:
                writer.writerow([step, repr(sigma), repr(loss)])


def train_step(trainer: FixerTrainer, batch) -> float:
    """One Adam update on a list of paired samples (or a prepared batch)."""
    if not isinstance(batch, TensorBatch):
        batch = list(batch)
        if not batch:
            raise ValueError("empty batch")
        counts = {len(s.truth) for s in batch}
        if len(counts) != 1 or not all(s.truth.cyclic and s.coarse.cyclic for s in batch):
            raise ShapeMismatchError("a batch needs cyclic samples with equal frame counts")
        batch = prepare(batch, trainer.model)
    return trainer.train_step(batch)


def train_fixer(samples, model: FixerModel, cfg: TrainConfig = TrainConfig(),
                progress=None) -> FixerTrainer:
    data = prepare(samples, model, mirror=cfg.mirror)
    trainer = FixerTrainer(model, cfg)
    order_gen = torch.Generator().manual_seed(cfg.seed + 1)
    n = len(data)
    bs = min(cfg.batch_size, n)
    perm = torch.randperm(n, generator=order_gen)
    pos = 0
    for step in range(cfg.steps):
        if pos + bs > n:
            perm = torch.randperm(n, generator=order_gen)
            pos = 0
        loss = trainer.train_step(data.subset(perm[pos:pos + bs]))
        pos += bs
        if progress is not None:
            progress(step, loss)
        if step % 200 == 0:
            log.info("fixer step %d loss %.5f", step, loss)
    return trainer


def restore(model: FixerModel, coarse: Video, reference: np.ndarray,
            schedule: NoiseSchedule | None = None, seed: int = 0) -> Video:
    """Restore a coarse cyclic video; returns a video with the input's cyclic flag."""
    cfg = model.cfg
    schedule = schedule or karras_schedule(DEFAULT_SAMPLE_STEPS)
    z_c = encode(_model_video(coarse, cfg.cyclic), cfg.patch)
    m_f = reference_tokens(reference, cfg.ref_grid, cfg.ref_cell)
    out = edm_sample(model, z_c, z_c, m_f, schedule, seed=seed)
    return _model_video(out, coarse.cyclic)
