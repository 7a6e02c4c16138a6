"""Coarse reconstruction -> ring render -> restoration -> refinement, plus the
paired-dataset builder and the mask/conditioning ablation harness."""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable

import numpy as np

from .corpus import SyntheticScene
from .errors import MissingCheckpointError, ShapeMismatchError, SplatfixError, StageError
from .metrics import AttnHeatmap, attention_stats, mean_view_psnr, ssim
from .multiview import Video, load_video, make_cyclic, quantize, render_ring, save_video, strip_cycle
from .optim import FitConfig, FitReport, fit
from .raster import render
from .restorer.model import FixerConfig, FixerModel, RefEmbedding, reference_tokens
from .restorer.train import TrainConfig, restore
from .restorer.edm import DEFAULT_SAMPLE_STEPS, karras_schedule
from .scene import (GaussianScene, InitSpec, RingRig, init_scene_from_reference, load_scene,
                    read_image, ring_poses, save_scene, write_image)

log = logging.getLogger(__name__)

VIDEO_BITS = 16


@dataclass(frozen=True, eq=False)
class PairedSample:
    coarse: Video
    truth: Video
    reference: np.ndarray
    ref_embedding: RefEmbedding
    scene_id: str = ""

    def __post_init__(self):
        c, t = self.coarse, self.truth
        if not (c.cyclic and t.cyclic):
            raise ShapeMismatchError("paired videos must both be cyclic")
        if c.frames.shape != t.frames.shape:
            raise ShapeMismatchError(f"coarse {c.frames.shape} and truth {t.frames.shape} differ")
        if c.azimuths != t.azimuths:
            raise ShapeMismatchError("coarse and truth azimuths differ")


@dataclass(frozen=True)
class RunConfig:
    rig: RingRig = RingRig()
    init: InitSpec = InitSpec()
    coarse_fit: FitConfig = FitConfig()
    refine_fit: FitConfig = FitConfig()
    fixer: FixerConfig = FixerConfig()
    train: TrainConfig = TrainConfig()
    checkpoint: str | None = None
    alternations: int = 1
    sample_steps: int = DEFAULT_SAMPLE_STEPS
    sample_seed: int = 0

    def __post_init__(self):
        if self.alternations < 0:
            raise ValueError("alternations must be >= 0")
        if self.sample_steps < 1:
            raise ValueError("sample_steps must be >= 1")
        w, h = self.rig.resolution
        if (w, h) != (self.fixer.width, self.fixer.height):
            raise ValueError(f"rig resolution {w}x{h} differs from fixer frame size "
                             f"{self.fixer.width}x{self.fixer.height}")

    @property
    def mask_mode(self) -> str:
        return self.fixer.mask_mode


def _stage(name: str, fn, *args, **kwargs):
    try:
        return fn(*args, **kwargs)
    except StageError:
        raise
    except SplatfixError as exc:
        raise StageError(name, exc) from exc


def truth_video(scene: SyntheticScene, rig: RingRig) -> Video:
    return quantize(make_cyclic(render_ring(scene.truth, rig)), VIDEO_BITS)


def reference_image(scene: SyntheticScene, rig: RingRig) -> np.ndarray:
    """The frontal (azimuth 0) render serves as the single reference image."""
    img = render(scene.truth, rig.pose_at(0.0)).image
    return quantize(Video(img[None]), VIDEO_BITS).frames[0].copy()


def coarse_reconstruct(reference: np.ndarray, rig: RingRig, init: InitSpec,
                       fit_cfg: FitConfig) -> tuple[GaussianScene, FitReport]:
    """Fit a proxy-initialized scene to the single frontal reference view."""
    frontal = rig.pose_at(0.0)
    init = replace(init, camera=frontal) if init.camera is None else init
    scene = init_scene_from_reference(reference, init)
    return fit(scene, [(reference, frontal)], fit_cfg)


def build_paired_dataset(scenes, rig: RingRig, init: InitSpec, fit_cfg: FitConfig,
                         fixer: FixerConfig = FixerConfig(), progress=None) -> list[PairedSample]:
    scenes = list(scenes)
    if not scenes:
        raise ValueError("dataset needs at least one scene")
    out = []
    for i, sc in enumerate(scenes):
        sid = f"{sc.generator}-{sc.seed}"
        try:
            truth = truth_video(sc, rig)
            ref = reference_image(sc, rig)
            coarse_scene, _ = coarse_reconstruct(ref, rig, replace(init, seed=sc.seed), fit_cfg)
            coarse = quantize(make_cyclic(render_ring(coarse_scene, rig)), VIDEO_BITS)
        except SplatfixError as exc:
            raise StageError(f"dataset:{sid}", exc) from exc
        out.append(PairedSample(coarse, truth, ref,
                                reference_tokens(ref, fixer.ref_grid, fixer.ref_cell), sid))
        if progress is not None:
            progress(i, sid)
    return out


def save_dataset(samples, directory, fixer: FixerConfig = FixerConfig()) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    names = []
    for i, s in enumerate(samples):
        name = f"sample_{i:04d}"
        d = directory / name
        save_video(s.coarse, d / "coarse", bits=VIDEO_BITS, preview=False)
        save_video(s.truth, d / "truth", bits=VIDEO_BITS, preview=False)
        write_image(d / "reference.png", s.reference, bits=VIDEO_BITS)
        names.append({"dir": name, "scene_id": s.scene_id})
    manifest = {"samples": names, "ref_grid": fixer.ref_grid, "ref_cell": fixer.ref_cell}
    (directory / "dataset.json").write_text(json.dumps(manifest, indent=2) + "\n")


def load_dataset(directory) -> list[PairedSample]:
    directory = Path(directory)
    manifest = json.loads((directory / "dataset.json").read_text())
    out = []
    for entry in manifest["samples"]:
        d = directory / entry["dir"]
        ref = read_image(d / "reference.png")
        out.append(PairedSample(
            load_video(d / "coarse"), load_video(d / "truth"), ref,
            reference_tokens(ref, manifest["ref_grid"], manifest["ref_cell"]), entry["scene_id"],
        ))
    return out


# --- fixers -----------------------------------------------------------------
# A fixer maps (coarse cyclic video, reference image) to a restored cyclic video.
Fixer = Callable[[Video, np.ndarray], Video]


def identity_fixer(coarse: Video, reference: np.ndarray) -> Video:
    return coarse


class OracleFixer:
    """Returns the ground-truth video regardless of input (loop-correctness oracle)."""

    def __init__(self, truth: Video):
        self.truth = truth

    def __call__(self, coarse: Video, reference: np.ndarray) -> Video:
        if self.truth.frames.shape != coarse.frames.shape:
            raise ShapeMismatchError("oracle truth does not match the coarse video")
        return self.truth


class LearnedFixer:
    def __init__(self, model: FixerModel, steps: int = DEFAULT_SAMPLE_STEPS, seed: int = 0):
        self.model = model
        self.schedule = karras_schedule(steps)
        self.seed = seed

    def __call__(self, coarse: Video, reference: np.ndarray) -> Video:
        return restore(self.model, coarse, reference, self.schedule, seed=self.seed)


# --- end-to-end loop --------------------------------------------------------
@dataclass
class RunReport:
    coarse_psnr: float = math.nan
    restored_psnr: list[float] = field(default_factory=list)   # one per alternation
    refined_psnr: list[float] = field(default_factory=list)
    coarse_fit: FitReport | None = None
    refine_fits: list[FitReport] = field(default_factory=list)

    @property
    def final_psnr(self) -> float:
        return self.refined_psnr[-1] if self.refined_psnr else self.coarse_psnr

    @property
    def final_restored_psnr(self) -> float:
        return self.restored_psnr[-1] if self.restored_psnr else math.nan

    def table(self) -> dict:
        return {
            "coarse_psnr": self.coarse_psnr,
            "restored_psnr": self.final_restored_psnr,
            "refined_psnr": self.final_psnr,
        }

    def to_dict(self) -> dict:
        return {
            **self.table(),
            "restored_psnr_history": self.restored_psnr,
            "refined_psnr_history": self.refined_psnr,
        }


@dataclass
class RunResult:
    refined: GaussianScene
    coarse_scene: GaussianScene
    coarse_video: Video
    restored_video: Video | None
    report: RunReport


def _ring_psnr(scene_or_video, truth: Video | None, rig: RingRig) -> float:
    if truth is None:
        return math.nan
    v = scene_or_video if isinstance(scene_or_video, Video) else render_ring(scene_or_video, rig)
    if v.cyclic:
        v = strip_cycle(v)
    return mean_view_psnr(v, strip_cycle(truth))


def reconstruct_restore_refine(source, cfg: RunConfig, fixer: Fixer | None = None,
                               coarse_scene: GaussianScene | None = None) -> RunResult:
    """Run the closed loop from a reference image or a synthetic scene.

    With a :class:`SyntheticScene` the frontal render is the reference and
    the report carries PSNR against the ground-truth ring. ``fixer`` defaults
    to the checkpoint named in ``cfg``. A precomputed ``coarse_scene`` skips
    the coarse fit (used when resuming from persisted intermediates).
    """
    rig = cfg.rig
    if isinstance(source, SyntheticScene):
        truth = _stage("render-truth", truth_video, source, rig)
        ref = _stage("reference", reference_image, source, rig)
        init = replace(cfg.init, seed=source.seed)
    else:
        truth = None
        ref = np.asarray(source, dtype=np.float64)
        init = cfg.init
    report = RunReport()
    if coarse_scene is None:
        coarse_scene, report.coarse_fit = _stage("coarse-fit", coarse_reconstruct, ref, rig, init, cfg.coarse_fit)
    coarse_video = _stage("ring-render", lambda: quantize(make_cyclic(render_ring(coarse_scene, rig)), VIDEO_BITS))
    report.coarse_psnr = _ring_psnr(coarse_video, truth, rig)
    if cfg.alternations and fixer is None:
        fixer = _stage("load-fixer", load_fixer, cfg)
    poses = ring_poses(rig)
    scene, current, restored = coarse_scene, coarse_video, None
    for k in range(cfg.alternations):
        restored = _stage("restore", lambda: quantize(fixer(current, ref), VIDEO_BITS))
        if not restored.cyclic or restored.frames.shape != current.frames.shape:
            raise StageError("restore", ShapeMismatchError("fixer returned a video of the wrong shape"))
        report.restored_psnr.append(_ring_psnr(restored, truth, rig))
        targets = list(zip(strip_cycle(restored).frames, poses))
        scene, fit_report = _stage("refine-fit", fit, scene, targets, cfg.refine_fit)
        report.refine_fits.append(fit_report)
        current = _stage("ring-render", lambda: quantize(make_cyclic(render_ring(scene, rig)), VIDEO_BITS))
        report.refined_psnr.append(_ring_psnr(current, truth, rig))
        log.info("alternation %d: restored %.3f dB, refined %.3f dB", k,
                 report.restored_psnr[-1], report.refined_psnr[-1])
    return RunResult(scene, coarse_scene, coarse_video, restored, report)


def load_fixer(cfg: RunConfig) -> LearnedFixer:
    from .restorer.checkpoint import load_checkpoint

    if not cfg.checkpoint:
        raise MissingCheckpointError("no fixer checkpoint configured")
    model, _ = load_checkpoint(cfg.checkpoint)
    return LearnedFixer(model, cfg.sample_steps, cfg.sample_seed)


def save_run(result: RunResult, directory) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    save_scene(result.coarse_scene, directory / "coarse.scene")
    save_scene(result.refined, directory / "refined.scene")
    save_video(result.coarse_video, directory / "coarse_video")
    if result.restored_video is not None:
        save_video(result.restored_video, directory / "restored_video")
    rep = result.report
    if rep.coarse_fit is not None:
        rep.coarse_fit.to_csv(directory / "coarse_fit.csv")
    for k, fr in enumerate(rep.refine_fits):
        fr.to_csv(directory / f"refine_fit_{k}.csv")
    (directory / "report.json").write_text(json.dumps(rep.to_dict(), indent=2) + "\n")


# --- ablation ---------------------------------------------------------------
@dataclass(frozen=True)
class AblationCell:
    name: str
    mask_mode: str
    condition: bool = True


DEFAULT_CELLS = (
    AblationCell("masked-cyclic", "masked-cyclic"),
    AblationCell("none-cyclic", "none-cyclic"),
    AblationCell("none-noncyclic", "none-noncyclic"),
    AblationCell("no-coarse-condition", "masked-cyclic", condition=False),
)


@dataclass
class AblationRow:
    cell: str
    mask_mode: str
    condition: bool
    coarse_psnr: float
    psnr: float
    ssim: float
    corner_mass: float
    boundary_pair_mean: float
    intermediate_mean: float


@dataclass
class AblationTable:
    rows: list[AblationRow]
    heatmaps: dict[str, AttnHeatmap]

    COLUMNS = ("cell", "mask_mode", "condition", "coarse_psnr", "psnr", "ssim",
               "corner_mass", "boundary_pair_mean", "intermediate_mean")

    def row(self, cell: str) -> AblationRow:
        for r in self.rows:
            if r.cell == cell:
                return r
        raise KeyError(cell)

    def _cells(self, r: AblationRow) -> list[str]:
        vals = [getattr(r, c) for c in self.COLUMNS]
        return [f"{v:.4f}" if isinstance(v, float) else str(v) for v in vals]

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(self.COLUMNS)
            for r in self.rows:
                w.writerow([repr(getattr(r, c)) if isinstance(getattr(r, c), float) else getattr(r, c)
                            for c in self.COLUMNS])

    def to_text(self) -> str:
        body = [list(self.COLUMNS)] + [self._cells(r) for r in self.rows]
        widths = [max(len(line[i]) for line in body) for i in range(len(self.COLUMNS))]
        lines = ["  ".join(cell.rjust(wd) for cell, wd in zip(line, widths)) for line in body]
        lines.insert(1, "  ".join("-" * wd for wd in widths))
        return "\n".join(lines) + "\n"


def evaluate_fixer(model: FixerModel, samples, steps: int = DEFAULT_SAMPLE_STEPS, seed: int = 0) -> tuple[float, float, float]:
    """Mean per-view (coarse PSNR, restored PSNR, restored SSIM) over held-out samples."""
    fixer = LearnedFixer(model, steps, seed)
    cp, rp, rs = [], [], []
    for s in samples:
        out = strip_cycle(fixer(s.coarse, s.reference))
        gt = strip_cycle(s.truth)
        cp.append(mean_view_psnr(strip_cycle(s.coarse), gt))
        rp.append(mean_view_psnr(out, gt))
        rs.append(ssim(out, gt))
    return float(np.mean(cp)), float(np.mean(rp)), float(np.mean(rs))


def run_ablation(samples, models: dict, cells=DEFAULT_CELLS, steps: int = DEFAULT_SAMPLE_STEPS, seed: int = 0,
                 probe_count: int = 4, probe_sigma: float = 1.0) -> AblationTable:
    """Score each trained cell on held-out ``samples``.

    ``models`` maps a cell name to a :class:`FixerModel` or a checkpoint path.
    Heatmaps average all layers and heads over the first ``probe_count``
    samples at ``probe_sigma``.
    """
    from .restorer.checkpoint import load_checkpoint

    samples = list(samples)
    if not samples:
        raise ValueError("ablation needs at least one held-out sample")
    rows, maps = [], {}
    for cell in cells:
        m = models.get(cell.name)
        if m is None:
            raise MissingCheckpointError(f"no trained model for ablation cell {cell.name!r}")
        if not isinstance(m, FixerModel):
            m, _ = load_checkpoint(m)
        if m.cfg.mask_mode != cell.mask_mode or m.cfg.condition != cell.condition:
            raise SplatfixError(f"model for cell {cell.name!r} was trained as "
                                f"{m.cfg.mask_mode}/condition={m.cfg.condition}")
        cp, rp, rs = evaluate_fixer(m, samples, steps, seed)
        hm = attention_stats(m, samples[:probe_count], sigma=probe_sigma, seed=seed)
        maps[cell.name] = hm
        rows.append(AblationRow(cell.name, cell.mask_mode, cell.condition, cp, rp, rs,
                                hm.corner_mass(), hm.boundary_pair_mean(), hm.intermediate_mean()))
    return AblationTable(rows, maps)
