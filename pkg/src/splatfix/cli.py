"""Command-line entry point: ``splatfix <subcommand> ...``.

Every command writes ``manifest.json`` into its output directory holding the
exact argument vector, the configuration snapshot and SHA-256 checksums of
the files it produced; ``splatfix replay`` re-executes a manifest into a new
directory. Exit codes: 0 success, 2 configuration or input error, 3 stage
failure, 4 numeric abort.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import math
import os
import shutil
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

log = logging.getLogger("splatfix")

EXIT_OK, EXIT_CONFIG, EXIT_STAGE, EXIT_NUMERIC = 0, 2, 3, 4
ENV_OUT = "SPLATFIX_OUT"
ENV_THREADS = "SPLATFIX_THREADS"
EVAL_TOLERANCE = 1e-6


class InputError(Exception):
    """Bad command-line input (missing path, invalid count); maps to exit code 2."""


def _set_threads(n: int) -> None:
    import torch

    torch.set_num_threads(max(1, n))


def _out_dir(path: str) -> Path:
    p = Path(path)
    root = os.environ.get(ENV_OUT)
    if root and not p.is_absolute():
        p = Path(root) / p
    try:
        p.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise InputError(f"cannot create output directory {p}: {exc}") from exc
    return p


def _existing(path: str | None, what: str) -> Path | None:
    if path is None:
        return None
    p = Path(path)
    if not p.exists():
        raise InputError(f"{what} not found: {p}")
    return p


def _load_cfg(args, out: Path):
    """Parse ``--config`` (or defaults) and snapshot it into ``out/config.ini``."""
    from .config import dump_config, load_config
    from .pipeline import RunConfig

    if args.config:
        src = _existing(args.config, "config file")
        cfg = load_config(src)
        if src.resolve() != (out / "config.ini").resolve():
            shutil.copyfile(src, out / "config.ini")
    else:
        cfg = RunConfig()
        (out / "config.ini").write_text(dump_config(cfg))
    return cfg


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def tree_checksums(root: Path, skip=("manifest.json",)) -> dict[str, str]:
    root = Path(root)
    return {
        str(p.relative_to(root)): _sha256(p)
        for p in sorted(root.rglob("*"))
        if p.is_file() and p.name not in skip
    }


def _write_manifest(out: Path, argv: list[str], command: str, extra: dict | None = None) -> None:
    manifest = {
        "command": command,
        "argv": argv,
        "threads": int(os.environ.get(ENV_THREADS, "0")) or None,
        "outputs": tree_checksums(out),
        **(extra or {}),
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def _emit(rows: list[dict]) -> None:
    """Delimited (CSV) report on stdout."""
    if not rows:
        return
    keys = list(rows[0])
    print(",".join(keys))
    for r in rows:
        print(",".join(_fmt(r[k]) for k in keys))


def _fmt(v) -> str:
    if isinstance(v, float):
        return "nan" if math.isnan(v) else f"{v:.6f}"
    return str(v)


# --- commands ---------------------------------------------------------------
def cmd_gen_corpus(args) -> int:
    from .corpus import make_corpus
    from .scene import RingRig

    if args.count < 1:
        raise InputError("empty corpus: --count must be >= 1")
    out = _out_dir(args.out)
    scenes = make_corpus(args.count, args.seed, RingRig())
    entries = []
    for i, sc in enumerate(scenes):
        name = f"scene_{i:04d}"
        sc.save(out / name)
        entries.append({"dir": name, "seed": sc.seed, "generator": sc.generator})
    (out / "corpus.json").write_text(json.dumps({"scenes": entries}, indent=2) + "\n")
    _emit([{"scenes": len(scenes), "out": str(out)}])
    return EXIT_OK


def _load_corpus(path: Path, rig):
    from .corpus import SyntheticScene

    index = json.loads((path / "corpus.json").read_text())
    return [SyntheticScene.load(path / e["dir"], rig) for e in index["scenes"]]


def cmd_build_dataset(args) -> int:
    from .metrics import mean_view_psnr
    from .multiview import strip_cycle
    from .pipeline import build_paired_dataset, save_dataset
    from .plotting import save_contact_sheet

    corpus = _existing(args.corpus, "corpus directory")
    out = _out_dir(args.out)
    cfg = _load_cfg(args, out)
    scenes = _load_corpus(corpus, cfg.rig)
    if args.limit:
        scenes = scenes[: args.limit]
    samples = build_paired_dataset(scenes, cfg.rig, cfg.init, cfg.coarse_fit, cfg.fixer)
    save_dataset(samples, out, cfg.fixer)
    rows = []
    for s in samples:
        gt = strip_cycle(s.truth)
        c = strip_cycle(s.coarse)
        back = slice(len(gt) // 4, len(gt) - len(gt) // 4 + 1)
        rows.append({
            "scene": s.scene_id,
            "coarse_psnr": mean_view_psnr(c, gt),
            "frontal_psnr": mean_view_psnr(c.frames[:1], gt.frames[:1]),
            "back_psnr": mean_view_psnr(c.frames[back], gt.frames[back]),
        })
    with open(out / "dataset_report.csv", "w") as fh:
        fh.write(",".join(rows[0]) + "\n")
        for r in rows:
            fh.write(",".join(_fmt(v) for v in r.values()) + "\n")
    s0 = samples[0]
    save_contact_sheet({"truth": s0.truth.frames, "coarse": s0.coarse.frames}, out / "sample_0000.png")
    _emit(rows)
    return EXIT_OK


def cmd_train_fixer(args) -> int:
    import torch

    from .pipeline import load_dataset
    from .plotting import save_loss_curve
    from .restorer.checkpoint import save_checkpoint
    from .restorer.model import FixerModel
    from .restorer.train import train_fixer

    data = _existing(args.dataset, "dataset directory")
    out = _out_dir(args.out)
    cfg = _load_cfg(args, out)
    samples = load_dataset(data)
    if args.limit:
        samples = samples[: args.limit]
    fixer_cfg = cfg.fixer
    if args.mask_mode:
        fixer_cfg = replace(fixer_cfg, mask_mode=args.mask_mode)
    if args.no_condition:
        fixer_cfg = replace(fixer_cfg, condition=False)
    train_cfg = replace(cfg.train, steps=args.steps) if args.steps is not None else cfg.train
    torch.manual_seed(train_cfg.seed)
    model = FixerModel(fixer_cfg)
    trainer = train_fixer(samples, model, train_cfg)
    save_checkpoint(model, out / "fixer.ckpt", meta={"steps": train_cfg.steps, "samples": len(samples)})
    trainer.write_log(out / "train_log.csv")
    losses = [loss for _, _, loss in trainer.log]
    if losses:
        save_loss_curve({"loss": losses}, out / "train_loss.png")
    tail = losses[-50:] if losses else [math.nan]
    _emit([{"steps": train_cfg.steps, "samples": len(samples), "mask_mode": fixer_cfg.mask_mode,
            "condition": fixer_cfg.condition, "final_loss_mean50": float(np.mean(tail))}])
    return EXIT_OK


def cmd_run(args) -> int:
    from .corpus import SyntheticScene
    from .pipeline import OracleFixer, identity_fixer, reconstruct_restore_refine, save_run, truth_video
    from .plotting import save_contact_sheet, save_loss_curve
    from .multiview import render_ring
    from .scene import load_scene, read_image

    scene_dir = _existing(args.scene, "scene directory")
    ref_path = _existing(args.reference, "reference image")
    if (scene_dir is None) == (ref_path is None):
        raise InputError("give exactly one of --scene or --reference")
    coarse_path = _existing(args.coarse_scene, "coarse scene file")
    ckpt = _existing(args.checkpoint, "checkpoint")
    out = _out_dir(args.out)
    cfg = _load_cfg(args, out)
    if args.alternations is not None:
        cfg = replace(cfg, alternations=args.alternations)
    if ckpt is not None:
        cfg = replace(cfg, checkpoint=str(ckpt))
    source = SyntheticScene.load(scene_dir, cfg.rig) if scene_dir else read_image(ref_path)
    fixer = None
    if args.fixer == "identity":
        fixer = identity_fixer
    elif args.fixer == "oracle":
        if scene_dir is None:
            raise InputError("the oracle fixer needs --scene")
        fixer = OracleFixer(truth_video(source, cfg.rig))
    coarse = load_scene(coarse_path) if coarse_path else None
    result = reconstruct_restore_refine(source, cfg, fixer, coarse_scene=coarse)
    save_run(result, out)
    rows = {"coarse": result.coarse_video.frames}
    if scene_dir:
        rows = {"truth": truth_video(source, cfg.rig).frames, **rows}
    if result.restored_video is not None:
        rows["restored"] = result.restored_video.frames
        rows["refined"] = render_ring(result.refined, cfg.rig).frames
    save_contact_sheet(rows, out / "ring.png")
    curves = {}
    if result.report.coarse_fit is not None:
        curves["coarse fit"] = result.report.coarse_fit.losses
    for k, fr in enumerate(result.report.refine_fits):
        curves[f"refine fit {k}"] = fr.losses
    if curves and all(curves.values()):
        save_loss_curve(curves, out / "fit_loss.png")
    table = result.report.table()
    with open(out / "report.csv", "w") as fh:
        fh.write(",".join(table) + "\n" + ",".join(_fmt(v) for v in table.values()) + "\n")
    _emit([table])
    return EXIT_OK, {"scene": str(scene_dir.resolve()) if scene_dir else None}


def cmd_ablate(args) -> int:
    import torch

    from .pipeline import DEFAULT_CELLS, load_dataset, run_ablation
    from .plotting import save_heatmap
    from .restorer.checkpoint import save_checkpoint
    from .restorer.model import FixerModel
    from .restorer.train import train_fixer

    data = _existing(args.dataset, "dataset directory")
    out = _out_dir(args.out)
    cfg = _load_cfg(args, out)
    samples = load_dataset(data)
    if not 0 < args.holdout < len(samples):
        raise InputError(f"--holdout must be in 1..{len(samples) - 1}")
    train, test = samples[: -args.holdout], samples[-args.holdout:]
    cells = [c for c in DEFAULT_CELLS if not args.cells or c.name in args.cells]
    if args.cells and len(cells) != len(args.cells):
        raise InputError(f"unknown ablation cell in {args.cells}")
    given = dict(kv.split("=", 1) for kv in args.checkpoint or [])
    models = {}
    train_cfg = replace(cfg.train, steps=args.steps) if args.steps is not None else cfg.train
    for cell in cells:
        if cell.name in given:
            models[cell.name] = str(_existing(given[cell.name], "checkpoint"))
            continue
        if not args.train:
            from .errors import MissingCheckpointError
            raise MissingCheckpointError(f"no checkpoint for cell {cell.name!r} (pass --train to train it)")
        torch.manual_seed(train_cfg.seed)
        model = FixerModel(replace(cfg.fixer, mask_mode=cell.mask_mode, condition=cell.condition))
        trainer = train_fixer(train, model, train_cfg)
        save_checkpoint(model, out / f"{cell.name}.ckpt")
        trainer.write_log(out / f"{cell.name}_train_log.csv")
        models[cell.name] = model
    table = run_ablation(test, models, cells, steps=cfg.sample_steps, seed=cfg.sample_seed)
    table.to_csv(out / "ablation.csv")
    (out / "ablation.txt").write_text(table.to_text())
    for name, hm in table.heatmaps.items():
        hm.to_csv(out / f"heatmap_{name}.csv")
        save_heatmap(hm.matrix, out / f"heatmap_{name}.png", title=f"{name} (sigma={hm.sigma:g})")
    print(table.to_text(), end="", file=sys.stderr)
    _emit([{c: getattr(r, c) for c in table.COLUMNS} for r in table.rows])
    return EXIT_OK


def evaluate_run(run_dir: Path) -> tuple[dict, dict]:
    """Recompute a saved run's report from its persisted files: (stored, recomputed)."""
    from .config import load_config
    from .corpus import SyntheticScene
    from .metrics import mean_view_psnr
    from .multiview import load_video, make_cyclic, quantize, render_ring, strip_cycle
    from .pipeline import VIDEO_BITS, truth_video
    from .scene import load_scene

    stored = json.loads((run_dir / "report.json").read_text())
    manifest = json.loads((run_dir / "manifest.json").read_text())
    cfg = load_config(run_dir / "config.ini")
    if not manifest.get("scene"):
        raise InputError("run has no ground-truth scene; nothing to evaluate against")
    truth = strip_cycle(truth_video(SyntheticScene.load(manifest["scene"], cfg.rig), cfg.rig))

    def ring(path):
        return quantize(make_cyclic(render_ring(load_scene(path), cfg.rig)), VIDEO_BITS)

    coarse = mean_view_psnr(strip_cycle(ring(run_dir / "coarse.scene")), truth)
    restored = math.nan
    refined = coarse
    if (run_dir / "restored_video").exists():
        restored = mean_view_psnr(strip_cycle(load_video(run_dir / "restored_video")), truth)
        refined = mean_view_psnr(strip_cycle(ring(run_dir / "refined.scene")), truth)
    return stored, {"coarse_psnr": coarse, "restored_psnr": restored, "refined_psnr": refined}


def cmd_eval(args) -> int:
    run_dir = _existing(args.run, "run directory")
    stored, recomputed = evaluate_run(run_dir)
    rows, ok = [], True
    for key, value in recomputed.items():
        ref = stored.get(key)
        ref = math.nan if ref is None else float(ref)
        both_nan = math.isnan(ref) and math.isnan(value)
        diff = 0.0 if both_nan else abs(ref - value)
        good = both_nan or diff <= EVAL_TOLERANCE
        ok &= good
        rows.append({"metric": key, "stored": ref, "recomputed": value, "abs_diff": diff,
                     "status": "ok" if good else "MISMATCH"})
    _emit(rows)
    return EXIT_OK if ok else EXIT_STAGE


def cmd_replay(args) -> int:
    manifest = json.loads(_existing(args.manifest, "manifest").read_text())
    argv = list(manifest["argv"])
    i = argv.index("--out")
    argv[i + 1] = args.out
    code = main(argv)
    if code != EXIT_OK:
        return code
    produced = json.loads((_out_dir(args.out) / "manifest.json").read_text())["outputs"]
    ok = produced == manifest["outputs"]
    _emit([{"files": len(produced), "identical": ok}])
    return EXIT_OK if ok else EXIT_STAGE


# --- parser -----------------------------------------------------------------
def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="splatfix", description=__doc__.splitlines()[0])
    p.add_argument("--threads", type=int, default=None,
                   help=f"bound on worker threads (env {ENV_THREADS}); 1 is bit-exact")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-corpus", help="write a synthetic mannequin corpus")
    g.add_argument("--count", type=int, required=True)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_gen_corpus)

    b = sub.add_parser("build-dataset", help="coarse-fit every corpus scene into paired videos")
    b.add_argument("--corpus", required=True)
    b.add_argument("--config")
    b.add_argument("--limit", type=int, default=None, help="use only the first N scenes")
    b.add_argument("--out", required=True)
    b.set_defaults(func=cmd_build_dataset)

    t = sub.add_parser("train-fixer", help="train the restorer on a paired dataset")
    t.add_argument("--dataset", required=True)
    t.add_argument("--config")
    t.add_argument("--steps", type=int, default=None, help="override [train] steps")
    t.add_argument("--limit", type=int, default=None, help="train on the first N samples only")
    t.add_argument("--mask-mode", choices=("none-noncyclic", "none-cyclic", "masked-cyclic"))
    t.add_argument("--no-condition", action="store_true", help="replace the coarse latents by zeros")
    t.add_argument("--out", required=True)
    t.set_defaults(func=cmd_train_fixer)

    r = sub.add_parser("run", help="coarse fit -> restore -> refine on one scene or reference image")
    r.add_argument("--scene", help="synthetic scene directory (enables ground-truth metrics)")
    r.add_argument("--reference", help="reference image (PNG)")
    r.add_argument("--config")
    r.add_argument("--checkpoint")
    r.add_argument("--fixer", choices=("learned", "oracle", "identity"), default="learned")
    r.add_argument("--alternations", type=int, default=None)
    r.add_argument("--coarse-scene", help="reuse a persisted coarse scene instead of fitting")
    r.add_argument("--out", required=True)
    r.set_defaults(func=cmd_run)

    a = sub.add_parser("ablate", help="mask-mode x conditioning ablation on held-out samples")
    a.add_argument("--dataset", required=True)
    a.add_argument("--config")
    a.add_argument("--holdout", type=int, default=10)
    a.add_argument("--cells", nargs="*", default=None)
    a.add_argument("--checkpoint", action="append", metavar="CELL=PATH")
    a.add_argument("--train", action="store_true", help="train cells without a checkpoint")
    a.add_argument("--steps", type=int, default=None)
    a.add_argument("--out", required=True)
    a.set_defaults(func=cmd_ablate)

    e = sub.add_parser("eval", help="recompute a saved run's metrics and compare to its report")
    e.add_argument("--run", required=True)
    e.set_defaults(func=cmd_eval)

    rp = sub.add_parser("replay", help="re-execute a command manifest and compare outputs")
    rp.add_argument("--manifest", required=True)
    rp.add_argument("--out", required=True)
    rp.set_defaults(func=cmd_replay)
    return p


def main(argv: list[str] | None = None) -> int:
    from .errors import ConfigError, NumericAbort, SplatfixError, StageError

    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    threads = args.threads if args.threads is not None else int(os.environ.get(ENV_THREADS, "1"))
    os.environ[ENV_THREADS] = str(threads)
    _set_threads(threads)
    try:
        res = args.func(args)
        code, extra = res if isinstance(res, tuple) else (res, None)
        if code == EXIT_OK and args.command not in ("eval", "replay"):
            _write_manifest(_out_dir(args.out), argv, args.command, extra)
        return code
    except (ConfigError, InputError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericAbort as exc:
        print(f"numeric abort: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except StageError as exc:
        if isinstance(exc.cause, NumericAbort):
            print(f"numeric abort in {exc.stage}: {exc.cause}", file=sys.stderr)
            return EXIT_NUMERIC
        print(f"stage failure: {exc}", file=sys.stderr)
        return EXIT_STAGE
    except SplatfixError as exc:
        print(f"stage failure: {exc}", file=sys.stderr)
        return EXIT_STAGE


if __name__ == "__main__":
    sys.exit(main())
