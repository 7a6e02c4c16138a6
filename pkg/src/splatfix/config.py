"""Run configuration files: INI sections mapped onto the pipeline dataclasses.

Example::

    [rig]
    n_views = 8
    width = 32
    height = 32

    [coarse_fit]
    iterations = 300

    [fixer]
    mask_mode = masked-cyclic

    [run]
    alternations = 1

Every key is optional; unknown sections or keys and unparsable values raise
:class:`ConfigError` naming the file, line, section and key.
"""

from __future__ import annotations

import configparser
import re
from dataclasses import replace
from pathlib import Path

from .errors import ConfigError
from .optim import FitConfig
from .pipeline import RunConfig
from .raster import RenderSettings
from .restorer.model import FixerConfig
from .restorer.train import TrainConfig
from .scene import InitSpec, RingRig


def _bool(text: str) -> bool:
    t = text.strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"expected a boolean, got {text!r}")


def _optional(conv):
    def parse(text: str):
        return None if text.strip().lower() in ("", "none") else conv(text)
    return parse


def _floats(n):
    def parse(text: str):
        parts = [float(p) for p in re.split(r"[,\s]+", text.strip()) if p]
        if len(parts) != n:
            raise ValueError(f"expected {n} comma-separated numbers, got {len(parts)}")
        return tuple(parts)
    return parse


_FIT_KEYS = {
    "iterations": int, "lr": float, "betas": _floats(2), "eps": float,
    "l2_weight": float, "ssim_weight": float, "seed": int,
    "views_per_step": _optional(int), "blend": str, "check_invariants": _bool,
}

SCHEMA = {
    "rig": {"n_views": int, "radius": float, "elevation": float, "look_at": _floats(3),
            "focal": float, "width": int, "height": int},
    "init": {"count": int, "seed": int, "center": _floats(3), "height": float, "radius": float,
             "scale": _optional(float), "opacity": float},
    "coarse_fit": _FIT_KEYS,
    "refine_fit": _FIT_KEYS,
    "fixer": {"patch": int, "depth": int, "dim": int, "heads": int, "mlp_ratio": int,
              "ref_grid": int, "ref_cell": int, "mask_mode": str, "condition": _bool,
              "aug_sigma": float, "p_mean": float, "p_std": float, "seed": int},
    "train": {"steps": int, "batch_size": int, "lr": float, "betas": _floats(2),
              "grad_clip": float, "mirror": _bool, "seed": int},
    "run": {"checkpoint": _optional(str), "alternations": int, "sample_steps": int,
            "sample_seed": int},
}


def _line_index(text: str) -> dict[tuple[str, str | None], int]:
    """Line numbers of section headers and keys, for diagnostics."""
    where: dict[tuple[str, str | None], int] = {}
    section = None
    for no, raw in enumerate(text.splitlines(), 1):
        line = raw.strip()
        if not line or line[0] in "#;":
            continue
        m = re.match(r"\[([^\]]+)\]", line)
        if m:
            section = m.group(1).strip()
            where.setdefault((section, None), no)
        elif section is not None:
            key = re.split(r"[=:]", line, maxsplit=1)[0].strip().lower()
            where.setdefault((section, key), no)
    return where


def parse_config(text: str, source: str = "<config>") -> RunConfig:
    parser = configparser.ConfigParser(interpolation=None)
    try:
        parser.read_string(text, source=source)
    except configparser.Error as exc:
        raise ConfigError(f"{source}: {exc}") from exc
    lines = _line_index(text)
    values: dict[str, dict] = {}
    for section in parser.sections():
        if section not in SCHEMA:
            raise ConfigError(f"{source}:{lines.get((section, None), '?')}: unknown section [{section}]")
        values[section] = {}
        for key, raw in parser.items(section):
            conv = SCHEMA[section].get(key)
            line = lines.get((section, key), "?")
            if conv is None:
                raise ConfigError(f"{source}:{line}: [{section}] unknown key {key!r}")
            try:
                values[section][key] = conv(raw)
            except ValueError as exc:
                raise ConfigError(f"{source}:{line}: [{section}] {key}: {exc}") from exc
    try:
        return _build(values)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{source}: invalid configuration: {exc}") from exc


def _fit(section: dict) -> FitConfig:
    section = dict(section)
    blend = section.pop("blend", None)
    cfg = FitConfig(**section)
    return replace(cfg, render=RenderSettings(mode=blend)) if blend else cfg


def _build(v: dict) -> RunConfig:
    rig_v = dict(v.get("rig", {}))
    w, h = rig_v.pop("width", 32), rig_v.pop("height", 32)
    rig = RingRig(resolution=(w, h), **rig_v)
    fixer = FixerConfig(width=w, height=h, **v.get("fixer", {}))
    return RunConfig(
        rig=rig,
        init=InitSpec(**v.get("init", {})),
        coarse_fit=_fit(v.get("coarse_fit", {})),
        refine_fit=_fit(v.get("refine_fit", {})),
        fixer=fixer,
        train=TrainConfig(**v.get("train", {})),
        **v.get("run", {}),
    )


def load_config(path) -> RunConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return parse_config(text, str(path))


def _fmt(value) -> str:
    if value is None:
        return "none"
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ", ".join(repr(float(x)) for x in value)
    return repr(value) if isinstance(value, float) else str(value)


def dump_config(cfg: RunConfig) -> str:
    """Render a configuration as INI text that :func:`parse_config` reads back."""
    def pick(obj, keys):
        return {k: getattr(obj, k) for k in keys if hasattr(obj, k)}

    def fit_section(f: FitConfig):
        d = pick(f, [k for k in _FIT_KEYS if k != "blend"])
        d["blend"] = f.render.mode
        return d

    sections = {
        "rig": {**pick(cfg.rig, ["n_views", "radius", "elevation", "look_at", "focal"]),
                "width": cfg.rig.resolution[0], "height": cfg.rig.resolution[1]},
        "init": pick(cfg.init, SCHEMA["init"]),
        "coarse_fit": fit_section(cfg.coarse_fit),
        "refine_fit": fit_section(cfg.refine_fit),
        "fixer": pick(cfg.fixer, SCHEMA["fixer"]),
        "train": pick(cfg.train, SCHEMA["train"]),
        "run": pick(cfg, SCHEMA["run"]),
    }
    out = []
    for name, items in sections.items():
        out.append(f"[{name}]")
        out.extend(f"{k} = {_fmt(val)}" for k, val in items.items())
        out.append("")
    return "\n".join(out)
