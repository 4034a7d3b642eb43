"""Run configuration: a flat key-value text format with section prefixes.

Example::

    seed = 42
    onset = 2020-03-01
    paths.out_dir = runs/exp1
    generator.n_patients = 304
    generator.correlation = 1,0.3,0.2,0.3; 0.3,1,0.6,0.2; 0.2,0.6,1,0.2; 0.3,0.2,0.2,1
    train.epochs = 50

Relative paths resolve against the config file's directory so a run directory
is self-contained. Every command writes its fully resolved configuration next
to its outputs for provenance.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field, replace
from datetime import date
from pathlib import Path

import numpy as np

from bayesmtr.ingest import DEFAULT_ONSET
from bayesmtr.model import ModelConfig
from bayesmtr.seeding import ENV_SEED_VAR
from bayesmtr.synth import GeneratorConfig
from bayesmtr.training import TrainConfig
from bayesmtr.uncertainty import DEFAULT_T, DEFAULT_Z


class ConfigError(ValueError):
    """Invalid, missing, or unresolvable configuration."""


@dataclass
class RunConfig:
    seed: int = 0
    onset: date = DEFAULT_ONSET
    out_dir: Path = Path(".")
    cohort_csv: Path | None = None
    ground_truth_csv: Path | None = None
    checkpoint: Path | None = None
    generator: GeneratorConfig = field(default_factory=GeneratorConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    T: int = DEFAULT_T
    z: float = DEFAULT_Z


def _parse_bool(text: str) -> bool:
    lowered = text.strip().lower()
    if lowered in ("true", "1", "yes", "on"):
        return True
    if lowered in ("false", "0", "no", "off"):
        return False
    raise ConfigError(f"expected boolean, got {text!r}")


def _parse_vector(text: str, n: int) -> np.ndarray:
    parts = [p.strip() for p in text.split(",")]
    if len(parts) != n:
        raise ConfigError(f"expected {n} comma-separated values, got {len(parts)}")
    return np.array([float(p) for p in parts])


def _parse_matrix(text: str, n: int) -> np.ndarray:
    rows = [r.strip() for r in text.split(";")]
    if len(rows) != n:
        raise ConfigError(f"expected {n} semicolon-separated rows, got {len(rows)}")
    return np.stack([_parse_vector(row, n) for row in rows])


def _parse_date(text: str) -> date:
    try:
        return date.fromisoformat(text.strip())
    except ValueError:
        raise ConfigError(f"expected ISO date (YYYY-MM-DD), got {text!r}") from None


def _parse_int(text: str) -> int:
    try:
        return int(text.strip())
    except ValueError:
        raise ConfigError(f"expected integer, got {text!r}") from None


def _parse_float(text: str) -> float:
    try:
        return float(text.strip())
    except ValueError:
        raise ConfigError(f"expected number, got {text!r}") from None


def _parse_trunk(text: str) -> tuple[int, int, int]:
    vec = [_parse_int(p) for p in text.split(",")]
    if len(vec) != 3:
        raise ConfigError(f"expected 3 trunk dims, got {len(vec)}")
    return tuple(vec)


# key -> (attribute path, parser). Paths with dots set nested dataclass fields.
_KEY_PARSERS = {
    "seed": ("seed", _parse_int),
    "onset": ("onset", _parse_date),
    "paths.out_dir": ("out_dir", str),
    "paths.cohort_csv": ("cohort_csv", str),
    "paths.ground_truth_csv": ("ground_truth_csv", str),
    "paths.checkpoint": ("checkpoint", str),
    "generator.n_patients": ("generator.n_patients", _parse_int),
    "generator.visits_min": ("generator.visits_min", _parse_int),
    "generator.visits_max": ("generator.visits_max", _parse_int),
    "generator.base_std": ("generator.base_std", _parse_float),
    "generator.hetero_slope": ("generator.hetero_slope", _parse_float),
    "generator.shift": ("generator.shift", lambda t: _parse_vector(t, 4)),
    "generator.correlation": ("generator.correlation", lambda t: _parse_matrix(t, 4)),
    "generator.level_anchor": ("generator.level_anchor", lambda t: _parse_vector(t, 4)),
    "generator.level_std": ("generator.level_std", _parse_float),
    "generator.drift_std": ("generator.drift_std", _parse_float),
    "generator.visit_geom_p": ("generator.visit_geom_p", _parse_float),
    "model.d_model": ("model.d_model", _parse_int),
    "model.n_heads": ("model.n_heads", _parse_int),
    "model.d_k": ("model.d_k", _parse_int),
    "model.d_v": ("model.d_v", _parse_int),
    "model.d_latent": ("model.d_latent", _parse_int),
    "model.n_layers": ("model.n_layers", _parse_int),
    "model.max_visits": ("model.max_visits", _parse_int),
    "model.trunk_dims": ("model.trunk_dims", _parse_trunk),
    "model.variational_qv": ("model.variational_qv", _parse_bool),
    "train.epochs": ("train.epochs", _parse_int),
    "train.batch_size": ("train.batch_size", _parse_int),
    "train.weight_decay": ("train.weight_decay", _parse_float),
    "train.learning_rate": ("train.learning_rate", _parse_float),
    "train.lambda_kl": ("train.lambda_kl", _parse_float),
    "train.ablation": ("train.ablation", str),
    "train.aleatoric_head": ("train.aleatoric_head", _parse_bool),
    "train.mc_samples": ("train.mc_samples", _parse_int),
    "predict.T": ("T", _parse_int),
    "predict.z": ("z", _parse_float),
}


def parse_config_text(text: str, origin: str = "<config>") -> dict[str, str]:
    """Parse ``key = value`` lines into a raw string mapping."""
    raw: dict[str, str] = {}
    for line_no, line in enumerate(text.splitlines(), start=1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        if "=" not in stripped:
            raise ConfigError(f"{origin} line {line_no}: expected 'key = value'")
        key, _, value = stripped.partition("=")
        key = key.strip()
        if key not in _KEY_PARSERS:
            raise ConfigError(f"{origin} line {line_no}: unknown key {key!r}")
        raw[key] = value.strip()
    return raw


def _set_field(cfg: RunConfig, path: str, value) -> RunConfig:
    if "." not in path:
        return replace(cfg, **{path: value})
    section, attr = path.split(".", 1)
    inner = replace(getattr(cfg, section), **{attr: value})
    return replace(cfg, **{section: inner})


def resolve_config(
    path, seed_override: int | None = None, require_file: bool = True
) -> RunConfig:
    """Load a config file and resolve seeds, paths, and defaults.

    Seed precedence: explicit override (--seed) > config file > the
    BAYESMTR_SEED environment variable. A missing seed is a config error.
    """
    config_path = Path(path)
    if not config_path.is_file():
        if require_file:
            raise ConfigError(f"config file not found: {config_path}")
        raw = {}
        base_dir = Path(".")
    else:
        raw = parse_config_text(
            config_path.read_text(encoding="utf-8"), origin=str(config_path)
        )
        base_dir = config_path.parent

    cfg = RunConfig()
    for key, text in raw.items():
        attr_path, parser = _KEY_PARSERS[key]
        try:
            cfg = _set_field(cfg, attr_path, parser(text))
        except ConfigError as exc:
            raise ConfigError(f"key {key}: {exc}") from None
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"key {key}: {exc}") from None

    if seed_override is not None:
        seed = seed_override
    elif "seed" in raw:
        seed = cfg.seed
    elif os.environ.get(ENV_SEED_VAR):
        try:
            seed = int(os.environ[ENV_SEED_VAR])
        except ValueError:
            raise ConfigError(
                f"{ENV_SEED_VAR} must be an integer, got {os.environ[ENV_SEED_VAR]!r}"
            ) from None
    else:
        raise ConfigError(
            f"no seed: set it in the config, pass --seed, or export {ENV_SEED_VAR}"
        )

    out_dir = Path(os.path.join(base_dir, cfg.out_dir))
    cohort = (
        Path(os.path.join(base_dir, cfg.cohort_csv))
        if cfg.cohort_csv is not None
        else out_dir / "cohort.csv"
    )
    ground_truth = (
        Path(os.path.join(base_dir, cfg.ground_truth_csv))
        if cfg.ground_truth_csv is not None
        else out_dir / "ground_truth.csv"
    )
    checkpoint = (
        Path(os.path.join(base_dir, cfg.checkpoint))
        if cfg.checkpoint is not None
        else out_dir / "checkpoint.json"
    )

    cfg = replace(
        cfg,
        seed=seed,
        out_dir=out_dir,
        cohort_csv=cohort,
        ground_truth_csv=ground_truth,
        checkpoint=checkpoint,
        generator=replace(cfg.generator, onset=cfg.onset, seed=seed),
        train=replace(cfg.train, seed=seed),
    )
    try:
        # Surface invalid combinations (e.g. bad ablation name) as config errors.
        cfg.train.__post_init__()
        cfg.model.__post_init__()
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    return cfg


def _format_value(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, date):
        return value.isoformat()
    if isinstance(value, np.ndarray):
        if value.ndim == 1:
            return ",".join(repr(float(v)) for v in value)
        return "; ".join(",".join(repr(float(v)) for v in row) for row in value)
    if isinstance(value, tuple):
        return ",".join(str(v) for v in value)
    return str(value)


def emit_resolved(cfg: RunConfig) -> str:
    """Canonical text form of a fully resolved configuration."""
    values = {
        "seed": cfg.seed,
        "onset": cfg.onset,
        "paths.out_dir": cfg.out_dir,
        "paths.cohort_csv": cfg.cohort_csv,
        "paths.ground_truth_csv": cfg.ground_truth_csv,
        "paths.checkpoint": cfg.checkpoint,
        "generator.n_patients": cfg.generator.n_patients,
        "generator.visits_min": cfg.generator.visits_min,
        "generator.visits_max": cfg.generator.visits_max,
        "generator.base_std": cfg.generator.base_std,
        "generator.hetero_slope": cfg.generator.hetero_slope,
        "generator.shift": cfg.generator.shift,
        "generator.correlation": cfg.generator.correlation,
        "generator.level_anchor": cfg.generator.level_anchor,
        "generator.level_std": cfg.generator.level_std,
        "generator.drift_std": cfg.generator.drift_std,
        "generator.visit_geom_p": cfg.generator.visit_geom_p,
        "model.d_model": cfg.model.d_model,
        "model.n_heads": cfg.model.n_heads,
        "model.d_k": cfg.model.d_k,
        "model.d_v": cfg.model.d_v,
        "model.d_latent": cfg.model.d_latent,
        "model.n_layers": cfg.model.n_layers,
        "model.max_visits": cfg.model.max_visits,
        "model.trunk_dims": cfg.model.trunk_dims,
        "model.variational_qv": cfg.model.variational_qv,
        "train.epochs": cfg.train.epochs,
        "train.batch_size": cfg.train.batch_size,
        "train.weight_decay": cfg.train.weight_decay,
        "train.learning_rate": cfg.train.learning_rate,
        "train.lambda_kl": cfg.train.lambda_kl,
        "train.ablation": cfg.train.ablation,
        "train.aleatoric_head": cfg.train.aleatoric_head,
        "train.mc_samples": cfg.train.mc_samples,
        "predict.T": cfg.T,
        "predict.z": cfg.z,
    }
    lines = [f"{key} = {_format_value(values[key])}" for key in sorted(values)]
    return "\n".join(lines) + "\n"


def write_resolved(cfg: RunConfig) -> None:
    (cfg.out_dir / "resolved_config.txt").write_text(
        emit_resolved(cfg), encoding="utf-8"
    )
