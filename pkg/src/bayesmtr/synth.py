"""Reproducible synthetic cohorts with the statistical signatures the model
is meant to learn: plausible biomarker ranges, cross-target correlation,
level-dependent (heteroscedastic) noise, and a post-onset regime shift.

All latent quantities live in normalized [0, 1] units; emitted CSVs are in
raw clinical units using the same schema as :mod:`bayesmtr.ingest`. The
per-visit latent means and noise standard deviations are retained as ground
truth so uncertainty estimates can be checked against the generator.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from datetime import date, timedelta

import numpy as np

from bayesmtr.ingest import (
    BIOMARKERS,
    BiomarkerVector,
    DEFAULT_ONSET,
    Demographics,
    GENDERS,
    INCOME_CLASSES,
    PatientRecord,
    RACES,
    Visit,
    denormalize,
)
from bayesmtr.seeding import STREAM_GENERATOR, np_generator

# Cohort-level demographic mix (fractions over the vocabulary orders in
# bayesmtr.ingest).
GENDER_WEIGHTS = (0.615, 0.385)
RACE_WEIGHTS = (0.882, 0.072, 0.046, 0.0)
INCOME_WEIGHTS = (0.243, 0.368, 0.382, 0.007)
AGE_RANGE = (45, 96)

# Visit dates relative to onset: history reaches back about two years, the
# onset-era window starts three months after onset, mirroring a reporting gap.
PRE_WINDOW_DAYS = (790, 14)
POST_WINDOW_DAYS = (90, 480)

# Keep generated normalized values strictly inside (0, 1) so CSV rounding can
# never push a value across a plausibility bound.
EDGE_MARGIN = 1e-6

MAX_RESAMPLE_ATTEMPTS = 100


def default_correlation() -> np.ndarray:
    return np.array(
        [
            [1.0, 0.3, 0.2, 0.3],
            [0.3, 1.0, 0.6, 0.2],
            [0.2, 0.6, 1.0, 0.2],
            [0.3, 0.2, 0.2, 1.0],
        ]
    )


@dataclass
class GeneratorConfig:
    n_patients: int = 304
    visits_min: int = 2
    visits_max: int = 30
    onset: date = DEFAULT_ONSET
    correlation: np.ndarray = field(default_factory=default_correlation)
    base_std: float = 0.04
    hetero_slope: float = 0.08
    shift: np.ndarray = field(
        default_factory=lambda: np.array([0.04, 0.06, 0.05, -0.03])
    )
    seed: int = 0
    # Latent trajectory knobs: population anchor per biomarker, spread of the
    # per-patient random intercept, and spread of the per-patient drift slope
    # (normalized units per year).
    level_anchor: np.ndarray = field(
        default_factory=lambda: np.array([0.40, 0.30, 0.30, 0.35])
    )
    level_std: float = 0.12
    drift_std: float = 0.03
    visit_geom_p: float = 0.12


@dataclass(frozen=True)
class GroundTruthEntry:
    patient_id: str
    visit_date: date
    latent_mean: np.ndarray  # (4,) normalized units
    noise_std: np.ndarray  # (4,) normalized units


@dataclass
class GroundTruth:
    per_patient: dict[str, list[GroundTruthEntry]]
    clamped_count: int = 0

    def all_entries(self) -> list[GroundTruthEntry]:
        return [e for entries in self.per_patient.values() for e in entries]

    def target_entry(self, patient_id: str, onset: date) -> GroundTruthEntry:
        """Ground truth at the patient's first on/after-onset visit."""
        for entry in self.per_patient[patient_id]:
            if entry.visit_date >= onset:
                return entry
        raise KeyError(f"patient {patient_id} has no visit on/after {onset}")


def validate_correlation(correlation: np.ndarray) -> np.ndarray:
    corr = np.asarray(correlation, dtype=np.float64)
    if corr.shape != (4, 4):
        raise ValueError(f"correlation must be 4x4, got {corr.shape}")
    if not np.allclose(corr, corr.T, atol=1e-12):
        raise ValueError("correlation matrix must be symmetric")
    if not np.allclose(np.diag(corr), 1.0, atol=1e-12):
        raise ValueError("correlation matrix must have unit diagonal")
    eigenvalues = np.linalg.eigvalsh(corr)
    if eigenvalues.min() < -1e-10:
        raise ValueError(
            f"correlation matrix is not positive semidefinite "
            f"(min eigenvalue {eigenvalues.min():.3e})"
        )
    return corr


def cholesky_factor(correlation: np.ndarray) -> np.ndarray:
    """Lower-triangular factor of a validated correlation matrix."""
    corr = validate_correlation(correlation)
    try:
        return np.linalg.cholesky(corr)
    except np.linalg.LinAlgError:
        # Semidefinite case: jitter just enough to factor.
        return np.linalg.cholesky(corr + 1e-10 * np.eye(4))


def sample_correlated_noise(
    rng: np.random.Generator, chol_factor: np.ndarray
) -> np.ndarray:
    """Draw one correlated standard 4-vector: chol_factor @ z, z ~ N(0, I)."""
    return chol_factor @ rng.standard_normal(4)


def _sample_visit_counts(
    rng: np.random.Generator, cfg: GeneratorConfig
) -> tuple[int, int]:
    n_visits = cfg.visits_min + int(rng.geometric(cfg.visit_geom_p)) - 1
    n_visits = min(n_visits, cfg.visits_max)
    extra = n_visits - 2
    n_post = 1 + (int(rng.binomial(extra, 0.3)) if extra > 0 else 0)
    n_pre = n_visits - n_post
    if n_pre < 1:  # keep at least one history visit
        n_pre, n_post = 1, n_visits - 1
    return n_pre, n_post


def _sample_dates(
    rng: np.random.Generator, cfg: GeneratorConfig, n_pre: int, n_post: int
) -> list[date]:
    pre_lo, pre_hi = PRE_WINDOW_DAYS
    post_lo, post_hi = POST_WINDOW_DAYS
    pre_offsets = sorted(rng.integers(-pre_lo, -pre_hi, size=n_pre, endpoint=True))
    post_offsets = sorted(rng.integers(post_lo, post_hi, size=n_post, endpoint=True))
    return [cfg.onset + timedelta(days=int(o)) for o in pre_offsets + post_offsets]


def _sample_demographics(rng: np.random.Generator) -> Demographics:
    gender = GENDERS[rng.choice(len(GENDERS), p=GENDER_WEIGHTS)]
    race = RACES[rng.choice(len(RACES), p=RACE_WEIGHTS)]
    income = INCOME_CLASSES[rng.choice(len(INCOME_CLASSES), p=INCOME_WEIGHTS)]
    age = int(rng.integers(AGE_RANGE[0], AGE_RANGE[1], endpoint=True))
    return Demographics(gender=gender, race=race, income_class=income, age=age)


def generate(config: GeneratorConfig) -> tuple[list[PatientRecord], GroundTruth]:
    """Generate a cohort plus the latent means / noise stds behind it.

    Identical config (including seed) produces a bit-identical cohort. Every
    generated visit passes plausibility filtering, and every patient has at
    least one pre-onset and one post-onset visit.
    """
    chol = cholesky_factor(config.correlation)
    rng = np_generator(config.seed, STREAM_GENERATOR)

    records: list[PatientRecord] = []
    per_patient: dict[str, list[GroundTruthEntry]] = {}
    clamped = 0

    for p_idx in range(config.n_patients):
        pid = f"P{p_idx:04d}"
        demo = _sample_demographics(rng)
        n_pre, n_post = _sample_visit_counts(rng, config)
        dates = _sample_dates(rng, config, n_pre, n_post)

        intercept = config.level_anchor + config.level_std * sample_correlated_noise(
            rng, chol
        )
        slope = config.drift_std * sample_correlated_noise(rng, chol)

        first = dates[0]
        visits: list[Visit] = []
        entries: list[GroundTruthEntry] = []
        for visit_date in dates:
            years = (visit_date - first).days / 365.25
            latent = intercept + slope * years
            if visit_date >= config.onset:
                latent = latent + config.shift
            latent = np.clip(latent, 0.02, 0.98)
            noise_std = config.base_std + config.hetero_slope * latent

            value = None
            for _ in range(MAX_RESAMPLE_ATTEMPTS):
                candidate = latent + noise_std * sample_correlated_noise(rng, chol)
                if np.all(candidate >= EDGE_MARGIN) and np.all(
                    candidate <= 1.0 - EDGE_MARGIN
                ):
                    value = candidate
                    break
            if value is None:
                value = np.clip(
                    latent + noise_std * sample_correlated_noise(rng, chol),
                    EDGE_MARGIN,
                    1.0 - EDGE_MARGIN,
                )
                clamped += 1

            raw = BiomarkerVector.from_sequence(
                denormalize(float(v), name) for name, v in zip(BIOMARKERS, value)
            )
            visits.append(Visit(visit_date, raw))
            entries.append(
                GroundTruthEntry(
                    patient_id=pid,
                    visit_date=visit_date,
                    latent_mean=latent.copy(),
                    noise_std=noise_std.copy(),
                )
            )

        records.append(PatientRecord(pid, demo, tuple(visits)))
        per_patient[pid] = entries

    return records, GroundTruth(per_patient=per_patient, clamped_count=clamped)


def write_ground_truth_csv(ground_truth: GroundTruth, path) -> None:
    """Sidecar CSV: one row per visit per biomarker, normalized units."""
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["patient_id", "visit_date", "biomarker", "latent_mean", "noise_std"])
        for entries in ground_truth.per_patient.values():
            for entry in entries:
                for i, name in enumerate(BIOMARKERS):
                    writer.writerow(
                        [
                            entry.patient_id,
                            entry.visit_date.isoformat(),
                            name,
                            f"{entry.latent_mean[i]:.8f}",
                            f"{entry.noise_std[i]:.8f}",
                        ]
                    )


def read_ground_truth_csv(path) -> GroundTruth:
    # The writer emits 4 consecutive rows (one per biomarker) per visit, so
    # chunked parsing stays correct even when a patient has two visits on the
    # same date.
    per_patient: dict[str, list[GroundTruthEntry]] = {}
    with open(path, "r", encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        next(reader)
        rows = list(reader)
    if len(rows) % 4 != 0:
        raise ValueError("ground truth CSV row count is not a multiple of 4")
    for start in range(0, len(rows), 4):
        chunk = rows[start : start + 4]
        pid, visit_date = chunk[0][0], chunk[0][1]
        values = {row[2]: (float(row[3]), float(row[4])) for row in chunk}
        if set(values) != set(BIOMARKERS) or any(
            row[0] != pid or row[1] != visit_date for row in chunk
        ):
            raise ValueError(f"malformed ground truth rows near line {start + 2}")
        latent = np.array([values[name][0] for name in BIOMARKERS])
        noise = np.array([values[name][1] for name in BIOMARKERS])
        per_patient.setdefault(pid, []).append(
            GroundTruthEntry(pid, date.fromisoformat(visit_date), latent, noise)
        )
    return GroundTruth(per_patient=per_patient)
