"""Monte-Carlo predictive inference with epistemic/aleatoric decomposition.

T stochastic forward passes give T (means, log_vars) pairs. Following the law
of total variance, the variance of the sampled means is the epistemic
component and the average of the predicted variances is the aleatoric
component. Bands are mean +/- z * sqrt(epistemic + aleatoric), clamped to
[0, 1] in normalized units.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np
import torch

from bayesmtr.encoder import TokenizedExample
from bayesmtr.ingest import BIOMARKERS, PLAUSIBLE_RANGES, denormalize
from bayesmtr.model import BiomarkerTransformer

DEFAULT_T = 50
DEFAULT_Z = 1.96


@dataclass
class PredictionWithUncertainty:
    mean: np.ndarray  # (4,) normalized units
    epistemic_var: np.ndarray  # (4,)
    aleatoric_var: np.ndarray  # (4,)
    n_samples: int


def mc_predict(
    model: BiomarkerTransformer,
    tok: TokenizedExample,
    T: int,
    generator: torch.Generator | None = None,
) -> list[tuple[np.ndarray, np.ndarray]]:
    """T independent stochastic forward passes; deterministic given the seed."""
    if T < 1:
        raise ValueError("T must be >= 1")
    samples = []
    with torch.no_grad():
        for _ in range(T):
            means, log_vars = model(tok, generator=generator)
            samples.append((means.numpy().copy(), log_vars.numpy().copy()))
    return samples


def decompose(samples: list[tuple[np.ndarray, np.ndarray]]) -> PredictionWithUncertainty:
    """Law-of-total-variance split over Monte-Carlo samples."""
    if len(samples) < 2:
        raise ValueError("need at least 2 samples to estimate epistemic variance")
    means = np.stack([m for m, _ in samples])
    log_vars = np.stack([lv for _, lv in samples])
    return PredictionWithUncertainty(
        mean=means.mean(axis=0),
        epistemic_var=means.var(axis=0, ddof=1),
        aleatoric_var=np.exp(log_vars).mean(axis=0),
        n_samples=len(samples),
    )


def band(
    p: PredictionWithUncertainty, z: float = DEFAULT_Z
) -> tuple[np.ndarray, np.ndarray]:
    """(lower, upper) = mean -/+ z * total std, clamped to [0, 1]."""
    if z < 0:
        raise ValueError("z must be >= 0")
    half = z * np.sqrt(p.epistemic_var + p.aleatoric_var)
    lower = np.clip(p.mean - half, 0.0, 1.0)
    upper = np.clip(p.mean + half, 0.0, 1.0)
    return lower, upper


def predict_with_uncertainty(
    model: BiomarkerTransformer,
    tok: TokenizedExample,
    T: int = DEFAULT_T,
    generator: torch.Generator | None = None,
) -> PredictionWithUncertainty:
    return decompose(mc_predict(model, tok, T, generator))


def calibration_check(
    model: BiomarkerTransformer,
    test_set: list[TokenizedExample],
    T: int = DEFAULT_T,
    z: float = DEFAULT_Z,
    generator: torch.Generator | None = None,
) -> np.ndarray:
    """Fraction of test targets inside the z-band, per biomarker."""
    if not test_set:
        raise ValueError("empty test set")
    hits = np.zeros(4)
    for tok in test_set:
        pred = predict_with_uncertainty(model, tok, T, generator)
        lower, upper = band(pred, z)
        y = tok.target.numpy()
        hits += (y >= lower) & (y <= upper)
    return hits / len(test_set)


def prediction_rows(
    patient_id: str, pred: PredictionWithUncertainty, z: float = DEFAULT_Z
) -> list[list]:
    """CSV rows for one prediction, in normalized and raw clinical units.

    Raw-unit variances are the normalized ones scaled by the squared range
    width; band endpoints denormalize directly because the mapping is affine
    and monotone.
    """
    lower, upper = band(pred, z)
    rows = []
    for i, name in enumerate(BIOMARKERS):
        lo, hi, _ = PLAUSIBLE_RANGES[name]
        span = hi - lo
        rows.append(
            [
                patient_id,
                name,
                repr(float(pred.mean[i])),
                repr(float(pred.epistemic_var[i])),
                repr(float(pred.aleatoric_var[i])),
                repr(float(lower[i])),
                repr(float(upper[i])),
                "normalized",
            ]
        )
        rows.append(
            [
                patient_id,
                name,
                repr(denormalize(float(pred.mean[i]), name)),
                repr(float(pred.epistemic_var[i]) * span**2),
                repr(float(pred.aleatoric_var[i]) * span**2),
                repr(denormalize(float(lower[i]), name)),
                repr(denormalize(float(upper[i]), name)),
                "raw",
            ]
        )
    return rows


PREDICTIONS_HEADER = [
    "patient_id",
    "biomarker",
    "mean",
    "epistemic_var",
    "aleatoric_var",
    "lower",
    "upper",
    "unit",
]


def write_predictions_csv(
    predictions: list[tuple[str, PredictionWithUncertainty]],
    path,
    z: float = DEFAULT_Z,
) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(PREDICTIONS_HEADER)
        for patient_id, pred in predictions:
            writer.writerows(prediction_rows(patient_id, pred, z))
