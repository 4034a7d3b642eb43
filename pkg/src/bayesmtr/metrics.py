"""Per-target and mean MAE/MSE/RMSE plus results-table emission.

Point metrics are computed from deterministic-mode predictions so results
reproduce run to run; Monte-Carlo mean predictions are reported as an
alternative. Tables are formatted x1e-2 with 3 significant digits; CSVs carry
full precision.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np
import torch

from bayesmtr.attention import DETERMINISTIC
from bayesmtr.encoder import TokenizedExample
from bayesmtr.ingest import BIOMARKERS, PLAUSIBLE_RANGES
from bayesmtr.model import BiomarkerTransformer
from bayesmtr.uncertainty import PredictionWithUncertainty, decompose, mc_predict

METRIC_NAMES = ("mae", "rmse", "mse")


def _check_lengths(y, y_hat) -> tuple[np.ndarray, np.ndarray]:
    y = np.asarray(y, dtype=np.float64)
    y_hat = np.asarray(y_hat, dtype=np.float64)
    if y.shape != y_hat.shape:
        raise ValueError(f"length mismatch: {y.shape} vs {y_hat.shape}")
    if y.size == 0:
        raise ValueError("empty inputs")
    return y, y_hat


def mae(y, y_hat) -> float:
    y, y_hat = _check_lengths(y, y_hat)
    return float(np.mean(np.abs(y - y_hat)))


def mse(y, y_hat) -> float:
    y, y_hat = _check_lengths(y, y_hat)
    return float(np.mean((y - y_hat) ** 2))


def rmse(y, y_hat) -> float:
    return float(math.sqrt(mse(y, y_hat)))


@dataclass
class MetricsReport:
    """Per-biomarker metrics plus the unweighted mean over the 4 targets.

    The rmse^2 = mse identity holds per biomarker; the mean column averages
    the per-target values of each metric, mirroring the results-table layout.
    """

    variant: str
    per_target: dict[str, dict[str, float]]
    mean: dict[str, float] = field(default_factory=dict)

    def __post_init__(self) -> None:
        if not self.mean:
            self.mean = {
                metric: float(
                    np.mean([self.per_target[b][metric] for b in BIOMARKERS])
                )
                for metric in METRIC_NAMES
            }

    def raw_units(self) -> "MetricsReport":
        """Metrics in raw clinical units: MAE/RMSE scale linearly with the
        range width, MSE quadratically."""
        per_target = {}
        for name in BIOMARKERS:
            lo, hi, _ = PLAUSIBLE_RANGES[name]
            span = hi - lo
            m = self.per_target[name]
            per_target[name] = {
                "mae": m["mae"] * span,
                "rmse": m["rmse"] * span,
                "mse": m["mse"] * span**2,
            }
        return MetricsReport(variant=self.variant, per_target=per_target)

    def to_dict(self) -> dict:
        return {
            "variant": self.variant,
            "per_target": self.per_target,
            "mean": self.mean,
        }


def compute_report(variant: str, y: np.ndarray, y_hat: np.ndarray) -> MetricsReport:
    """Metrics from aligned (n, 4) arrays of targets and predictions."""
    y = np.asarray(y, dtype=np.float64)
    y_hat = np.asarray(y_hat, dtype=np.float64)
    if y.ndim != 2 or y.shape[1] != 4 or y.shape != y_hat.shape:
        raise ValueError(f"expected matching (n, 4) arrays, got {y.shape} vs {y_hat.shape}")
    per_target = {
        name: {
            "mae": mae(y[:, i], y_hat[:, i]),
            "rmse": rmse(y[:, i], y_hat[:, i]),
            "mse": mse(y[:, i], y_hat[:, i]),
        }
        for i, name in enumerate(BIOMARKERS)
    }
    return MetricsReport(variant=variant, per_target=per_target)


@dataclass
class EvaluationResult:
    report: MetricsReport  # deterministic point predictions
    mc_report: MetricsReport | None  # Monte-Carlo mean predictions
    y: np.ndarray  # (n, 4) targets
    y_det: np.ndarray  # (n, 4) deterministic predictions
    patient_ids: list[str]
    mc_predictions: list[PredictionWithUncertainty] | None = None


def evaluate(
    model: BiomarkerTransformer,
    test_set: list[TokenizedExample],
    T: int = 0,
    generator: torch.Generator | None = None,
    variant: str | None = None,
) -> EvaluationResult:
    """Point metrics in deterministic mode; MC-mean metrics when T >= 2."""
    if not test_set:
        raise ValueError("empty test set")
    variant = variant if variant is not None else model.cfg.ablation
    y_rows, det_rows, ids = [], [], []
    mc_preds: list[PredictionWithUncertainty] = []
    with torch.no_grad():
        for tok in test_set:
            means, _ = model(tok, mode=DETERMINISTIC)
            y_rows.append(tok.target.numpy().copy())
            det_rows.append(means.numpy().copy())
            ids.append(tok.patient_id)
            if T >= 2:
                mc_preds.append(decompose(mc_predict(model, tok, T, generator)))
    y = np.stack(y_rows)
    y_det = np.stack(det_rows)
    report = compute_report(variant, y, y_det)
    mc_report = (
        compute_report(f"{variant}[mc-mean]", y, np.stack([p.mean for p in mc_preds]))
        if mc_preds
        else None
    )
    return EvaluationResult(
        report=report,
        mc_report=mc_report,
        y=y,
        y_det=y_det,
        patient_ids=ids,
        mc_predictions=mc_preds or None,
    )


TABLE_COLUMNS = [
    f"{metric}_{target}"
    for metric in METRIC_NAMES
    for target in (*BIOMARKERS, "mean")
]


def report_row(report: MetricsReport) -> list[float]:
    row = []
    for metric in METRIC_NAMES:
        row.extend(report.per_target[name][metric] for name in BIOMARKERS)
        row.append(report.mean[metric])
    return row


def write_results_csv(reports: list[MetricsReport], path) -> None:
    """One row per model/ablation variant, full-precision values."""
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["variant", *TABLE_COLUMNS])
        for report in reports:
            writer.writerow([report.variant, *[repr(v) for v in report_row(report)]])


def format_results_table(reports: list[MetricsReport]) -> str:
    """Aligned text table, values x1e-2 at 3 significant digits."""
    headers = ["variant", *TABLE_COLUMNS]
    rows = [
        [report.variant, *[f"{v * 100:.3g}" for v in report_row(report)]]
        for report in reports
    ]
    widths = [
        max(len(headers[i]), *(len(row[i]) for row in rows)) for i in range(len(headers))
    ]
    lines = [
        "  ".join(h.ljust(widths[i]) for i, h in enumerate(headers)),
        "  ".join("-" * w for w in widths),
    ]
    lines += [
        "  ".join(cell.ljust(widths[i]) for i, cell in enumerate(row)) for row in rows
    ]
    lines.append("(values x1e-2)")
    return "\n".join(lines) + "\n"
