"""Cohort ingestion: parse, validate, filter, normalize, and split visit data.

The input CSV schema (header required, UTF-8) is::

    patient_id,visit_date,sysbp,bmi,hba1c,ldl,gender,race,income_class,age

Dates are ISO-8601 (YYYY-MM-DD). Empty biomarker fields are parsed as missing
values and dropped by :func:`filter_plausible`; any other unparseable field is
a format error reported with its line number.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field, replace
from datetime import date

import numpy as np

# Biomarker order is fixed everywhere: CSV columns, model targets, reports.
BIOMARKERS = ("sysbp", "bmi", "hba1c", "ldl")

# Token names used when a visit is rendered as a structured sentence.
BIOMARKER_TOKENS = ("sys", "bmi", "hba1c", "chol")

# Display names for report tables.
BIOMARKER_LABELS = ("SysBP", "BMI", "HbA1c", "LDL")

# Plausible ranges (lo, hi, lo_inclusive). Upper bounds are always inclusive.
# Normalization maps the closed interval [lo, hi] onto [0, 1]; the open lower
# bounds only matter for plausibility filtering.
PLAUSIBLE_RANGES: dict[str, tuple[float, float, bool]] = {
    "sysbp": (84.0, 196.0, True),
    "bmi": (15.0, 100.0, True),
    "hba1c": (4.0, 14.0, False),
    "ldl": (20.0, 370.0, False),
}

GENDERS = ("male", "female")
RACES = ("white", "black", "asian", "other")
INCOME_CLASSES = ("lower-middle", "middle", "upper-middle", "upper")

DEFAULT_ONSET = date(2020, 3, 1)

CSV_HEADER = [
    "patient_id",
    "visit_date",
    "sysbp",
    "bmi",
    "hba1c",
    "ldl",
    "gender",
    "race",
    "income_class",
    "age",
]


class CohortFormatError(ValueError):
    """Raised for malformed cohort CSV input; message names the line."""


@dataclass(frozen=True)
class BiomarkerVector:
    """One visit's four biomarker values. NaN marks a missing value."""

    sysbp: float
    bmi: float
    hba1c: float
    ldl: float

    def as_tuple(self) -> tuple[float, float, float, float]:
        return (self.sysbp, self.bmi, self.hba1c, self.ldl)

    def as_array(self) -> np.ndarray:
        return np.array(self.as_tuple(), dtype=np.float64)

    def has_missing(self) -> bool:
        return any(math.isnan(v) for v in self.as_tuple())

    @staticmethod
    def from_sequence(values) -> "BiomarkerVector":
        sysbp, bmi, hba1c, ldl = (float(v) for v in values)
        return BiomarkerVector(sysbp, bmi, hba1c, ldl)


@dataclass(frozen=True)
class Demographics:
    gender: str
    race: str
    income_class: str
    age: int

    def __post_init__(self) -> None:
        if self.gender not in GENDERS:
            raise ValueError(f"unknown gender {self.gender!r}")
        if self.race not in RACES:
            raise ValueError(f"unknown race {self.race!r}")
        if self.income_class not in INCOME_CLASSES:
            raise ValueError(f"unknown income_class {self.income_class!r}")


@dataclass(frozen=True)
class Visit:
    date: date
    biomarkers: BiomarkerVector


@dataclass(frozen=True)
class PatientRecord:
    patient_id: str
    demographics: Demographics
    visits: tuple[Visit, ...]


@dataclass(frozen=True)
class TrainingExample:
    """Model-ready example: normalized input visits and a normalized target.

    ``inputs`` holds the pre-onset visits with biomarkers already normalized
    to [0, 1]; ``target`` is the normalized biomarker vector of the first
    onset-era visit. ``segments`` has one entry per input visit plus a final
    entry for the target visit (always 1).
    """

    patient_id: str
    inputs: tuple[Visit, ...]
    target: BiomarkerVector
    target_date: date
    demographics: Demographics
    positions: tuple[int, ...] = field(default=())
    segments: tuple[int, ...] = field(default=())


@dataclass(frozen=True)
class CohortSplit:
    train: tuple[PatientRecord, ...]
    val: tuple[PatientRecord, ...]
    test: tuple[PatientRecord, ...]


def _parse_float_or_missing(text: str, line_no: int, column: str) -> float:
    text = text.strip()
    if text == "":
        return math.nan
    try:
        return float(text)
    except ValueError:
        raise CohortFormatError(
            f"line {line_no}: unparseable number {text!r} in column {column}"
        ) from None


def parse_cohort(source) -> list[PatientRecord]:
    """Parse cohort CSV rows into patient records.

    ``source`` is an iterable of text lines (an open file works). Rows are
    grouped by patient_id; visits are sorted by date with ties broken by input
    order; demographics come from the patient's first row and must be
    consistent across all of that patient's rows.
    """
    reader = csv.reader(source)
    try:
        header = next(reader)
    except StopIteration:
        raise CohortFormatError("line 1: missing header") from None
    if [h.strip() for h in header] != CSV_HEADER:
        raise CohortFormatError(
            f"line 1: expected header {','.join(CSV_HEADER)}, got {','.join(header)}"
        )

    order: list[str] = []
    demographics: dict[str, Demographics] = {}
    visits: dict[str, list[Visit]] = {}

    for line_no, row in enumerate(reader, start=2):
        if not row:
            continue
        if len(row) != len(CSV_HEADER):
            raise CohortFormatError(
                f"line {line_no}: expected {len(CSV_HEADER)} columns, got {len(row)}"
            )
        pid = row[0].strip()
        if not pid:
            raise CohortFormatError(f"line {line_no}: empty patient_id")
        try:
            visit_date = date.fromisoformat(row[1].strip())
        except ValueError:
            raise CohortFormatError(
                f"line {line_no}: unparseable date {row[1]!r}"
            ) from None
        values = [
            _parse_float_or_missing(row[i + 2], line_no, BIOMARKERS[i])
            for i in range(4)
        ]
        try:
            age = int(row[9].strip())
        except ValueError:
            raise CohortFormatError(
                f"line {line_no}: unparseable age {row[9]!r}"
            ) from None
        try:
            demo = Demographics(
                gender=row[6].strip(),
                race=row[7].strip(),
                income_class=row[8].strip(),
                age=age,
            )
        except ValueError as exc:
            raise CohortFormatError(f"line {line_no}: {exc}") from None

        if pid not in demographics:
            order.append(pid)
            demographics[pid] = demo
            visits[pid] = []
        elif demographics[pid] != demo:
            raise CohortFormatError(
                f"line {line_no}: inconsistent demographics for patient {pid}"
            )
        visits[pid].append(Visit(visit_date, BiomarkerVector.from_sequence(values)))

    records = []
    for pid in order:
        ordered = sorted(visits[pid], key=lambda v: v.date)  # stable: ties keep input order
        records.append(PatientRecord(pid, demographics[pid], tuple(ordered)))
    return records


def load_cohort(path) -> list[PatientRecord]:
    with open(path, "r", encoding="utf-8", newline="") as fh:
        return parse_cohort(fh)


def value_is_plausible(biomarker: str, value: float) -> bool:
    if math.isnan(value):
        return False
    lo, hi, lo_inclusive = PLAUSIBLE_RANGES[biomarker]
    if lo_inclusive:
        return lo <= value <= hi
    return lo < value <= hi


def visit_is_plausible(visit: Visit) -> bool:
    return all(
        value_is_plausible(name, value)
        for name, value in zip(BIOMARKERS, visit.biomarkers.as_tuple())
    )


def filter_plausible(
    cohort: list[PatientRecord], onset: date = DEFAULT_ONSET
) -> tuple[list[PatientRecord], int]:
    """Drop implausible visits and patients without pre- and post-onset visits.

    Returns the kept records and a count of dropped items (individual visits
    dropped for missing/out-of-range values, plus patients dropped whole for
    lacking at least one visit before onset and one on/after onset).
    """
    kept: list[PatientRecord] = []
    dropped = 0
    for record in cohort:
        good_visits = tuple(v for v in record.visits if visit_is_plausible(v))
        dropped += len(record.visits) - len(good_visits)
        has_pre = any(v.date < onset for v in good_visits)
        has_post = any(v.date >= onset for v in good_visits)
        if has_pre and has_post:
            kept.append(replace(record, visits=good_visits))
        else:
            dropped += 1
    return kept, dropped


def normalize(value: float, biomarker: str) -> float:
    """Min-max scale against the fixed plausible range to [0, 1]."""
    lo, hi, _ = PLAUSIBLE_RANGES[biomarker]
    if not (lo <= value <= hi):
        raise ValueError(
            f"{biomarker} value {value} outside plausible range [{lo}, {hi}]; "
            "run plausibility filtering first"
        )
    return (value - lo) / (hi - lo)


def denormalize(value: float, biomarker: str) -> float:
    """Exact inverse of :func:`normalize`."""
    if not (0.0 <= value <= 1.0):
        raise ValueError(f"normalized value {value} outside [0, 1]")
    lo, hi, _ = PLAUSIBLE_RANGES[biomarker]
    return lo + value * (hi - lo)


def normalize_vector(b: BiomarkerVector) -> BiomarkerVector:
    return BiomarkerVector.from_sequence(
        normalize(v, name) for name, v in zip(BIOMARKERS, b.as_tuple())
    )


def denormalize_vector(b: BiomarkerVector) -> BiomarkerVector:
    return BiomarkerVector.from_sequence(
        denormalize(v, name) for name, v in zip(BIOMARKERS, b.as_tuple())
    )


def encode_demographics(d: Demographics) -> tuple[int, int, int]:
    """Map categorical demographics to fixed vocabulary indices."""
    return (
        GENDERS.index(d.gender),
        RACES.index(d.race),
        INCOME_CLASSES.index(d.income_class),
    )


def split_cohort(cohort: list[PatientRecord], seed: int) -> CohortSplit:
    """Patient-level 60/20/20 split, deterministic given the seed.

    Validation and test sizes are 0.2*n rounded half-up; any rounding residue
    goes to train.
    """
    n = len(cohort)
    if n < 5:
        raise ValueError(f"need at least 5 patients to split, got {n}")
    rng = np.random.Generator(np.random.PCG64(seed))
    order = rng.permutation(n)
    n_val = int(math.floor(0.2 * n + 0.5))
    n_test = n_val
    n_train = n - n_val - n_test
    shuffled = [cohort[i] for i in order]
    return CohortSplit(
        train=tuple(shuffled[:n_train]),
        val=tuple(shuffled[n_train : n_train + n_val]),
        test=tuple(shuffled[n_train + n_val :]),
    )


def make_example(p: PatientRecord, onset: date = DEFAULT_ONSET) -> TrainingExample:
    """Build the model-ready example for one patient.

    Inputs are all visits strictly before the first on/after-onset visit (with
    biomarkers normalized); the target is that visit's normalized biomarkers.
    """
    target_idx = next(
        (i for i, v in enumerate(p.visits) if v.date >= onset), None
    )
    if target_idx is None or target_idx == 0:
        raise ValueError(
            f"patient {p.patient_id} lacks a pre-onset visit followed by an "
            "onset-era visit; run plausibility filtering first"
        )
    inputs = tuple(
        replace(v, biomarkers=normalize_vector(v.biomarkers))
        for v in p.visits[:target_idx]
    )
    target_visit = p.visits[target_idx]
    k = len(inputs)
    return TrainingExample(
        patient_id=p.patient_id,
        inputs=inputs,
        target=normalize_vector(target_visit.biomarkers),
        target_date=target_visit.date,
        demographics=p.demographics,
        positions=tuple(range(k)),
        segments=tuple(0 for _ in range(k)) + (1,),
    )


def write_cohort_csv(cohort: list[PatientRecord], path) -> None:
    """Write patient records in the canonical cohort CSV schema."""
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(CSV_HEADER)
        for record in cohort:
            d = record.demographics
            for visit in record.visits:
                writer.writerow(
                    [
                        record.patient_id,
                        visit.date.isoformat(),
                        f"{visit.biomarkers.sysbp:.6f}",
                        f"{visit.biomarkers.bmi:.6f}",
                        f"{visit.biomarkers.hba1c:.6f}",
                        f"{visit.biomarkers.ldl:.6f}",
                        d.gender,
                        d.race,
                        d.income_class,
                        d.age,
                    ]
                )
