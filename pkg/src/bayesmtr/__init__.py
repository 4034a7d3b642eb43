"""Bayesian multi-target transformer for longitudinal biomarker prediction.

A desk-scale pipeline: synthetic or ingested EHR-style visit sequences are
encoded by a transformer whose key projections are Gaussian random variables
(variational, reparameterized), pooled into a latent vector, and mapped by a
shared-trunk multi-target head to four biomarker predictions with epistemic
and aleatoric uncertainty.
"""

__version__ = "0.1.0"

from bayesmtr.ingest import (
    BIOMARKERS,
    BiomarkerVector,
    CohortSplit,
    Demographics,
    PatientRecord,
    TrainingExample,
    Visit,
    denormalize,
    normalize,
)

__all__ = [
    "BIOMARKERS",
    "BiomarkerVector",
    "CohortSplit",
    "Demographics",
    "PatientRecord",
    "TrainingExample",
    "Visit",
    "normalize",
    "denormalize",
    "__version__",
]
