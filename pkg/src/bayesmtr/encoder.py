"""Sequence encoding: turn a training example into an embedded token matrix.

Layout of an encoded sequence of k input visits (L = 1 + 3 + 4k rows):

    row 0            CLS
    rows 1..3        demographic tokens (gender, race, income)
    rows 4..4+4k-1   per-visit biomarker tokens, 4 per visit

Each biomarker token row is the sum of a field embedding (which biomarker),
the field's value direction scaled by the normalized value, the visit's
positional embedding, and its segment embedding. Demographic tokens use their
vocabulary embedding plus positional index 0. The canonical textual form of a
visit ("sys: ...; bmi: ...") is kept as an interchange/debug format.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
from torch import nn

from bayesmtr.ingest import (
    BIOMARKER_TOKENS,
    BiomarkerVector,
    GENDERS,
    INCOME_CLASSES,
    RACES,
    TrainingExample,
    encode_demographics,
)

N_FIELDS = 4
N_DEMOGRAPHIC_TOKENS = 3

# All model arithmetic is double precision: reproducible to the bit and
# accurate enough for finite-difference gradient checks.
DTYPE = torch.float64


def serialize_visit(b: BiomarkerVector) -> str:
    """Render a normalized biomarker vector as a structured sentence."""
    values = b.as_tuple()
    return "; ".join(
        f"{token}: {value:.4f}" for token, value in zip(BIOMARKER_TOKENS, values)
    )


def sequence_length(k: int) -> int:
    return 1 + N_DEMOGRAPHIC_TOKENS + N_FIELDS * k


def token_labels(k: int) -> list[str]:
    """Axis labels for attention dumps, aligned with the encoding layout."""
    labels = ["CLS", "DEM:gender", "DEM:race", "DEM:income"]
    for i in range(k):
        labels.extend(f"V{i}:{token}" for token in BIOMARKER_TOKENS)
    return labels


@dataclass
class TokenizedExample:
    """Precomputed index tensors for one example; embedding is pure lookup."""

    field_idx: torch.Tensor  # (4k,) long
    values: torch.Tensor  # (4k,) float
    pos_idx: torch.Tensor  # (4k,) long
    seg_idx: torch.Tensor  # (4k,) long
    dem_idx: tuple[int, int, int]
    k: int
    target: torch.Tensor  # (4,) float
    patient_id: str


def tokenize_example(ex: TrainingExample) -> TokenizedExample:
    k = len(ex.inputs)
    values = torch.tensor(
        [v for visit in ex.inputs for v in visit.biomarkers.as_tuple()],
        dtype=DTYPE,
    )
    field_idx = torch.arange(N_FIELDS).repeat(k)
    pos_idx = torch.repeat_interleave(torch.arange(k), N_FIELDS)
    seg = ex.segments[:k] if len(ex.segments) >= k else (0,) * k
    seg_idx = torch.repeat_interleave(torch.tensor(seg, dtype=torch.long), N_FIELDS)
    return TokenizedExample(
        field_idx=field_idx,
        values=values,
        pos_idx=pos_idx,
        seg_idx=seg_idx,
        dem_idx=encode_demographics(ex.demographics),
        k=k,
        target=torch.tensor(ex.target.as_tuple(), dtype=DTYPE),
        patient_id=ex.patient_id,
    )


@dataclass
class EncodedSequence:
    matrix: torch.Tensor  # (L, d_model)
    padding_mask: torch.Tensor  # (L,) bool, True at padding rows
    labels: list[str]


class EmbeddingTable(nn.Module):
    """All learned embedding vectors used to build an encoded sequence."""

    def __init__(self, d_model: int = 64, max_visits: int = 64):
        super().__init__()
        self.d_model = d_model
        self.max_visits = max_visits
        self.field_embeddings = nn.Parameter(torch.empty(N_FIELDS, d_model))
        self.value_directions = nn.Parameter(torch.empty(N_FIELDS, d_model))
        self.positional_embeddings = nn.Parameter(torch.empty(max_visits, d_model))
        self.segment_embeddings = nn.Parameter(torch.empty(2, d_model))
        self.gender_embeddings = nn.Parameter(torch.empty(len(GENDERS), d_model))
        self.race_embeddings = nn.Parameter(torch.empty(len(RACES), d_model))
        self.income_embeddings = nn.Parameter(torch.empty(len(INCOME_CLASSES), d_model))
        self.cls_embedding = nn.Parameter(torch.empty(d_model))

    def init_weights(self, generator: torch.Generator, std: float = 0.02) -> None:
        for param in self.parameters():
            with torch.no_grad():
                param.copy_(
                    torch.randn(param.shape, generator=generator, dtype=param.dtype)
                    * std
                )


def embed_tokenized(tok: TokenizedExample, tables: EmbeddingTable) -> EncodedSequence:
    if tok.k == 0:
        raise ValueError("example has no input visits")
    if tok.k > tables.max_visits:
        raise ValueError(
            f"{tok.k} input visits exceeds max_visits={tables.max_visits}"
        )
    g_idx, r_idx, i_idx = tok.dem_idx
    pos0 = tables.positional_embeddings[0]
    dem_rows = torch.stack(
        [
            tables.gender_embeddings[g_idx] + pos0,
            tables.race_embeddings[r_idx] + pos0,
            tables.income_embeddings[i_idx] + pos0,
        ]
    )
    visit_rows = (
        tables.field_embeddings[tok.field_idx]
        + tok.values.unsqueeze(1) * tables.value_directions[tok.field_idx]
        + tables.positional_embeddings[tok.pos_idx]
        + tables.segment_embeddings[tok.seg_idx]
    )
    matrix = torch.cat([tables.cls_embedding.unsqueeze(0), dem_rows, visit_rows])
    return EncodedSequence(
        matrix=matrix,
        padding_mask=torch.zeros(matrix.shape[0], dtype=torch.bool),
        labels=token_labels(tok.k),
    )


def embed_example(ex: TrainingExample, tables: EmbeddingTable) -> EncodedSequence:
    return embed_tokenized(tokenize_example(ex), tables)


class ProjectionHead(nn.Module):
    """Affine map from the CLS row of the encoder output to the latent space."""

    def __init__(self, d_model: int = 64, d_latent: int = 128):
        super().__init__()
        self.W_proj = nn.Parameter(torch.empty(d_model, d_latent))
        self.b_proj = nn.Parameter(torch.zeros(d_latent))

    def init_weights(self, generator: torch.Generator, std: float = 0.02) -> None:
        with torch.no_grad():
            self.W_proj.copy_(
                torch.randn(self.W_proj.shape, generator=generator, dtype=self.W_proj.dtype)
                * std
            )
            self.b_proj.zero_()

    def forward(self, encoder_output: torch.Tensor) -> torch.Tensor:
        return encoder_output[0] @ self.W_proj + self.b_proj


def pool_and_project(encoder_output: torch.Tensor, head: ProjectionHead) -> torch.Tensor:
    """Project the CLS row (row 0) of the encoder output."""
    return head(encoder_output)
