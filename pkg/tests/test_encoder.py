"""Sequence encoding: serialization format, embedding layout, pooling."""

from datetime import date

import pytest
import torch

from bayesmtr.encoder import (
    DTYPE,
    EmbeddingTable,
    ProjectionHead,
    embed_example,
    embed_tokenized,
    pool_and_project,
    sequence_length,
    serialize_visit,
    token_labels,
    tokenize_example,
)
from bayesmtr.ingest import (
    BiomarkerVector,
    Demographics,
    TrainingExample,
    Visit,
)


def make_example_fixture(values_per_visit, segments=None):
    visits = tuple(
        Visit(date(2019, 1, 1 + i), BiomarkerVector.from_sequence(vals))
        for i, vals in enumerate(values_per_visit)
    )
    k = len(visits)
    segs = segments if segments is not None else tuple(0 for _ in range(k)) + (1,)
    return TrainingExample(
        patient_id="p1",
        inputs=visits,
        target=BiomarkerVector(0.5, 0.5, 0.5, 0.5),
        target_date=date(2020, 6, 1),
        demographics=Demographics("male", "white", "middle", 60),
        positions=tuple(range(k)),
        segments=segs,
    )


def fresh_tables(d_model=16, max_visits=8, seed=0) -> EmbeddingTable:
    tables = EmbeddingTable(d_model, max_visits).to(DTYPE)
    gen = torch.Generator().manual_seed(seed)
    tables.init_weights(gen)
    return tables


class TestSerializeVisit:
    def test_hand_example(self):
        b = BiomarkerVector(0.5, 0.25, 0.5, 1.0)
        assert serialize_visit(b) == "sys: 0.5000; bmi: 0.2500; hba1c: 0.5000; chol: 1.0000"

    def test_zero_vector(self):
        b = BiomarkerVector(0.0, 0.0, 0.0, 0.0)
        assert serialize_visit(b) == "sys: 0.0000; bmi: 0.0000; hba1c: 0.0000; chol: 0.0000"

    def test_injective_on_four_decimal_grid(self):
        seen = set()
        for i in range(50):
            b = BiomarkerVector(i / 100, 0.0, 0.0, 0.0)
            seen.add(serialize_visit(b))
        assert len(seen) == 50


class TestEmbedExample:
    def test_length_formula(self):
        ex = make_example_fixture([(0.1, 0.2, 0.3, 0.4), (0.5, 0.6, 0.7, 0.8)])
        encoded = embed_example(ex, fresh_tables())
        assert sequence_length(2) == 12
        assert encoded.matrix.shape == (12, 16)
        assert not encoded.padding_mask.any()

    def test_zero_value_token_has_no_value_direction(self):
        tables = fresh_tables()
        ex = make_example_fixture([(0.0, 0.0, 0.0, 0.0)])
        encoded = embed_example(ex, tables)
        expected = (
            tables.field_embeddings[0]
            + tables.positional_embeddings[0]
            + tables.segment_embeddings[0]
        )
        torch.testing.assert_close(encoded.matrix[4], expected)

    def test_identical_visits_differ_by_positional_embedding(self):
        tables = fresh_tables()
        vals = (0.3, 0.4, 0.5, 0.6)
        ex = make_example_fixture([vals, vals])
        encoded = embed_example(ex, tables)
        diff = encoded.matrix[8:12] - encoded.matrix[4:8]
        expected = tables.positional_embeddings[1] - tables.positional_embeddings[0]
        for row in diff:
            torch.testing.assert_close(row, expected)

    def test_cls_row_is_cls_embedding(self):
        tables = fresh_tables()
        ex = make_example_fixture([(0.1, 0.2, 0.3, 0.4)])
        encoded = embed_example(ex, tables)
        torch.testing.assert_close(encoded.matrix[0], tables.cls_embedding)

    def test_demographic_rows_use_vocab_plus_position_zero(self):
        tables = fresh_tables()
        ex = make_example_fixture([(0.1, 0.2, 0.3, 0.4)])
        encoded = embed_example(ex, tables)
        pos0 = tables.positional_embeddings[0]
        torch.testing.assert_close(encoded.matrix[1], tables.gender_embeddings[0] + pos0)
        torch.testing.assert_close(encoded.matrix[2], tables.race_embeddings[0] + pos0)
        torch.testing.assert_close(encoded.matrix[3], tables.income_embeddings[1] + pos0)

    def test_no_input_visits_is_error(self):
        ex = make_example_fixture([])
        with pytest.raises(ValueError, match="no input visits"):
            embed_example(ex, fresh_tables())

    def test_too_many_visits_is_error(self):
        ex = make_example_fixture([(0.1, 0.2, 0.3, 0.4)] * 9)
        with pytest.raises(ValueError, match="max_visits"):
            embed_example(ex, fresh_tables(max_visits=8))

    def test_permuting_visits_changes_encoding(self):
        tables = fresh_tables()
        a = make_example_fixture([(0.1, 0.2, 0.3, 0.4), (0.9, 0.8, 0.7, 0.6)])
        b = make_example_fixture([(0.9, 0.8, 0.7, 0.6), (0.1, 0.2, 0.3, 0.4)])
        ea = embed_example(a, tables)
        eb = embed_example(b, tables)
        assert not torch.equal(ea.matrix, eb.matrix)

    def test_segment_flip_changes_only_that_visits_rows(self):
        tables = fresh_tables()
        vals = [(0.1, 0.2, 0.3, 0.4), (0.5, 0.6, 0.7, 0.8)]
        base = make_example_fixture(vals, segments=(0, 0, 1))
        flipped = make_example_fixture(vals, segments=(0, 1, 1))
        eb = embed_example(base, tables)
        ef = embed_example(flipped, tables)
        torch.testing.assert_close(ef.matrix[:8], eb.matrix[:8])
        seg_diff = tables.segment_embeddings[1] - tables.segment_embeddings[0]
        for row in ef.matrix[8:12] - eb.matrix[8:12]:
            torch.testing.assert_close(row, seg_diff)

    def test_labels(self):
        assert token_labels(2) == [
            "CLS", "DEM:gender", "DEM:race", "DEM:income",
            "V0:sys", "V0:bmi", "V0:hba1c", "V0:chol",
            "V1:sys", "V1:bmi", "V1:hba1c", "V1:chol",
        ]

    def test_tokenize_round_trip_values(self):
        ex = make_example_fixture([(0.1, 0.2, 0.3, 0.4)])
        tok = tokenize_example(ex)
        assert tok.k == 1
        torch.testing.assert_close(
            tok.values, torch.tensor([0.1, 0.2, 0.3, 0.4], dtype=DTYPE)
        )
        assert tok.dem_idx == (0, 0, 1)


class TestPoolAndProject:
    def test_identity_projection_returns_cls_row(self):
        head = ProjectionHead(d_model=6, d_latent=6).to(DTYPE)
        with torch.no_grad():
            head.W_proj.copy_(torch.eye(6, dtype=DTYPE))
            head.b_proj.zero_()
        X = torch.randn(4, 6, dtype=DTYPE)
        torch.testing.assert_close(pool_and_project(X, head), X[0])

    def test_bias_only(self):
        head = ProjectionHead(d_model=6, d_latent=3).to(DTYPE)
        with torch.no_grad():
            head.W_proj.zero_()
            head.b_proj.copy_(torch.tensor([1.0, 2.0, 3.0], dtype=DTYPE))
        X = torch.randn(4, 6, dtype=DTYPE)
        torch.testing.assert_close(
            pool_and_project(X, head), torch.tensor([1.0, 2.0, 3.0], dtype=DTYPE)
        )

    def test_linearity_without_bias(self):
        head = ProjectionHead(d_model=6, d_latent=3).to(DTYPE)
        gen = torch.Generator().manual_seed(1)
        head.init_weights(gen)
        with torch.no_grad():
            head.b_proj.zero_()
        X = torch.randn(4, 6, dtype=DTYPE)
        torch.testing.assert_close(
            pool_and_project(2.5 * X, head), 2.5 * pool_and_project(X, head)
        )
