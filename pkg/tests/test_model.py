"""Composed model: determinism, ablation variants, KL aggregation."""

from datetime import date

import pytest
import torch

from bayesmtr.attention import DETERMINISTIC, STOCHASTIC, VariationalParameter
from bayesmtr.encoder import DTYPE, tokenize_example
from bayesmtr.ingest import BiomarkerVector, Demographics, TrainingExample, Visit
from bayesmtr.model import (
    ABLATION_FULL,
    ABLATION_NO_BAYESIAN,
    ABLATION_NO_DEEPMTR,
    BiomarkerTransformer,
    ModelConfig,
    build_model,
)
from bayesmtr.mtr import AffineHead, DeepMTRHead

SMALL = ModelConfig(
    d_model=16, n_heads=2, d_k=8, d_v=8, d_latent=12, n_layers=1,
    max_visits=8, trunk_dims=(16, 8, 8),
)


def example(k=2) -> TrainingExample:
    visits = tuple(
        Visit(date(2019, 1, 1 + i), BiomarkerVector(0.4, 0.3, 0.5, 0.2))
        for i in range(k)
    )
    return TrainingExample(
        patient_id="p1",
        inputs=visits,
        target=BiomarkerVector(0.5, 0.4, 0.6, 0.3),
        target_date=date(2020, 6, 1),
        demographics=Demographics("female", "black", "upper-middle", 71),
        positions=tuple(range(k)),
        segments=tuple(0 for _ in range(k)) + (1,),
    )


class TestForward:
    def test_output_shapes_independent_of_sequence_length(self):
        model = build_model(SMALL, master_seed=0)
        for k in (1, 3, 5):
            means, log_vars = model(tokenize_example(example(k)), mode=DETERMINISTIC)
            assert means.shape == (4,)
            assert log_vars.shape == (4,)

    def test_deterministic_forward_is_bit_identical(self):
        model = build_model(SMALL, master_seed=1)
        tok = tokenize_example(example())
        a = model(tok, mode=DETERMINISTIC)
        b = model(tok, mode=DETERMINISTIC)
        assert torch.equal(a[0], b[0]) and torch.equal(a[1], b[1])

    def test_stochastic_passes_differ(self):
        model = build_model(SMALL, master_seed=2)
        with torch.no_grad():
            for _, vp in model.variational_parameters():
                vp.log_sigma.fill_(-1.0)
        tok = tokenize_example(example())
        gen = torch.Generator().manual_seed(0)
        a, _ = model(tok, generator=gen, mode=STOCHASTIC)
        b, _ = model(tok, generator=gen, mode=STOCHASTIC)
        assert not torch.equal(a, b)

    def test_same_generator_seed_reproduces_stochastic_pass(self):
        model = build_model(SMALL, master_seed=3)
        tok = tokenize_example(example())
        a, _ = model(tok, generator=torch.Generator().manual_seed(9), mode=STOCHASTIC)
        b, _ = model(tok, generator=torch.Generator().manual_seed(9), mode=STOCHASTIC)
        assert torch.equal(a, b)

    def test_all_parameters_are_double_precision(self):
        model = build_model(SMALL, master_seed=4)
        assert all(p.dtype == torch.float64 for p in model.parameters())


class TestAblations:
    def test_full_and_no_bayesian_share_initialization(self):
        full = build_model(SMALL, master_seed=5)
        nb = build_model(
            ModelConfig(**{**SMALL.__dict__, "ablation": ABLATION_NO_BAYESIAN}),
            master_seed=5,
        )
        for (name_a, pa), (name_b, pb) in zip(
            full.named_parameters(), nb.named_parameters()
        ):
            assert name_a == name_b
            assert torch.equal(pa, pb)

    def test_no_bayesian_forces_deterministic(self):
        cfg = ModelConfig(**{**SMALL.__dict__, "ablation": ABLATION_NO_BAYESIAN})
        model = build_model(cfg, master_seed=6)
        tok = tokenize_example(example())
        a, _ = model(tok, generator=torch.Generator().manual_seed(0), mode=STOCHASTIC)
        b, _ = model(tok, generator=torch.Generator().manual_seed(1), mode=STOCHASTIC)
        assert torch.equal(a, b)
        model.set_mode(STOCHASTIC)
        assert model.mode == DETERMINISTIC

    def test_no_deepmtr_uses_affine_head(self):
        cfg = ModelConfig(**{**SMALL.__dict__, "ablation": ABLATION_NO_DEEPMTR})
        model = build_model(cfg, master_seed=7)
        assert isinstance(model.head, AffineHead)
        full = build_model(SMALL, master_seed=7)
        assert isinstance(full.head, DeepMTRHead)

    def test_unknown_ablation_rejected(self):
        with pytest.raises(ValueError, match="ablation"):
            ModelConfig(ablation="nothing")


class TestKLAggregation:
    def test_kl_counts_every_variational_matrix(self):
        model = build_model(SMALL, master_seed=8)
        vps = model.variational_parameters()
        assert len(vps) == SMALL.n_layers * SMALL.n_heads
        with torch.no_grad():
            for _, vp in vps:
                vp.mu.zero_()
                vp.log_sigma.zero_()
        assert model.kl().item() == 0.0
        with torch.no_grad():
            vps[0][1].mu.fill_(1.0)
        expected = 0.5 * vps[0][1].mu.numel()
        assert model.kl().item() == pytest.approx(expected, rel=1e-12)

    def test_variational_qv_triples_variational_count(self):
        cfg = ModelConfig(**{**SMALL.__dict__, "variational_qv": True})
        model = build_model(cfg, master_seed=9)
        assert len(model.variational_parameters()) == 3 * SMALL.n_layers * SMALL.n_heads


class TestAttentionMaps:
    def test_maps_shape_and_count(self):
        model = build_model(SMALL, master_seed=10)
        tok = tokenize_example(example(k=2))
        maps = model.attention_maps(tok)
        L = 1 + 3 + 4 * 2
        assert len(maps) == SMALL.n_layers * SMALL.n_heads
        for m in maps:
            assert m.shape == (L, L)
            torch.testing.assert_close(
                m.sum(dim=-1), torch.ones(L, dtype=DTYPE), atol=1e-9, rtol=0
            )
