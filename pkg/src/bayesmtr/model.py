"""The composed predictive model: embedding, variational encoder stack,
CLS pooling, and the multi-target head.

All parameters are float64 for reproducible arithmetic and finite-difference
friendly gradients. Construction order of parameters is fixed so that two
models built from the same init seed share identical initialization.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import torch
from torch import nn

from bayesmtr.attention import (
    AttentionConfig,
    DETERMINISTIC,
    EncoderLayer,
    STOCHASTIC,
    VariationalParameter,
    kl_divergence,
)
from bayesmtr.encoder import (
    EmbeddingTable,
    EncodedSequence,
    ProjectionHead,
    TokenizedExample,
    embed_tokenized,
    tokenize_example,
)
from bayesmtr.ingest import TrainingExample
from bayesmtr.mtr import AffineHead, DeepMTRHead
from bayesmtr.seeding import STREAM_INIT, torch_generator

ABLATION_FULL = "full"
ABLATION_NO_BAYESIAN = "no_bayesian"
ABLATION_NO_DEEPMTR = "no_deepmtr"
ABLATIONS = (ABLATION_FULL, ABLATION_NO_BAYESIAN, ABLATION_NO_DEEPMTR)


@dataclass
class ModelConfig:
    d_model: int = 64
    n_heads: int = 4
    d_k: int = 16
    d_v: int = 16
    d_latent: int = 128
    n_layers: int = 1
    max_visits: int = 64
    trunk_dims: tuple[int, int, int] = (512, 128, 64)
    variational_qv: bool = False
    aleatoric_head: bool = True
    ablation: str = ABLATION_FULL
    init_std: float = 0.02

    def __post_init__(self) -> None:
        if self.ablation not in ABLATIONS:
            raise ValueError(f"unknown ablation {self.ablation!r}")

    def attention_config(self, mode: str = STOCHASTIC) -> AttentionConfig:
        return AttentionConfig(
            n_heads=self.n_heads,
            d_model=self.d_model,
            d_k=self.d_k,
            d_v=self.d_v,
            mode=mode,
            variational_qv=self.variational_qv,
        )


class BiomarkerTransformer(nn.Module):
    """End-to-end model mapping a tokenized example to (means, log_vars)."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        # The no-Bayesian ablation pins every forward pass to the mean weights.
        self.forced_deterministic = cfg.ablation == ABLATION_NO_BAYESIAN
        self.mode = DETERMINISTIC if self.forced_deterministic else STOCHASTIC
        attn_cfg = cfg.attention_config()
        self.embedding = EmbeddingTable(cfg.d_model, cfg.max_visits)
        self.layers = nn.ModuleList(
            EncoderLayer(attn_cfg) for _ in range(cfg.n_layers)
        )
        self.projection = ProjectionHead(cfg.d_model, cfg.d_latent)
        if cfg.ablation == ABLATION_NO_DEEPMTR:
            self.head = AffineHead(cfg.d_latent)
        else:
            self.head = DeepMTRHead(
                cfg.d_latent, cfg.trunk_dims, aleatoric_head=cfg.aleatoric_head
            )

    def init_weights(self, init_seed_or_generator) -> None:
        """Initialize all parameters from a named stream or explicit generator."""
        if isinstance(init_seed_or_generator, torch.Generator):
            generator = init_seed_or_generator
        else:
            generator = torch_generator(int(init_seed_or_generator), STREAM_INIT)
        std = self.cfg.init_std
        self.embedding.init_weights(generator, std)
        for layer in self.layers:
            layer.init_weights(generator, std)
        self.projection.init_weights(generator, std)
        self.head.init_weights(generator, std)

    def set_mode(self, mode: str) -> None:
        if mode not in (STOCHASTIC, DETERMINISTIC):
            raise ValueError(f"unknown mode {mode!r}")
        self.mode = DETERMINISTIC if self.forced_deterministic else mode

    def effective_mode(self, mode: str | None) -> str:
        if mode is None:
            mode = self.mode
        return DETERMINISTIC if self.forced_deterministic else mode

    def encode(
        self,
        tok: TokenizedExample,
        generator: torch.Generator | None = None,
        mode: str | None = None,
        collect_attention: list | None = None,
        encoded: EncodedSequence | None = None,
    ) -> torch.Tensor:
        mode = self.effective_mode(mode)
        if encoded is None:
            encoded = embed_tokenized(tok, self.embedding)
        hidden = encoded.matrix
        mask = encoded.padding_mask if encoded.padding_mask.any() else None
        for layer in self.layers:
            hidden = layer(
                hidden,
                generator=generator,
                mode=mode,
                padding_mask=mask,
                collect_attention=collect_attention,
            )
        return hidden

    def forward(
        self,
        tok: TokenizedExample,
        generator: torch.Generator | None = None,
        mode: str | None = None,
    ) -> tuple[torch.Tensor, torch.Tensor]:
        hidden = self.encode(tok, generator=generator, mode=mode)
        latent = self.projection(hidden)
        return self.head(latent)

    def predict_example(
        self,
        ex: TrainingExample,
        generator: torch.Generator | None = None,
        mode: str | None = None,
    ) -> tuple[torch.Tensor, torch.Tensor]:
        return self.forward(tokenize_example(ex), generator=generator, mode=mode)

    def attention_maps(
        self,
        tok: TokenizedExample,
        generator: torch.Generator | None = None,
        mode: str | None = DETERMINISTIC,
    ) -> list[torch.Tensor]:
        """Post-softmax attention matrices, one per (layer, head) in order."""
        maps: list[torch.Tensor] = []
        self.encode(tok, generator=generator, mode=mode, collect_attention=maps)
        return maps

    def variational_parameters(self) -> list[tuple[str, VariationalParameter]]:
        return [
            (name, module)
            for name, module in self.named_modules()
            if isinstance(module, VariationalParameter)
        ]

    def kl(self) -> torch.Tensor:
        """Total KL penalty summed over every variational weight matrix."""
        total = torch.zeros((), dtype=self.projection.W_proj.dtype)
        for _, vp in self.variational_parameters():
            total = total + kl_divergence(vp)
        return total


def build_model(cfg: ModelConfig, master_seed: int) -> BiomarkerTransformer:
    model = BiomarkerTransformer(cfg).to(torch.float64)
    model.init_weights(master_seed)
    return model
