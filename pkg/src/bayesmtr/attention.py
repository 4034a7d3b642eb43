"""Multi-head self-attention with Gaussian (variational) key projections.

Key-projection weights are random variables W = mu + exp(log_sigma) * eps with
eps ~ N(0, I) drawn fresh once per forward pass per head (reparameterization),
regularized toward a standard-normal prior through a closed-form KL penalty.
Queries, values, and the output projection stay deterministic unless
``variational_qv`` is enabled.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
from torch import nn

STOCHASTIC = "stochastic"
DETERMINISTIC = "deterministic"

LOG_SIGMA_MIN = -10.0
LOG_SIGMA_MAX = 3.0
LOG_SIGMA_INIT = -2.0
LAYER_NORM_EPS = 1e-5


@dataclass
class AttentionConfig:
    n_heads: int = 4
    d_model: int = 64
    d_k: int = 16
    d_v: int = 16
    mode: str = STOCHASTIC
    variational_qv: bool = False

    def __post_init__(self) -> None:
        if self.mode not in (STOCHASTIC, DETERMINISTIC):
            raise ValueError(f"unknown mode {self.mode!r}")
        if self.n_heads * self.d_k > self.d_model:
            raise ValueError(
                f"n_heads*d_k = {self.n_heads * self.d_k} exceeds d_model = {self.d_model}"
            )


class VariationalParameter(nn.Module):
    """A Gaussian weight matrix: learnable mean and log standard deviation."""

    def __init__(self, d_in: int, d_out: int):
        super().__init__()
        self.mu = nn.Parameter(torch.empty(d_in, d_out))
        self.log_sigma = nn.Parameter(torch.full((d_in, d_out), LOG_SIGMA_INIT))

    def init_weights(self, generator: torch.Generator, std: float = 0.02) -> None:
        with torch.no_grad():
            self.mu.copy_(
                torch.randn(self.mu.shape, generator=generator, dtype=self.mu.dtype) * std
            )
            self.log_sigma.fill_(LOG_SIGMA_INIT)

    def clamped_log_sigma(self) -> torch.Tensor:
        return self.log_sigma.clamp(LOG_SIGMA_MIN, LOG_SIGMA_MAX)


def sample_weights(
    vp: VariationalParameter,
    generator: torch.Generator | None = None,
    mode: str = STOCHASTIC,
) -> torch.Tensor:
    """Draw one weight matrix; deterministic mode returns the mean exactly."""
    if mode == DETERMINISTIC:
        return vp.mu
    eps = torch.randn(vp.mu.shape, generator=generator, dtype=vp.mu.dtype)
    return vp.mu + torch.exp(vp.clamped_log_sigma()) * eps


def kl_divergence(vp: VariationalParameter) -> torch.Tensor:
    """KL(q || N(0, I)) for a diagonal Gaussian, summed over all entries.

    Per entry: -log_sigma + (sigma^2 + mu^2 - 1) / 2, computed in the
    algebraically equal form (expm1(2*log_sigma) - 2*log_sigma)/2 + mu^2/2
    whose two summands are individually nonnegative, so the result can never
    round below zero.
    """
    log_sigma = vp.clamped_log_sigma()
    sigma_term = 0.5 * (torch.expm1(2.0 * log_sigma) - 2.0 * log_sigma)
    return (sigma_term + 0.5 * vp.mu**2).sum()


def attention_scores(
    q: torch.Tensor,
    k_prime: torch.Tensor,
    d_k: int | None = None,
    padding_mask: torch.Tensor | None = None,
) -> torch.Tensor:
    """Scaled dot-product scores; padded key columns are set to -inf."""
    if q.shape[-1] != k_prime.shape[-1]:
        raise ValueError(
            f"query dim {q.shape[-1]} != key dim {k_prime.shape[-1]}"
        )
    if d_k is None:
        d_k = q.shape[-1]
    scores = q @ k_prime.transpose(-2, -1) / math.sqrt(d_k)
    if padding_mask is not None:
        scores = scores.masked_fill(padding_mask.unsqueeze(0), float("-inf"))
    return scores


def softmax_rows(scores: torch.Tensor) -> torch.Tensor:
    """Row-wise softmax, stabilized by row-max subtraction.

    -inf entries (mask sentinels) get exactly 0; a fully masked row is an
    error because its normalization is undefined.
    """
    row_max = scores.max(dim=-1, keepdim=True).values
    if torch.isinf(row_max).any():
        raise ValueError("softmax over a fully masked row")
    exp = torch.exp(scores - row_max)
    return exp / exp.sum(dim=-1, keepdim=True)


class HeadWeights(nn.Module):
    """Per-head projections: deterministic q/v, variational key projection.

    With ``variational_qv`` the query and value projections become Gaussian
    as well (the fully Bayesian variant).
    """

    def __init__(self, cfg: AttentionConfig):
        super().__init__()
        self.variational_qv = cfg.variational_qv
        self.Wk_var = VariationalParameter(cfg.d_model, cfg.d_k)
        if cfg.variational_qv:
            self.Wq_var = VariationalParameter(cfg.d_model, cfg.d_k)
            self.Wv_var = VariationalParameter(cfg.d_model, cfg.d_v)
        else:
            self.Wq = nn.Parameter(torch.empty(cfg.d_model, cfg.d_k))
            self.Wv = nn.Parameter(torch.empty(cfg.d_model, cfg.d_v))

    def init_weights(self, generator: torch.Generator, std: float = 0.02) -> None:
        self.Wk_var.init_weights(generator, std)
        if self.variational_qv:
            self.Wq_var.init_weights(generator, std)
            self.Wv_var.init_weights(generator, std)
        else:
            with torch.no_grad():
                self.Wq.copy_(
                    torch.randn(self.Wq.shape, generator=generator, dtype=self.Wq.dtype) * std
                )
                self.Wv.copy_(
                    torch.randn(self.Wv.shape, generator=generator, dtype=self.Wv.dtype) * std
                )

    def project(
        self, X: torch.Tensor, generator: torch.Generator | None, mode: str
    ) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
        """One weight sample per call: returns (q, k', v)."""
        if self.variational_qv:
            q = X @ sample_weights(self.Wq_var, generator, mode)
            v = X @ sample_weights(self.Wv_var, generator, mode)
        else:
            q = X @ self.Wq
            v = X @ self.Wv
        k_prime = X @ sample_weights(self.Wk_var, generator, mode)
        return q, k_prime, v


class MultiHeadSelfAttention(nn.Module):
    """Concatenated attention heads, output projection, residual, layer norm."""

    def __init__(self, cfg: AttentionConfig):
        super().__init__()
        self.cfg = cfg
        self.heads = nn.ModuleList(HeadWeights(cfg) for _ in range(cfg.n_heads))
        self.Wo = nn.Parameter(torch.empty(cfg.n_heads * cfg.d_v, cfg.d_model))
        self.norm = nn.LayerNorm(cfg.d_model, eps=LAYER_NORM_EPS)

    def init_weights(self, generator: torch.Generator, std: float = 0.02) -> None:
        for head in self.heads:
            head.init_weights(generator, std)
        with torch.no_grad():
            self.Wo.copy_(
                torch.randn(self.Wo.shape, generator=generator, dtype=self.Wo.dtype) * std
            )
            self.norm.weight.fill_(1.0)
            self.norm.bias.zero_()

    def forward(
        self,
        X: torch.Tensor,
        generator: torch.Generator | None = None,
        mode: str | None = None,
        padding_mask: torch.Tensor | None = None,
        collect_attention: list | None = None,
    ) -> torch.Tensor:
        mode = self.cfg.mode if mode is None else mode
        if mode == STOCHASTIC and generator is None:
            raise ValueError("stochastic mode requires a generator")
        outputs = []
        for head in self.heads:
            q, k_prime, v = head.project(X, generator, mode)
            scores = attention_scores(q, k_prime, self.cfg.d_k, padding_mask)
            weights = softmax_rows(scores)
            if collect_attention is not None:
                collect_attention.append(weights.detach())
            outputs.append(weights @ v)
        attended = torch.cat(outputs, dim=-1) @ self.Wo
        return self.norm(X + attended)


def multi_head_forward(
    X: torch.Tensor,
    attention: MultiHeadSelfAttention,
    generator: torch.Generator | None = None,
    mode: str | None = None,
    padding_mask: torch.Tensor | None = None,
) -> torch.Tensor:
    return attention(X, generator=generator, mode=mode, padding_mask=padding_mask)


class EncoderLayer(nn.Module):
    """Attention sublayer plus a position-wise feed-forward sublayer,
    each wrapped in residual + layer norm."""

    def __init__(self, cfg: AttentionConfig):
        super().__init__()
        self.attention = MultiHeadSelfAttention(cfg)
        self.ff1 = nn.Linear(cfg.d_model, 4 * cfg.d_model)
        self.ff2 = nn.Linear(4 * cfg.d_model, cfg.d_model)
        self.norm = nn.LayerNorm(cfg.d_model, eps=LAYER_NORM_EPS)

    def init_weights(self, generator: torch.Generator, std: float = 0.02) -> None:
        self.attention.init_weights(generator, std)
        with torch.no_grad():
            for linear in (self.ff1, self.ff2):
                linear.weight.copy_(
                    torch.randn(linear.weight.shape, generator=generator, dtype=linear.weight.dtype)
                    * std
                )
                linear.bias.zero_()
            self.norm.weight.fill_(1.0)
            self.norm.bias.zero_()

    def forward(
        self,
        X: torch.Tensor,
        generator: torch.Generator | None = None,
        mode: str | None = None,
        padding_mask: torch.Tensor | None = None,
        collect_attention: list | None = None,
    ) -> torch.Tensor:
        attended = self.attention(
            X,
            generator=generator,
            mode=mode,
            padding_mask=padding_mask,
            collect_attention=collect_attention,
        )
        hidden = self.ff2(torch.relu(self.ff1(attended)))
        return self.norm(attended + hidden)
