"""Shared-trunk multi-target regression head.

A shared fully connected block (default 512 -> 128 -> 64, ReLU) feeds four
independent target heads, one per biomarker. Each head predicts a mean and,
when the heteroscedastic option is on, a log variance. The ablated variant
replaces the whole block with a single affine map and estimates per-target
variance from validation residuals instead.
"""

from __future__ import annotations

import torch
from torch import nn

N_TARGETS = 4

LOG_VAR_MIN = -10.0
LOG_VAR_MAX = 3.0

# Starting point for the log-variance head biases: a prior residual variance
# of about exp(-3) in normalized units, close enough that the heads can reach
# the data's noise floor within a training budget.
LOG_VAR_BIAS_INIT = -3.0


class DeepMTRHead(nn.Module):
    """Shared trunk plus per-target mean (and optional log-variance) heads."""

    def __init__(
        self,
        d_latent: int = 128,
        trunk_dims: tuple[int, int, int] = (512, 128, 64),
        aleatoric_head: bool = True,
    ):
        super().__init__()
        self.aleatoric_head = aleatoric_head
        dims = (d_latent, *trunk_dims)
        self.trunk = nn.ModuleList(
            nn.Linear(dims[i], dims[i + 1]) for i in range(len(trunk_dims))
        )
        self.mean_heads = nn.ModuleList(
            nn.Linear(trunk_dims[-1], 1) for _ in range(N_TARGETS)
        )
        if aleatoric_head:
            self.log_var_heads = nn.ModuleList(
                nn.Linear(trunk_dims[-1], 1) for _ in range(N_TARGETS)
            )
        # Used when the learned heads are off: per-target log variance
        # estimated from validation residuals after training.
        self.register_buffer("fallback_log_vars", torch.zeros(N_TARGETS))

    def init_weights(self, generator: torch.Generator, std: float = 0.02) -> None:
        linears = list(self.trunk) + list(self.mean_heads)
        if self.aleatoric_head:
            linears += list(self.log_var_heads)
        with torch.no_grad():
            for linear in linears:
                linear.weight.copy_(
                    torch.randn(linear.weight.shape, generator=generator, dtype=linear.weight.dtype)
                    * std
                )
                linear.bias.zero_()
            if self.aleatoric_head:
                for head in self.log_var_heads:
                    head.bias.fill_(LOG_VAR_BIAS_INIT)

    def forward(self, z: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        hidden = z
        for linear in self.trunk:
            hidden = torch.relu(linear(hidden))
        means = torch.cat([head(hidden) for head in self.mean_heads])
        if self.aleatoric_head:
            log_vars = torch.cat([head(hidden) for head in self.log_var_heads])
        else:
            log_vars = self.fallback_log_vars
        return means, log_vars.clamp(LOG_VAR_MIN, LOG_VAR_MAX)


class AffineHead(nn.Module):
    """Ablation head: a single affine map from the latent to the 4 targets."""

    def __init__(self, d_latent: int = 128):
        super().__init__()
        self.linear = nn.Linear(d_latent, N_TARGETS)
        self.register_buffer("fallback_log_vars", torch.zeros(N_TARGETS))

    def init_weights(self, generator: torch.Generator, std: float = 0.02) -> None:
        with torch.no_grad():
            self.linear.weight.copy_(
                torch.randn(
                    self.linear.weight.shape, generator=generator, dtype=self.linear.weight.dtype
                )
                * std
            )
            self.linear.bias.zero_()

    def forward(self, z: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        return self.linear(z), self.fallback_log_vars.clamp(LOG_VAR_MIN, LOG_VAR_MAX)


def mtr_forward(z: torch.Tensor, head: nn.Module) -> tuple[torch.Tensor, torch.Tensor]:
    return head(z)
