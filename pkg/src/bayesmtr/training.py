"""Training: loss assembly, optimization loop, gradient verification,
ablation switches, and bit-exact checkpointing.

The objective is data term + lambda * KL, where the data term is either the
mean squared error over the four targets or, with the heteroscedastic head on,
the Gaussian negative log-likelihood. KL is summed over all variational
entries and scaled once by lambda (no per-batch rescaling).
"""

from __future__ import annotations

import json
import math
import time
from dataclasses import asdict, dataclass, field, replace
from datetime import date

import numpy as np
import torch

from bayesmtr.attention import DETERMINISTIC, STOCHASTIC
from bayesmtr.encoder import DTYPE, TokenizedExample, tokenize_example
from bayesmtr.ingest import CohortSplit, DEFAULT_ONSET, make_example
from bayesmtr.model import (
    ABLATION_FULL,
    ABLATION_NO_BAYESIAN,
    ABLATION_NO_DEEPMTR,
    ABLATIONS,
    BiomarkerTransformer,
    ModelConfig,
    build_model,
)
from bayesmtr.mtr import LOG_VAR_MIN
from bayesmtr.seeding import np_generator, torch_generator


class NonFiniteLossError(RuntimeError):
    def __init__(self, message: str, report: "TrainReport | None" = None):
        super().__init__(message)
        self.report = report


class NonFiniteGradientError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    epochs: int = 50
    batch_size: int = 4
    weight_decay: float = 0.01
    learning_rate: float = 3e-3
    lambda_kl: float = 1e-4
    seed: int = 0
    ablation: str = ABLATION_FULL
    aleatoric_head: bool = True
    mc_samples: int = 1

    def __post_init__(self) -> None:
        if self.epochs <= 0 or self.batch_size <= 0 or self.learning_rate < 0:
            raise ValueError("epochs and batch_size must be positive, lr >= 0")
        if self.lambda_kl < 0:
            raise ValueError("lambda_kl must be >= 0")
        if self.ablation not in ABLATIONS:
            raise ValueError(f"unknown ablation {self.ablation!r}")

    @property
    def effective_lambda(self) -> float:
        return 0.0 if self.ablation == ABLATION_NO_BAYESIAN else self.lambda_kl

    @property
    def effective_aleatoric(self) -> bool:
        # The affine ablation head has no log-variance outputs.
        return self.aleatoric_head and self.ablation != ABLATION_NO_DEEPMTR


@dataclass
class LossBreakdown:
    """One loss evaluation. ``total`` equals (nll if used, else mse) + lam*kl."""

    mse: float
    kl: float
    lam: float
    nll: float | None
    total: float

    def to_dict(self) -> dict:
        return {
            "mse": self.mse,
            "kl": self.kl,
            "lambda": self.lam,
            "nll": self.nll,
            "total": self.total,
        }


def example_data_terms(
    y: torch.Tensor, y_hat: torch.Tensor, log_vars: torch.Tensor
) -> tuple[torch.Tensor, torch.Tensor]:
    """(mse, nll) for one example, both averaged over the 4 targets."""
    sq = (y - y_hat) ** 2
    mse = sq.mean()
    nll = 0.5 * (log_vars + sq * torch.exp(-log_vars)).mean()
    return mse, nll


def total_loss(
    y: torch.Tensor,
    y_hat: torch.Tensor,
    log_vars: torch.Tensor,
    kl: torch.Tensor,
    cfg: TrainConfig,
) -> tuple[torch.Tensor, LossBreakdown]:
    """Single-example objective and its breakdown."""
    mse, nll = example_data_terms(y, y_hat, log_vars)
    lam = cfg.effective_lambda
    data = nll if cfg.effective_aleatoric else mse
    total = data + lam * kl
    breakdown = LossBreakdown(
        mse=mse.item(),
        kl=kl.item(),
        lam=lam,
        nll=nll.item() if cfg.effective_aleatoric else None,
        total=data.item() + lam * kl.item(),
    )
    return total, breakdown


def batch_loss(
    model: BiomarkerTransformer,
    batch: list[TokenizedExample],
    cfg: TrainConfig,
    generator: torch.Generator | None = None,
    mode: str | None = None,
) -> tuple[torch.Tensor, LossBreakdown]:
    """Mean data term over the batch plus the (batch-independent) KL term."""
    if not batch:
        raise ValueError("empty batch")
    mse_sum = torch.zeros((), dtype=DTYPE)
    nll_sum = torch.zeros((), dtype=DTYPE)
    for tok in batch:
        reps = cfg.mc_samples if model.effective_mode(mode) == STOCHASTIC else 1
        mse_acc = torch.zeros((), dtype=DTYPE)
        nll_acc = torch.zeros((), dtype=DTYPE)
        for _ in range(reps):
            means, log_vars = model(tok, generator=generator, mode=mode)
            mse, nll = example_data_terms(tok.target, means, log_vars)
            mse_acc = mse_acc + mse
            nll_acc = nll_acc + nll
        mse_sum = mse_sum + mse_acc / reps
        nll_sum = nll_sum + nll_acc / reps
    mse_mean = mse_sum / len(batch)
    nll_mean = nll_sum / len(batch)
    kl = model.kl()
    lam = cfg.effective_lambda
    data = nll_mean if cfg.effective_aleatoric else mse_mean
    total = data + lam * kl
    breakdown = LossBreakdown(
        mse=mse_mean.item(),
        kl=kl.item(),
        lam=lam,
        nll=nll_mean.item() if cfg.effective_aleatoric else None,
        total=data.item() + lam * kl.item(),
    )
    return total, breakdown


def backward(
    model: BiomarkerTransformer,
    batch: list[TokenizedExample],
    cfg: TrainConfig,
    generator: torch.Generator | None = None,
    mode: str | None = None,
) -> dict[str, torch.Tensor]:
    """Gradients of the batch objective for every learnable tensor.

    Reparameterization makes mu and log_sigma differentiable through the
    sampled weights; in stochastic mode the eps draws of this pass are baked
    into the graph, so these are pathwise gradients.
    """
    model.zero_grad(set_to_none=True)
    total, _ = batch_loss(model, batch, cfg, generator=generator, mode=mode)
    if not torch.isfinite(total):
        raise NonFiniteLossError(f"non-finite loss {total.item()}")
    total.backward()
    grads: dict[str, torch.Tensor] = {}
    for name, param in model.named_parameters():
        if param.grad is None:
            continue
        if not torch.isfinite(param.grad).all():
            raise NonFiniteGradientError(f"non-finite gradient for tensor {name}")
        grads[name] = param.grad.detach().clone()
    return grads


def gradient_check(
    model: BiomarkerTransformer,
    batch: list[TokenizedExample],
    cfg: TrainConfig,
    epsilon: float = 1e-5,
    n_coords: int = 200,
    seed: int = 0,
) -> float:
    """Max relative error between analytic and central-difference gradients.

    Runs in deterministic mode over >= ``n_coords`` randomly sampled parameter
    coordinates. Relative error is |g_a - g_n| / max(1e-8, |g_a| + |g_n|).
    """
    analytic = backward(model, batch, cfg, mode=DETERMINISTIC)

    params = [(name, p) for name, p in model.named_parameters() if p.requires_grad]
    sizes = [p.numel() for _, p in params]
    offsets = np.cumsum([0] + sizes)
    total_size = int(offsets[-1])
    rng = np.random.Generator(np.random.PCG64(seed))
    n = min(n_coords, total_size)
    flat_indices = rng.choice(total_size, size=n, replace=False)

    def loss_parts() -> tuple[float, float]:
        """(data term, kl) separately, so the central difference of the total
        can be assembled without the large KL offset quantizing the small data
        change (the KL part cancels bit-exactly for non-variational
        coordinates)."""
        with torch.no_grad():
            _, breakdown = batch_loss(model, batch, cfg, mode=DETERMINISTIC)
        data = breakdown.nll if cfg.effective_aleatoric else breakdown.mse
        return data, breakdown.kl

    max_rel = 0.0
    for flat in flat_indices:
        which = int(np.searchsorted(offsets, flat, side="right")) - 1
        name, param = params[which]
        local = int(flat - offsets[which])
        flat_view = param.data.view(-1)
        original = flat_view[local].item()
        with torch.no_grad():
            flat_view[local] = original + epsilon
        data_plus, kl_plus = loss_parts()
        with torch.no_grad():
            flat_view[local] = original - epsilon
        data_minus, kl_minus = loss_parts()
        with torch.no_grad():
            flat_view[local] = original
        numeric = (
            (data_plus - data_minus) + cfg.effective_lambda * (kl_plus - kl_minus)
        ) / (2.0 * epsilon)
        g_analytic = analytic[name].view(-1)[local].item() if name in analytic else 0.0
        rel = abs(g_analytic - numeric) / max(1e-8, abs(g_analytic) + abs(numeric))
        max_rel = max(max_rel, rel)
    return max_rel


def decay_mask(model: BiomarkerTransformer) -> dict[str, bool]:
    """True where weight decay applies.

    Decay covers the variational means, deterministic projections, and the
    trunk/head weight matrices. log_sigma is excluded (decaying it would bias
    sigma toward 1), as are biases, layer-norm parameters, and embeddings.
    """
    mask: dict[str, bool] = {}
    for name, _ in model.named_parameters():
        no_decay = (
            "log_sigma" in name
            or name.endswith(".bias")
            or name.endswith("b_proj")
            or ".norm." in name
            or name.startswith("embedding.")
        )
        mask[name] = not no_decay
    return mask


def make_optimizer(model: BiomarkerTransformer, cfg: TrainConfig) -> torch.optim.AdamW:
    mask = decay_mask(model)
    assert not any(mask[n] for n, _ in model.named_parameters() if "log_sigma" in n)
    decay = [p for n, p in model.named_parameters() if mask[n]]
    no_decay = [p for n, p in model.named_parameters() if not mask[n]]
    return torch.optim.AdamW(
        [
            {"params": decay, "weight_decay": cfg.weight_decay},
            {"params": no_decay, "weight_decay": 0.0},
        ],
        lr=cfg.learning_rate,
        betas=(0.9, 0.999),
    )


@dataclass
class EpochStats:
    epoch: int
    train: LossBreakdown
    val: LossBreakdown

    def to_dict(self) -> dict:
        return {"epoch": self.epoch, "train": self.train.to_dict(), "val": self.val.to_dict()}


@dataclass
class TrainReport:
    variant: str
    seed: int
    epochs: list[EpochStats] = field(default_factory=list)
    best_epoch: int = -1
    best_val_total: float = math.inf
    wall_clock_s: float = 0.0

    def to_dict(self) -> dict:
        return {
            "variant": self.variant,
            "seed": self.seed,
            "best_epoch": self.best_epoch,
            "best_val_total": self.best_val_total,
            "wall_clock_s": self.wall_clock_s,
            "epochs": [e.to_dict() for e in self.epochs],
        }

    def core_dict(self) -> dict:
        """Everything except wall-clock time; the determinism contract."""
        d = self.to_dict()
        d.pop("wall_clock_s")
        return d

    def save_json(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_dict(), fh, indent=1)
            fh.write("\n")


def dataset_loss(
    model: BiomarkerTransformer,
    examples: list[TokenizedExample],
    cfg: TrainConfig,
    mode: str = DETERMINISTIC,
) -> LossBreakdown:
    """Mean loss over a dataset, by default in deterministic mode (eps = 0)."""
    with torch.no_grad():
        _, breakdown = batch_loss(model, examples, cfg, mode=mode)
    return breakdown


def apply_ablation(
    cfg: TrainConfig, model_cfg: ModelConfig | None = None
) -> ModelConfig:
    """Resolve the model variant implied by the ablation switch."""
    base = model_cfg if model_cfg is not None else ModelConfig()
    return replace(
        base, ablation=cfg.ablation, aleatoric_head=cfg.effective_aleatoric
    )


def train(
    split: CohortSplit,
    cfg: TrainConfig,
    model_cfg: ModelConfig | None = None,
    onset: date = DEFAULT_ONSET,
) -> tuple[BiomarkerTransformer, TrainReport]:
    """Mini-batch training with one fresh weight sample per forward pass.

    Validation runs each epoch in deterministic mode; the best-validation
    checkpoint is restored before returning. The split must come from a
    plausibility-filtered cohort.
    """
    if not split.train:
        raise ValueError("training split is empty")
    train_toks = [tokenize_example(make_example(p, onset)) for p in split.train]
    val_toks = [tokenize_example(make_example(p, onset)) for p in split.val]

    resolved_cfg = apply_ablation(cfg, model_cfg)
    model = build_model(resolved_cfg, cfg.seed)
    optimizer = make_optimizer(model, cfg)
    shuffle_rng = np_generator(cfg.seed, "data.shuffle")
    sample_gen = torch_generator(cfg.seed, "sampling")

    report = TrainReport(variant=cfg.ablation, seed=cfg.seed)
    best_state: dict[str, torch.Tensor] | None = None
    started = time.perf_counter()

    for epoch in range(cfg.epochs):
        order = shuffle_rng.permutation(len(train_toks))
        mse_sum = kl_sum = nll_sum = total_sum = 0.0
        n_batches = 0
        for start in range(0, len(order), cfg.batch_size):
            batch = [train_toks[i] for i in order[start : start + cfg.batch_size]]
            model.zero_grad(set_to_none=True)
            total, breakdown = batch_loss(model, batch, cfg, generator=sample_gen)
            if not math.isfinite(breakdown.total):
                report.wall_clock_s = time.perf_counter() - started
                raise NonFiniteLossError(
                    f"non-finite loss at epoch {epoch}", report=report
                )
            total.backward()
            optimizer.step()
            mse_sum += breakdown.mse
            kl_sum += breakdown.kl
            nll_sum += breakdown.nll if breakdown.nll is not None else 0.0
            total_sum += breakdown.total
            n_batches += 1

        lam = cfg.effective_lambda
        train_stats = LossBreakdown(
            mse=mse_sum / n_batches,
            kl=kl_sum / n_batches,
            lam=lam,
            nll=(nll_sum / n_batches) if cfg.effective_aleatoric else None,
            total=total_sum / n_batches,
        )
        val_stats = dataset_loss(model, val_toks, cfg) if val_toks else train_stats
        report.epochs.append(EpochStats(epoch=epoch, train=train_stats, val=val_stats))

        if val_stats.total < report.best_val_total:
            report.best_val_total = val_stats.total
            report.best_epoch = epoch
            best_state = {
                k: v.detach().clone() for k, v in model.state_dict().items()
            }

    if best_state is not None:
        model.load_state_dict(best_state)

    if not cfg.effective_aleatoric and val_toks:
        calibrate_fallback_variance(model, val_toks)

    report.wall_clock_s = time.perf_counter() - started
    return model, report


def calibrate_fallback_variance(
    model: BiomarkerTransformer, examples: list[TokenizedExample]
) -> None:
    """Estimate per-target residual variance in deterministic mode and store
    it as the head's fallback log variance."""
    residuals = []
    with torch.no_grad():
        for tok in examples:
            means, _ = model(tok, mode=DETERMINISTIC)
            residuals.append((tok.target - means) ** 2)
        var = torch.stack(residuals).mean(dim=0)
        log_var = torch.log(torch.clamp(var, min=math.exp(LOG_VAR_MIN)))
        model.head.fallback_log_vars.copy_(log_var)


CHECKPOINT_VERSION = 1


def save_checkpoint(
    model: BiomarkerTransformer, path, metadata: dict | None = None
) -> None:
    """JSON manifest of every named tensor (shape + row-major values).

    Python's repr-based float serialization round-trips IEEE doubles exactly,
    so save -> load -> save is bit-identical.
    """
    cfg = model.cfg
    payload = {
        "format_version": CHECKPOINT_VERSION,
        "model_config": {**asdict(cfg), "trunk_dims": list(cfg.trunk_dims)},
        "metadata": metadata or {},
        "tensors": {
            name: {"shape": list(tensor.shape), "data": tensor.reshape(-1).tolist()}
            for name, tensor in model.state_dict().items()
        },
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh)
        fh.write("\n")


def load_checkpoint(path) -> tuple[BiomarkerTransformer, dict]:
    with open(path, "r", encoding="utf-8") as fh:
        payload = json.load(fh)
    if payload.get("format_version") != CHECKPOINT_VERSION:
        raise ValueError(
            f"unsupported checkpoint version {payload.get('format_version')}"
        )
    raw_cfg = dict(payload["model_config"])
    raw_cfg["trunk_dims"] = tuple(raw_cfg["trunk_dims"])
    cfg = ModelConfig(**raw_cfg)
    model = BiomarkerTransformer(cfg).to(DTYPE)
    state = {
        name: torch.tensor(entry["data"], dtype=DTYPE).reshape(entry["shape"])
        for name, entry in payload["tensors"].items()
    }
    model.load_state_dict(state)
    return model, payload["metadata"]
