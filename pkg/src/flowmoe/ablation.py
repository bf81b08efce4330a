"""Ablation harness: retrain with one component removed or rescaled.

Variants:
  * ``zero_losses``: same architecture, both balancing losses set to zero.
  * ``no_moe``: the expert head replaced by a single dense 128 -> 9 layer.
  * ``no_cnn``: everything replaced by one dense 78 -> 9 layer.
  * ``(n, k)`` pairs: the full architecture with a rescaled expert bank.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

from .errors import ConfigError
from .layers import Module
from .metrics import EvalReport
from .pipeline import EncodedDataset
from .training import TrainConfig, evaluate, fit

NAMED_VARIANTS = ("zero_losses", "no_moe", "no_cnn")

# The expert-count sweep: (number of experts, experts kept per sample).
EXPERT_GRID = ((64, 32), (64, 16), (32, 16), (32, 4), (16, 4))

# The grid exposed on the command line also includes the full-scale pair.
DEFAULT_CLI_GRID = ((128, 32),) + EXPERT_GRID


def ablation_config(base: TrainConfig, variant) -> TrainConfig:
    """Effective config for a variant; touches only the ablated fields."""
    if variant == "zero_losses":
        return replace(base, disable_balancing_losses=True)
    if variant == "no_moe":
        return replace(base, disable_moe=True)
    if variant == "no_cnn":
        return replace(base, disable_cnn=True)
    if isinstance(variant, (tuple, list)) and len(variant) == 2:
        n, k = int(variant[0]), int(variant[1])
        return replace(base, n_experts=n, top_k=k)
    raise ConfigError(
        f"unknown ablation variant {variant!r}; expected one of "
        f"{NAMED_VARIANTS} or an (n_experts, top_k) pair"
    )


def variant_name(variant) -> str:
    if isinstance(variant, (tuple, list)):
        return f"experts_{variant[0]}_top{variant[1]}"
    return str(variant)


@dataclass
class AblationResult:
    variant: str
    config: TrainConfig
    model: Module
    history: list
    report: EvalReport


def run_ablation(base: TrainConfig, variant, train_set: EncodedDataset,
                 test_set: EncodedDataset) -> AblationResult:
    """Train the requested variant with otherwise identical settings."""
    config = ablation_config(base, variant)
    model, history = fit(train_set, config)
    report = evaluate(model, test_set, batch_size=config.batch_size)
    return AblationResult(
        variant=variant_name(variant),
        config=config,
        model=model,
        history=history,
        report=report,
    )


def run_expert_grid(base: TrainConfig, pairs, train_set: EncodedDataset,
                    test_set: EncodedDataset) -> list:
    """One full train/evaluate cycle per (n, k) pair."""
    return [run_ablation(base, tuple(pair), train_set, test_set) for pair in pairs]
