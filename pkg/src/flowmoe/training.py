"""Training loop, combined objective, and evaluation.

The objective is cross-entropy plus alpha times the sum of the two
balancing losses.  Training is plain mini-batch gradient descent with the
Adam update rule for a fixed number of epochs; a whole run (initialization,
shuffling, gate noise) is a function of one seed.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass

import numpy as np

from .errors import ConfigError, TrainingDivergedError
from .layers import Module, cross_entropy
from .metrics import EvalReport
from .model import ModelConfig, build_model
from .moe import GateDecision, importance_loss, load_loss, load_probability, noisy_gate
from .pipeline import EncodedDataset
from .tensor import RngState, Tensor, coefficient_of_variation_sq, matmul, softplus

log = logging.getLogger("flowmoe.training")


@dataclass
class TrainConfig:
    """Run hyperparameters.  The defaults are the full-scale setup: 128
    experts with k=32, alpha 0.1, batch size 1024, at most 40 epochs.
    Optimizer choice and learning rate are toolkit decisions (recorded in
    every checkpoint); the ablation flags select the reduced variants."""

    batch_size: int = 1024
    max_epochs: int = 40
    alpha: float = 0.1
    n_experts: int = 128
    top_k: int = 32
    optimizer: str = "adam"
    learning_rate: float = 1e-3
    seed: int = 0
    disable_balancing_losses: bool = False
    disable_moe: bool = False
    disable_cnn: bool = False
    expert_hidden: int = 16
    n_classes: int = 9
    input_shape: tuple = (6, 13)
    cnn_filters: tuple = (16, 32, 64, 128)
    noise_enabled: bool = True

    def __post_init__(self):
        if self.batch_size < 1:
            raise ConfigError("batch_size must be positive")
        if self.max_epochs < 1:
            raise ConfigError("max_epochs must be positive")
        if self.optimizer != "adam":
            raise ConfigError(f"unsupported optimizer {self.optimizer!r}")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, raw: dict) -> "TrainConfig":
        raw = dict(raw)
        raw["input_shape"] = tuple(raw["input_shape"])
        raw["cnn_filters"] = tuple(raw["cnn_filters"])
        return cls(**raw)


def model_config_for(config: TrainConfig) -> ModelConfig:
    """Map run options onto an architecture description."""
    if config.disable_cnn:
        variant = "dense"
    elif config.disable_moe:
        variant = "cnn_dense"
    else:
        variant = "cnn_moe"
    zero = config.disable_balancing_losses
    return ModelConfig(
        variant=variant,
        input_shape=config.input_shape,
        cnn_filters=config.cnn_filters,
        n_experts=config.n_experts,
        top_k=config.top_k,
        expert_hidden=config.expert_hidden,
        n_classes=config.n_classes,
        w_importance=0.0 if zero else 1.0,
        w_load=0.0 if zero else 1.0,
        noise_enabled=config.noise_enabled,
    )


class Adam:
    """Adaptive moment estimation with bias correction."""

    def __init__(self, params, lr: float = 1e-3, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.params = list(params)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def step(self) -> None:
        self.t += 1
        for i, p in enumerate(self.params):
            if p.grad is None:
                continue
            g = p.grad
            self.m[i] = self.beta1 * self.m[i] + (1 - self.beta1) * g
            self.v[i] = self.beta2 * self.v[i] + (1 - self.beta2) * g * g
            m_hat = self.m[i] / (1 - self.beta1 ** self.t)
            v_hat = self.v[i] / (1 - self.beta2 ** self.t)
            p.data = p.data - self.lr * m_hat / (np.sqrt(v_hat) + self.eps)

    def zero_grad(self) -> None:
        for p in self.params:
            p.zero_grad()


def total_loss(logits: Tensor, labels, gates: Tensor | None = None,
               load_p: Tensor | None = None, alpha: float = 0.1,
               w_importance: float = 1.0, w_load: float = 1.0):
    """Combined objective: cross-entropy + alpha * (importance + load).

    Returns the scalar loss tensor and a dict of the component values for
    logging.  Absent gate / load inputs contribute exactly zero.
    """
    ce = cross_entropy(logits, labels)
    imp = importance_loss(gates, w_importance) if gates is not None and w_importance > 0 \
        else Tensor(0.0)
    load = load_loss(load_p, w_load) if load_p is not None and w_load > 0 else Tensor(0.0)
    loss = ce + alpha * (imp + load)
    components = {
        "total": float(loss.data),
        "cross_entropy": float(ce.data),
        "importance": float(imp.data),
        "load": float(load.data),
    }
    return loss, components


def _check_finite(components: dict, epoch: int, step: int) -> None:
    # name the root component, not the aggregate
    for name in ("cross_entropy", "importance", "load", "total"):
        value = components[name]
        if not math.isfinite(value):
            raise TrainingDivergedError(
                f"loss component {name!r} became {value} at epoch {epoch}, step {step}"
            )


def train(model: Module, train_set: EncodedDataset, config: TrainConfig,
          rng: RngState | None = None):
    """Mini-batch training on the combined objective.

    Per-epoch history records the mean of every loss component and the
    training accuracy.  Deterministic given (model init, config.seed):
    shuffling and gate noise come from the single provided stream.
    """
    if len(train_set) == 0:
        raise ConfigError("training set is empty")
    if rng is None:
        rng = RngState(config.seed)
    w = model.config
    optimizer = Adam(model.parameters(), lr=config.learning_rate)
    model.train()
    n = len(train_set)
    history = []
    for epoch in range(1, config.max_epochs + 1):
        order = rng.permutation(n)
        sums = {"total": 0.0, "cross_entropy": 0.0, "importance": 0.0, "load": 0.0}
        correct = 0
        n_batches = 0
        for step, start in enumerate(range(0, n, config.batch_size), start=1):
            idx = order[start:start + config.batch_size]
            x = Tensor(train_set.x[idx])
            y = train_set.y[idx]
            logits, info = model(x, rng)
            gates = info.decision.gates if info.decision is not None else None
            loss, components = total_loss(
                logits, y, gates=gates, load_p=info.load_p, alpha=config.alpha,
                w_importance=w.w_importance, w_load=w.w_load,
            )
            _check_finite(components, epoch, step)
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            for key in sums:
                sums[key] += components[key]
            correct += int((logits.data.argmax(axis=1) == y).sum())
            n_batches += 1
        entry = {key: sums[key] / n_batches for key in sums}
        entry["epoch"] = epoch
        entry["accuracy"] = correct / n
        history.append(entry)
        log.info("epoch %d: total=%.5f ce=%.5f importance=%.5f load=%.5f acc=%.4f",
                 epoch, entry["total"], entry["cross_entropy"], entry["importance"],
                 entry["load"], entry["accuracy"])
    return model, history


def fit(train_set: EncodedDataset, config: TrainConfig):
    """Build and train a model from one seed; returns (model, history)."""
    rng = RngState(config.seed)
    model = build_model(model_config_for(config), rng)
    return train(model, train_set, config, rng)


def predict(model: Module, x: np.ndarray, batch_size: int = 1024) -> np.ndarray:
    """Eval-mode class predictions for a stack of samples."""
    model.eval()
    outputs = []
    for start in range(0, x.shape[0], batch_size):
        logits, _ = model(Tensor(x[start:start + batch_size]))
        outputs.append(logits.data.argmax(axis=1))
    return np.concatenate(outputs) if outputs else np.zeros(0, dtype=np.intp)


def evaluate(model: Module, test_set: EncodedDataset,
             batch_size: int = 1024) -> EvalReport:
    """Deterministic eval-mode metrics over a dataset."""
    if len(test_set) == 0:
        raise ConfigError("evaluation set is empty")
    predictions = predict(model, test_set.x, batch_size)
    return EvalReport.from_predictions(test_set.y, predictions, test_set.class_names)


def expert_utilization(model: Module, dataset: EncodedDataset,
                       batch_size: int = 1024) -> dict:
    """Per-expert routing diagnostics over a dataset (eval mode).

    Importance is the total gate mass per expert; the selection count is how
    many samples kept the expert in their top k; the load estimate applies
    the selection-probability formula with the learned noise scales to the
    clean scores.  The squared CVs are directly comparable to the two
    balancing losses.
    """
    if not hasattr(model, "head"):
        raise ConfigError("gating report requires a model with an expert head")
    model.eval()
    cfg = model.head.config
    n = cfg.n_experts
    importance = np.zeros(n)
    selections = np.zeros(n, dtype=np.int64)
    load = np.zeros(n)
    total = 0
    for start in range(0, len(dataset), batch_size):
        x = Tensor(dataset.x[start:start + batch_size])
        features = model.backbone(x) if hasattr(model, "backbone") else x
        decision = noisy_gate(model.head.router, features, cfg.top_k, False)
        importance += decision.gates.data.sum(axis=0)
        np.add.at(selections, decision.selected_indices.reshape(-1), 1)
        if cfg.top_k < n:
            # apply the selection-probability formula to the clean scores,
            # with the learned noise scales standing in for the live noise
            std = softplus(matmul(features, model.head.router.w_noise))
            probe = GateDecision(
                clean_logits=decision.clean_logits, noise_std=std,
                noisy_logits=decision.noisy_logits, gates=decision.gates,
                selected_indices=decision.selected_indices, top_k=cfg.top_k,
            )
            load += load_probability(probe, cfg.top_k).data.sum(axis=0)
        else:
            load += np.full(n, float(x.data.shape[0]))
        total += x.data.shape[0]
    return {
        "n_experts": n,
        "top_k": cfg.top_k,
        "samples": total,
        "importance": importance.tolist(),
        "selection_counts": selections.tolist(),
        "load_estimate": load.tolist(),
        "importance_cv_sq": float(coefficient_of_variation_sq(Tensor(importance)).data),
        "load_cv_sq": float(coefficient_of_variation_sq(Tensor(load)).data),
    }


def history_to_json(history, config: TrainConfig, indent: int = 2) -> str:
    return json.dumps({"config": config.to_dict(), "epochs": history},
                      indent=indent, sort_keys=True)
