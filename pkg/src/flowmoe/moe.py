"""Sparsely gated mixture of experts with noisy top-k routing.

A linear router scores every expert per sample; input-dependent Gaussian
noise is added to the scores during training, everything outside the top k
is masked to -inf, and a softmax over the masked scores produces the gate
weights.  Only the k selected experts run, and their class-logit outputs are
combined with the gate weights.

Two auxiliary losses keep the routing balanced over a batch: one penalizes
uneven total gate mass per expert ("importance"), the other penalizes uneven
selection probability per expert ("load"), both as squared coefficients of
variation.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DimensionError
from .tensor import (
    RngState,
    Tensor,
    coefficient_of_variation_sq,
    gather,
    matmul,
    scatter_rows,
    softmax,
    softplus,
    standard_normal_sample,
    take_rows,
    normal_cdf,
)
from .layers import Dense, Module, relu


@dataclass
class MoEConfig:
    """Expert-layer hyperparameters. Defaults are the full-scale setup:
    128 experts with the 32 most relevant kept per sample."""

    n_experts: int = 128
    top_k: int = 32
    input_dim: int = 128
    expert_hidden: int = 16
    n_classes: int = 9
    w_importance: float = 1.0
    w_load: float = 1.0
    noise_enabled: bool = True

    def __post_init__(self):
        if not (1 <= self.top_k <= self.n_experts):
            raise ConfigError(
                f"top_k must satisfy 1 <= k <= n_experts, got k={self.top_k}, "
                f"n={self.n_experts}"
            )
        if self.w_importance < 0 or self.w_load < 0:
            raise ConfigError("balancing-loss weights must be nonnegative")


class Expert(Module):
    """One expert: a dense hidden layer with ReLU, then a linear class head."""

    def __init__(self, config: MoEConfig, rng: RngState):
        super().__init__()
        self.hidden = Dense(config.input_dim, config.expert_hidden, rng)
        self.out = Dense(config.expert_hidden, config.n_classes, rng)

    def forward(self, x: Tensor) -> Tensor:
        return self.out(relu(self.hidden(x)))


class Router(Module):
    """Linear gate and noise-scale maps from features to per-expert scores.

    Both matrices start at zero: initial routing is then driven purely by
    the noise term, so no expert is privileged at the start of training.
    """

    def __init__(self, config: MoEConfig):
        super().__init__()
        self.w_gate = Tensor(np.zeros((config.input_dim, config.n_experts)),
                             requires_grad=True)
        self.w_noise = Tensor(np.zeros((config.input_dim, config.n_experts)),
                              requires_grad=True)


@dataclass
class GateDecision:
    """Routing outcome for one batch.

    gates has at most top_k nonzeros per row, nonnegative, summing to 1;
    the nonzero columns are exactly selected_indices.  noisy_logits keeps
    the pre-mask scores needed by the load probability; noise_std is None
    when the noise path was off.
    """

    clean_logits: Tensor
    noise_std: Tensor | None
    noisy_logits: Tensor
    gates: Tensor
    selected_indices: np.ndarray
    top_k: int


def top_k_mask(values: Tensor, k: int) -> Tensor:
    """Keep the k largest entries per row, set the rest to -inf.

    Ties break toward the lower index.  Gradients flow only through the
    retained entries: the selection itself is treated as constant.
    """
    if values.data.ndim != 2:
        raise DimensionError(f"top_k_mask expects (batch, n), got {values.data.shape}")
    n = values.data.shape[1]
    if not (1 <= k <= n):
        raise DimensionError(f"k must satisfy 1 <= k <= n={n}, got {k}")
    order = np.argsort(-values.data, axis=1, kind="stable")
    keep = np.zeros_like(values.data, dtype=bool)
    np.put_along_axis(keep, order[:, :k], True, axis=1)
    data = np.where(keep, values.data, -np.inf)
    out = Tensor.result_of(data, (values,), "top_k_mask")
    if out.requires_grad:
        def _backward():
            values.accumulate_grad(out.grad * keep)
        out._backward = _backward
    return out


def noisy_gate(router: Router, x: Tensor, k: int, noise_enabled: bool,
               rng: RngState | None = None) -> GateDecision:
    """Compute sparse gate weights for a batch of feature vectors.

    Scores are x @ w_gate; when the noise path is on, each score is
    perturbed by a Gaussian whose standard deviation is the softplus of
    x @ w_noise (learned, input-dependent).  The perturbed scores are top-k
    masked and softmaxed.  With noise off this is a pure function of
    (router, x).
    """
    clean = matmul(x, router.w_gate)
    if noise_enabled:
        if rng is None:
            raise ConfigError("noisy gating needs an RngState when noise is enabled")
        std = softplus(matmul(x, router.w_noise))
        eps = standard_normal_sample(rng, clean.data.shape)
        noisy = clean + eps * std
    else:
        std = None
        noisy = clean
    masked = top_k_mask(noisy, k)
    gates = softmax(masked, axis=1)
    order = np.argsort(-noisy.data, axis=1, kind="stable")
    return GateDecision(
        clean_logits=clean,
        noise_std=std,
        noisy_logits=noisy,
        gates=gates,
        selected_indices=order[:, :k].copy(),
        top_k=k,
    )


def moe_forward(experts: list[Expert], decision: GateDecision, x: Tensor) -> Tensor:
    """Gate-weighted sum of expert outputs, evaluating only selected experts.

    Each expert sees just the rows that routed to it; the weighted partial
    outputs are scattered back and summed, which agrees with the dense
    sum over all experts (zero-gated terms included) to float precision.
    """
    gates = decision.gates
    batch = x.data.shape[0]
    n_classes = experts[0].out.out_dim
    total = Tensor(np.zeros((batch, n_classes)))
    for i, expert in enumerate(experts):
        rows = np.nonzero(gates.data[:, i])[0]
        if rows.size == 0:
            continue
        sub = take_rows(x, rows)
        weights = gather(gates, rows, np.full(rows.shape, i)).reshape(rows.size, 1)
        total = total + scatter_rows(expert(sub) * weights, rows, batch)
    return total


def importance_loss(gates: Tensor, w_importance: float = 1.0) -> Tensor:
    """Penalize uneven total gate mass across experts.

    Importance is the column sum of the gate matrix over the batch; the loss
    is w * CV(importance)^2, zero iff every expert receives equal mass.
    """
    return w_importance * coefficient_of_variation_sq(gates.sum(axis=0))


def load_probability(decision: GateDecision, k: int) -> Tensor:
    """Per-(sample, expert) probability of selection under re-drawn noise.

    For expert i the threshold is the k-th largest noisy score among the
    *other* experts; the probability that a fresh Gaussian perturbation of
    expert i's clean score clears that threshold is the normal CDF of the
    margin divided by the noise scale.  Smooth in the clean scores, so
    under-selected experts still receive gradient through this path.
    """
    if decision.noise_std is None:
        raise ConfigError("load probability requires the noise path (noise_std)")
    noisy = decision.noisy_logits
    n = noisy.data.shape[1]
    if k >= n:
        raise ConfigError(f"load probability needs k < n (got k={k}, n={n})")
    batch = noisy.data.shape[0]
    order = np.argsort(-noisy.data, axis=1, kind="stable")
    in_top_k = np.zeros((batch, n), dtype=bool)
    np.put_along_axis(in_top_k, order[:, :k], True, axis=1)
    # Threshold column per (sample, expert): for a selected expert, removing
    # it promotes the (k+1)-th largest to rank k; otherwise the k-th largest
    # already excludes it.  Either way the threshold never depends on the
    # expert's own score.
    kth_col = order[:, k - 1][:, None]
    k1th_col = order[:, k][:, None]
    threshold_cols = np.where(in_top_k, k1th_col, kth_col)
    rows = np.broadcast_to(np.arange(batch)[:, None], (batch, n))
    thresholds = gather(noisy, rows, threshold_cols)
    return normal_cdf((decision.clean_logits - thresholds) / decision.noise_std)


def load_loss(load_p: Tensor, w_load: float = 1.0) -> Tensor:
    """Penalize uneven expected selection counts across experts."""
    return w_load * coefficient_of_variation_sq(load_p.sum(axis=0))


@dataclass
class GateInfo:
    """What the training loop needs from one MoE forward pass."""

    decision: GateDecision | None = None
    load_p: Tensor | None = None


class MoEHead(Module):
    """Router plus expert bank, producing class logits from features.

    Noise (and therefore the load probability) is active only in train mode;
    evaluation routes with clean scores and is deterministic.
    """

    def __init__(self, config: MoEConfig, rng: RngState):
        super().__init__()
        self.config = config
        self.router = Router(config)
        self.experts = [Expert(config, rng) for _ in range(config.n_experts)]

    def forward(self, x: Tensor, rng: RngState | None = None) -> tuple[Tensor, GateInfo]:
        cfg = self.config
        noise_on = self.training and cfg.noise_enabled
        decision = noisy_gate(self.router, x, cfg.top_k, noise_on, rng)
        logits = moe_forward(self.experts, decision, x)
        load_p = None
        # With k == n every expert is always selected, so the load is
        # constant by construction and the loss term is identically zero.
        if noise_on and cfg.top_k < cfg.n_experts and cfg.w_load > 0:
            load_p = load_probability(decision, cfg.top_k)
        return logits, GateInfo(decision=decision, load_p=load_p)
