"""Classifier assembly: CNN backbone feeding the expert head, plus the
reduced architectures used by the ablation study."""

from __future__ import annotations

from dataclasses import asdict, dataclass

from .errors import ConfigError
from .layers import CnnBackbone, Dense, Module
from .moe import GateInfo, MoEConfig, MoEHead
from .tensor import RngState, Tensor

VARIANTS = ("cnn_moe", "cnn_dense", "dense")


@dataclass
class ModelConfig:
    """Architecture description, sufficient to rebuild a model from a
    checkpoint.  Defaults are the full-scale configuration."""

    variant: str = "cnn_moe"
    input_shape: tuple = (6, 13)
    cnn_filters: tuple = (16, 32, 64, 128)
    n_experts: int = 128
    top_k: int = 32
    expert_hidden: int = 16
    n_classes: int = 9
    w_importance: float = 1.0
    w_load: float = 1.0
    noise_enabled: bool = True
    bn_momentum: float = 0.1
    bn_eps: float = 1e-5

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown model variant {self.variant!r}; expected {VARIANTS}")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, raw: dict) -> "ModelConfig":
        raw = dict(raw)
        raw["input_shape"] = tuple(raw["input_shape"])
        raw["cnn_filters"] = tuple(raw["cnn_filters"])
        return cls(**raw)


class CnnMoEClassifier(Module):
    """Full architecture: conv backbone into the sparse expert head."""

    def __init__(self, config: ModelConfig, rng: RngState):
        super().__init__()
        self.config = config
        self.backbone = CnnBackbone(
            rng, in_channels=config.input_shape[0], seq_len=config.input_shape[1],
            filters=config.cnn_filters, bn_momentum=config.bn_momentum,
            bn_eps=config.bn_eps,
        )
        moe_config = MoEConfig(
            n_experts=config.n_experts, top_k=config.top_k,
            input_dim=self.backbone.output_dim, expert_hidden=config.expert_hidden,
            n_classes=config.n_classes, w_importance=config.w_importance,
            w_load=config.w_load, noise_enabled=config.noise_enabled,
        )
        self.head = MoEHead(moe_config, rng)

    def forward(self, x: Tensor, rng: RngState | None = None):
        features = self.backbone(x)
        return self.head(features, rng)


class CnnDenseClassifier(Module):
    """Ablation: the expert head replaced by a single dense layer."""

    def __init__(self, config: ModelConfig, rng: RngState):
        super().__init__()
        self.config = config
        self.backbone = CnnBackbone(
            rng, in_channels=config.input_shape[0], seq_len=config.input_shape[1],
            filters=config.cnn_filters, bn_momentum=config.bn_momentum,
            bn_eps=config.bn_eps,
        )
        self.out = Dense(self.backbone.output_dim, config.n_classes, rng)

    def forward(self, x: Tensor, rng: RngState | None = None):
        return self.out(self.backbone(x)), GateInfo()


class DenseClassifier(Module):
    """Ablation: one affine layer on the flattened feature vector."""

    def __init__(self, config: ModelConfig, rng: RngState):
        super().__init__()
        self.config = config
        rows, cols = config.input_shape
        self.input_dim = rows * cols
        self.out = Dense(self.input_dim, config.n_classes, rng)

    def forward(self, x: Tensor, rng: RngState | None = None):
        flat = x.reshape(x.data.shape[0], self.input_dim)
        return self.out(flat), GateInfo()


def build_model(config: ModelConfig, rng: RngState) -> Module:
    if config.variant == "cnn_moe":
        return CnnMoEClassifier(config, rng)
    if config.variant == "cnn_dense":
        return CnnDenseClassifier(config, rng)
    return DenseClassifier(config, rng)
