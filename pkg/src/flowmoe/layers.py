"""Trainable layers: 1-D convolution cells, dense layers, and the
classification loss, all built on the autodiff tensor engine.

The convolutional feature extractor stacks four cells (conv -> batch norm ->
ReLU -> max pool, the last cell unpooled) with 16/32/64/128 filters, turning
a (batch, 6, 13) input into a 128-dimensional representation per sample.
"""

from __future__ import annotations

import math

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ConfigError, DegenerateInputError, DimensionError, LabelError
from .tensor import RngState, Tensor, sqrt


class Module:
    """Base for anything holding parameters.

    Walks instance attributes to collect parameters (grad-tracked tensors),
    buffers (plain ndarrays, e.g. batch-norm running statistics), and child
    modules, so state can be flattened into named arrays for checkpoints.
    """

    def __init__(self):
        self.training = True

    def forward(self, *args, **kwargs):
        raise NotImplementedError

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def _children(self):
        for name, value in self.__dict__.items():
            if isinstance(value, Module):
                yield name, value
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield f"{name}.{i}", item

    def parameters(self) -> list[Tensor]:
        params = []
        for value in self.__dict__.values():
            if isinstance(value, Tensor) and value.requires_grad:
                params.append(value)
        for _, child in self._children():
            params.extend(child.parameters())
        return params

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()

    def train(self) -> "Module":
        self.training = True
        for _, child in self._children():
            child.train()
        return self

    def eval(self) -> "Module":
        self.training = False
        for _, child in self._children():
            child.eval()
        return self

    def state_dict(self, prefix: str = "") -> dict[str, np.ndarray]:
        """Named copies of all parameters and buffers, checkpoint-ready."""
        state: dict[str, np.ndarray] = {}
        for name, value in self.__dict__.items():
            key = prefix + name
            if isinstance(value, Tensor) and value.requires_grad:
                state[key] = value.data.copy()
            elif isinstance(value, np.ndarray):
                state[key] = value.copy()
        for name, child in self._children():
            state.update(child.state_dict(prefix + name + "."))
        return state

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        own = self._named_slots()
        missing = set(own) - set(state)
        extra = set(state) - set(own)
        if missing or extra:
            raise DimensionError(
                f"state mismatch: missing={sorted(missing)}, unexpected={sorted(extra)}"
            )
        for name, (holder, attr) in own.items():
            value = np.asarray(state[name], dtype=np.float64)
            current = getattr(holder, attr)
            target_shape = current.data.shape if isinstance(current, Tensor) else current.shape
            if value.shape != target_shape:
                raise DimensionError(
                    f"state entry {name!r} has shape {value.shape}, expected {target_shape}"
                )
            if isinstance(current, Tensor):
                current.data = value.copy()
            else:
                setattr(holder, attr, value.copy())

    def _named_slots(self, prefix: str = "") -> dict:
        slots = {}
        for name, value in self.__dict__.items():
            if isinstance(value, Tensor) and value.requires_grad:
                slots[prefix + name] = (self, name)
            elif isinstance(value, np.ndarray):
                slots[prefix + name] = (self, name)
        for name, child in self._children():
            slots.update(child._named_slots(prefix + name + "."))
        return slots


def count_parameters(module: Module) -> int:
    return sum(p.data.size for p in module.parameters())


# -- functional ops ----------------------------------------------------------


def conv1d(x: Tensor, weight: Tensor, bias: Tensor, padding: int = 1) -> Tensor:
    """Cross-correlation over the last axis, stride 1, zero padding.

    x: (batch, in_ch, length), weight: (out_ch, in_ch, kernel), bias: (out_ch).
    With kernel 3 and padding 1 the length is preserved.
    """
    if x.data.ndim != 3:
        raise DimensionError(f"conv1d expects (batch, channels, length), got {x.data.shape}")
    out_ch, in_ch, kernel = weight.data.shape
    if x.data.shape[1] != in_ch:
        raise DimensionError(
            f"conv1d channel mismatch: input has {x.data.shape[1]} channels, "
            f"layer expects {in_ch}"
        )
    batch, _, length = x.data.shape
    padded = np.pad(x.data, ((0, 0), (0, 0), (padding, padding)))
    out_len = length + 2 * padding - kernel + 1
    windows = sliding_window_view(padded, kernel, axis=2)  # (batch, in_ch, out_len, kernel)
    data = np.einsum("bilk,oik->bol", windows, weight.data) + bias.data[None, :, None]
    out = Tensor.result_of(data, (x, weight, bias), "conv1d")
    if out.requires_grad:
        def _backward():
            g = out.grad  # (batch, out_ch, out_len)
            bias.accumulate_grad(g.sum(axis=(0, 2)))
            weight.accumulate_grad(np.einsum("bol,bilk->oik", g, windows))
            if x.requires_grad:
                grad_padded = np.zeros_like(padded)
                for k in range(kernel):
                    grad_padded[:, :, k:k + out_len] += np.einsum(
                        "bol,oi->bil", g, weight.data[:, :, k]
                    )
                x.accumulate_grad(grad_padded[:, :, padding:padding + length])
        out._backward = _backward
    return out


def maxpool1d(x: Tensor) -> Tensor:
    """Non-overlapping window maxima, kernel 2, stride 2.

    An odd trailing element is dropped (floor semantics).  The gradient
    routes to the argmax of each window; ties go to the first position.
    """
    if x.data.ndim != 3:
        raise DimensionError(f"maxpool1d expects (batch, channels, length), got {x.data.shape}")
    batch, channels, length = x.data.shape
    if length < 2:
        raise DimensionError(f"maxpool1d needs length >= 2, got {length}")
    out_len = length // 2
    paired = x.data[:, :, : 2 * out_len].reshape(batch, channels, out_len, 2)
    winners = paired.argmax(axis=3)  # first index wins ties
    data = np.take_along_axis(paired, winners[..., None], axis=3)[..., 0]
    out = Tensor.result_of(data, (x,), "maxpool1d")
    if out.requires_grad:
        def _backward():
            buf = np.zeros_like(paired)
            np.put_along_axis(buf, winners[..., None], out.grad[..., None], axis=3)
            full = np.zeros_like(x.data)
            full[:, :, : 2 * out_len] = buf.reshape(batch, channels, 2 * out_len)
            x.accumulate_grad(full)
        out._backward = _backward
    return out


def dense(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """Affine map x @ W^T + b for x: (batch, in), weight: (out, in)."""
    return x @ weight.T + bias


def relu(x: Tensor) -> Tensor:
    """Elementwise max(0, x); the subgradient at 0 is taken as 0."""
    x_t = x if isinstance(x, Tensor) else Tensor(x)
    out = Tensor.result_of(np.maximum(x_t.data, 0.0), (x_t,), "relu")
    if out.requires_grad:
        def _backward():
            x_t.accumulate_grad(out.grad * (x_t.data > 0.0))
        out._backward = _backward
    return out


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean negative log-softmax of the true class over the batch.

    Fused log-softmax keeps large logits stable (a margin-100 correct
    prediction gives a loss ~0 rather than overflowing).
    """
    labels = np.asarray(labels, dtype=np.intp)
    if logits.data.ndim != 2 or labels.ndim != 1 or labels.shape[0] != logits.data.shape[0]:
        raise DimensionError(
            f"cross_entropy expects (batch, classes) logits and (batch,) labels, "
            f"got {logits.data.shape} and {labels.shape}"
        )
    n_classes = logits.data.shape[1]
    if labels.size and (labels.min() < 0 or labels.max() >= n_classes):
        bad = labels[(labels < 0) | (labels >= n_classes)][0]
        raise LabelError(f"label {bad} outside [0, {n_classes})")
    batch = logits.data.shape[0]
    shifted = logits.data - logits.data.max(axis=1, keepdims=True)
    log_norm = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    log_probs = shifted - log_norm
    loss = -log_probs[np.arange(batch), labels].mean()
    out = Tensor.result_of(loss, (logits,), "cross_entropy")
    if out.requires_grad:
        def _backward():
            probs = np.exp(log_probs)
            probs[np.arange(batch), labels] -= 1.0
            logits.accumulate_grad(out.grad * probs / batch)
        out._backward = _backward
    return out


# -- layer modules -----------------------------------------------------------


def _uniform_init(rng: RngState, shape, fan_in: int) -> Tensor:
    bound = 1.0 / math.sqrt(fan_in)
    return Tensor(rng.uniform(-bound, bound, shape), requires_grad=True)


class Conv1d(Module):
    def __init__(self, in_channels: int, out_channels: int, rng: RngState,
                 kernel_size: int = 3, padding: int = 1):
        super().__init__()
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.kernel_size = kernel_size
        self.padding = padding
        fan_in = in_channels * kernel_size
        self.weight = _uniform_init(rng, (out_channels, in_channels, kernel_size), fan_in)
        self.bias = _uniform_init(rng, (out_channels,), fan_in)

    def forward(self, x: Tensor) -> Tensor:
        return conv1d(x, self.weight, self.bias, self.padding)


class BatchNorm1d(Module):
    """Per-channel normalization over (batch, length).

    Train mode normalizes by batch statistics (population variance) and
    updates the running estimates by exponential moving average; eval mode
    uses the running estimates only.
    """

    def __init__(self, channels: int, momentum: float = 0.1, eps: float = 1e-5):
        super().__init__()
        self.channels = channels
        self.momentum = momentum
        self.eps = eps
        self.gamma = Tensor(np.ones(channels), requires_grad=True)
        self.beta = Tensor(np.zeros(channels), requires_grad=True)
        self.running_mean = np.zeros(channels)
        self.running_var = np.ones(channels)

    def forward(self, x: Tensor) -> Tensor:
        if x.data.ndim != 3 or x.data.shape[1] != self.channels:
            raise DimensionError(
                f"batchnorm expects (batch, {self.channels}, length), got {x.data.shape}"
            )
        shape = (1, self.channels, 1)
        if self.training:
            batch, _, length = x.data.shape
            if batch * length < 2:
                raise DegenerateInputError(
                    "batch norm in train mode needs at least 2 elements per channel"
                )
            mean = x.mean(axis=(0, 2), keepdims=True)
            var = ((x - mean) ** 2).mean(axis=(0, 2), keepdims=True)
            x_hat = (x - mean) / sqrt(var + self.eps)
            m = self.momentum
            self.running_mean = (1 - m) * self.running_mean + m * mean.data.reshape(-1)
            self.running_var = (1 - m) * self.running_var + m * var.data.reshape(-1)
        else:
            scale = 1.0 / np.sqrt(self.running_var + self.eps)
            x_hat = (x - Tensor(self.running_mean.reshape(shape))) * Tensor(scale.reshape(shape))
        return x_hat * self.gamma.reshape(shape) + self.beta.reshape(shape)


class Dense(Module):
    def __init__(self, in_dim: int, out_dim: int, rng: RngState):
        super().__init__()
        self.in_dim = in_dim
        self.out_dim = out_dim
        self.weight = _uniform_init(rng, (out_dim, in_dim), in_dim)
        self.bias = _uniform_init(rng, (out_dim,), in_dim)

    def forward(self, x: Tensor) -> Tensor:
        return dense(x, self.weight, self.bias)


class ConvCell(Module):
    """conv -> batch norm -> ReLU, optionally followed by a 2x max pool."""

    def __init__(self, in_channels: int, out_channels: int, rng: RngState,
                 pooled: bool, bn_momentum: float = 0.1, bn_eps: float = 1e-5):
        super().__init__()
        self.conv = Conv1d(in_channels, out_channels, rng)
        self.bn = BatchNorm1d(out_channels, momentum=bn_momentum, eps=bn_eps)
        self.pooled = pooled

    def forward(self, x: Tensor) -> Tensor:
        x = relu(self.bn(self.conv(x)))
        return maxpool1d(x) if self.pooled else x


class CnnBackbone(Module):
    """Stacked conv cells mapping (batch, 6, 13) to a flat feature vector.

    With the default filters (16, 32, 64, 128) the lengths walk 13 -> 6 -> 3
    -> 1 through the three pooled cells, and the unpooled final cell leaves
    a (batch, 128, 1) map that flattens to 128 features.
    """

    def __init__(self, rng: RngState, in_channels: int = 6, seq_len: int = 13,
                 filters=(16, 32, 64, 128), bn_momentum: float = 0.1, bn_eps: float = 1e-5):
        super().__init__()
        self.in_channels = in_channels
        self.seq_len = seq_len
        self.filters = tuple(filters)
        cells = []
        channels = in_channels
        length = seq_len
        for i, n_filters in enumerate(self.filters):
            pooled = i < len(self.filters) - 1
            if pooled:
                if length < 2:
                    raise ConfigError(
                        f"sequence length collapses to {length} before cell {i + 1}; "
                        "cannot max-pool"
                    )
                length //= 2
            cells.append(ConvCell(channels, n_filters, rng, pooled,
                                  bn_momentum=bn_momentum, bn_eps=bn_eps))
            channels = n_filters
        self.cells = cells
        self.output_dim = self.filters[-1] * length

    def forward(self, x: Tensor) -> Tensor:
        expected = (self.in_channels, self.seq_len)
        if x.data.ndim != 3 or x.data.shape[1:] != expected:
            raise DimensionError(
                f"backbone expects input of shape (batch, {expected[0]}, {expected[1]}), "
                f"got {x.data.shape}"
            )
        for cell in self.cells:
            x = cell(x)
        return x.reshape(x.data.shape[0], self.output_dim)
