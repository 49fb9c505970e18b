"""Multi-channel 2D U-Net: configuration, parameters, forward and backward."""
from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Dict

import numpy as np

from ..errors import ConfigError, DomainError, ShapeError
from . import layers as L


@dataclass(frozen=True)
class UNetConfig:
    in_channels: int = 1
    num_classes: int = 2
    depth: int = 3
    base_filters: int = 16
    normalization: bool = True
    seed: int = 0

    def __post_init__(self):
        if not 1 <= self.in_channels <= 4:
            raise ConfigError("in_channels must be in 1..4")
        if self.num_classes < 2:
            raise ConfigError("num_classes must be >= 2")
        if self.depth < 1 or self.base_filters < 1:
            raise ConfigError("depth and base_filters must be positive")

    @property
    def multiple(self) -> int:
        """Input height/width must be divisible by this."""
        return 2**self.depth

    def to_dict(self) -> dict:
        return asdict(self)


def level_channels(config: UNetConfig, level: int) -> int:
    return config.base_filters * 2**level


def _block_shapes(prefix, c_in, c_out, norm):
    shapes = {f"{prefix}.conv1.weight": (c_out, c_in, 3, 3)}
    if not norm:
        shapes[f"{prefix}.conv1.bias"] = (c_out,)
    else:
        shapes[f"{prefix}.norm1.gamma"] = (c_out,)
        shapes[f"{prefix}.norm1.beta"] = (c_out,)
    shapes[f"{prefix}.conv2.weight"] = (c_out, c_out, 3, 3)
    if not norm:
        shapes[f"{prefix}.conv2.bias"] = (c_out,)
    else:
        shapes[f"{prefix}.norm2.gamma"] = (c_out,)
        shapes[f"{prefix}.norm2.beta"] = (c_out,)
    return shapes


def parameter_shapes(config: UNetConfig) -> Dict[str, tuple]:
    """Closed-form shape of every learnable tensor, in canonical order.

    With normalization on, convolutions inside blocks carry no bias (the
    normalization shift subsumes it).
    """
    norm = config.normalization
    shapes = {}
    c_in = config.in_channels
    for lvl in range(config.depth):
        c = level_channels(config, lvl)
        shapes.update(_block_shapes(f"enc{lvl}", c_in, c, norm))
        c_in = c
    shapes.update(_block_shapes("mid", c_in, level_channels(config, config.depth), norm))
    for lvl in reversed(range(config.depth)):
        c = level_channels(config, lvl)
        shapes[f"dec{lvl}.up.weight"] = (2 * c, c, 2, 2)
        shapes[f"dec{lvl}.up.bias"] = (c,)
        shapes.update(_block_shapes(f"dec{lvl}", 2 * c, c, norm))
    shapes["head.weight"] = (config.num_classes, config.base_filters, 1, 1)
    shapes["head.bias"] = (config.num_classes,)
    return shapes


def buffer_shapes(config: UNetConfig) -> Dict[str, tuple]:
    """Running normalization statistics (not learned, but checkpointed)."""
    if not config.normalization:
        return {}
    out = {}
    for name, shape in parameter_shapes(config).items():
        if name.endswith(".gamma"):
            base = name[: -len(".gamma")]
            out[base + ".running_mean"] = shape
            out[base + ".running_var"] = shape
    return out


def _fan_in(name, shape):
    if name.endswith(".up.weight"):
        return shape[0]
    return int(np.prod(shape[1:]))


class UNetModel:
    """Parameters (learnable) and buffers (running statistics) of a U-Net."""

    def __init__(self, config: UNetConfig, parameters=None, buffers=None):
        self.config = config
        self.parameters = parameters if parameters is not None else {}
        self.buffers = buffers if buffers is not None else {}
        self.audit()

    @classmethod
    def initialize(cls, config: UNetConfig) -> "UNetModel":
        """Seeded fan-in-scaled uniform weights, zero biases, unit/zero norm scale/shift."""
        rng = np.random.default_rng(config.seed)
        params = {}
        for name, shape in parameter_shapes(config).items():
            if name.endswith(".weight"):
                gain = 3.0 if name.startswith("head") else 6.0
                limit = np.sqrt(gain / _fan_in(name, shape))
                params[name] = rng.uniform(-limit, limit, size=shape)
            elif name.endswith(".gamma"):
                params[name] = np.ones(shape)
            else:
                params[name] = np.zeros(shape)
        buffers = {
            name: (np.ones(shape) if name.endswith("running_var") else np.zeros(shape))
            for name, shape in buffer_shapes(config).items()
        }
        return cls(config, params, buffers)

    def audit(self):
        """Check every tensor against the closed-form shapes (raises ShapeError)."""
        for expected, actual, kind in (
            (parameter_shapes(self.config), self.parameters, "parameter"),
            (buffer_shapes(self.config), self.buffers, "buffer"),
        ):
            if not actual:
                continue
            if set(expected) != set(actual):
                missing = sorted(set(expected) - set(actual))
                extra = sorted(set(actual) - set(expected))
                raise ShapeError(f"{kind} names differ: missing {missing}, unexpected {extra}")
            for name, shape in expected.items():
                if tuple(actual[name].shape) != tuple(shape):
                    raise ShapeError(f"{kind} {name}: shape {actual[name].shape}, expected {shape}")

    def copy(self) -> "UNetModel":
        return UNetModel(
            self.config,
            {k: v.copy() for k, v in self.parameters.items()},
            {k: v.copy() for k, v in self.buffers.items()},
        )

    def num_parameters(self) -> int:
        return sum(v.size for v in self.parameters.values())


# -- forward / backward ------------------------------------------------------


def _block_forward(model, prefix, x, train, caches):
    p, norm = model.parameters, model.config.normalization
    for i in (1, 2):
        h, conv_cache = L.conv3x3_forward(x, p[f"{prefix}.conv{i}.weight"], p.get(f"{prefix}.conv{i}.bias"))
        norm_cache = None
        if norm:
            b = model.buffers
            h, norm_cache = L.batchnorm_forward(
                h, p[f"{prefix}.norm{i}.gamma"], p[f"{prefix}.norm{i}.beta"],
                b[f"{prefix}.norm{i}.running_mean"], b[f"{prefix}.norm{i}.running_var"], train,
            )
        x, relu_mask = L.relu_forward(h)
        caches[f"{prefix}.{i}"] = (conv_cache, norm_cache, relu_mask)
    return x


def _block_backward(model, prefix, dout, caches, grads):
    for i in (2, 1):
        conv_cache, norm_cache, relu_mask = caches[f"{prefix}.{i}"]
        d = L.relu_backward(dout, relu_mask)
        if norm_cache is not None:
            d, grads[f"{prefix}.norm{i}.gamma"], grads[f"{prefix}.norm{i}.beta"] = L.batchnorm_backward(d, norm_cache)
        dout, grads[f"{prefix}.conv{i}.weight"], db = L.conv3x3_backward(d, conv_cache)
        if not model.config.normalization:
            grads[f"{prefix}.conv{i}.bias"] = db
    return dout


def _check_input(model, batch):
    cfg = model.config
    if batch.ndim != 4 or batch.shape[1] != cfg.in_channels:
        raise ShapeError(f"expected (B, {cfg.in_channels}, H, W) input, got {batch.shape}")
    if batch.shape[2] % cfg.multiple or batch.shape[3] % cfg.multiple:
        raise ShapeError(f"H and W must be divisible by {cfg.multiple}, got {batch.shape[2:]}")


def _forward(model, batch, train):
    _check_input(model, batch)
    cfg, p = model.config, model.parameters
    x = np.ascontiguousarray(np.asarray(batch, dtype=np.float64).transpose(0, 2, 3, 1))
    caches = {}
    skips = []
    for lvl in range(cfg.depth):
        x = _block_forward(model, f"enc{lvl}", x, train, caches)
        skips.append(x)
        x, caches[f"pool{lvl}"] = L.maxpool2x2_forward(x)
    x = _block_forward(model, "mid", x, train, caches)
    for lvl in reversed(range(cfg.depth)):
        up, caches[f"up{lvl}"] = L.upconv2x2_forward(x, p[f"dec{lvl}.up.weight"], p[f"dec{lvl}.up.bias"])
        x = np.concatenate([up, skips[lvl]], axis=-1)
        x = _block_forward(model, f"dec{lvl}", x, train, caches)
    logits, caches["head"] = L.conv1x1_forward(x, p["head.weight"], p["head.bias"])
    return logits, caches


def _backward(model, dlogits, caches):
    cfg = model.config
    grads = {}
    dx, grads["head.weight"], grads["head.bias"] = L.conv1x1_backward(dlogits, caches["head"])
    dskips = {}
    for lvl in range(cfg.depth):
        dcat = _block_backward(model, f"dec{lvl}", dx, caches, grads)
        c = level_channels(cfg, lvl)
        dup, dskips[lvl] = dcat[..., :c], dcat[..., c:]
        dx, grads[f"dec{lvl}.up.weight"], grads[f"dec{lvl}.up.bias"] = L.upconv2x2_backward(dup, caches[f"up{lvl}"])
    dx = _block_backward(model, "mid", dx, caches, grads)
    for lvl in reversed(range(cfg.depth)):
        dx = L.maxpool2x2_backward(dx, caches[f"pool{lvl}"]) + dskips[lvl]
        dx = _block_backward(model, f"enc{lvl}", dx, caches, grads)
    return grads


def forward(model: UNetModel, batch, train: bool = False) -> np.ndarray:
    """Logits of shape (B, num_classes, H, W) for a (B, n, H, W) batch.

    ``train=True`` normalizes with batch statistics (and updates the running
    statistics); otherwise the running statistics are used.
    """
    logits, _ = _forward(model, batch, train)
    return logits.transpose(0, 3, 1, 2)


def loss_and_grad(model: UNetModel, batch, labels, class_weights=None, train: bool = True):
    """Class-weighted voxel-wise cross-entropy and its gradient for every parameter."""
    labels = np.asarray(labels)
    if labels.shape != (batch.shape[0],) + tuple(batch.shape[2:]):
        raise ShapeError(f"labels shape {labels.shape} does not match batch {batch.shape}")
    k = model.config.num_classes
    if labels.size and (labels.min() < 0 or labels.max() >= k or not np.all(labels == np.round(labels))):
        raise DomainError(f"labels must be integers in 0..{k - 1}")
    weights = np.ones(k) if class_weights is None else np.asarray(class_weights, dtype=np.float64)
    logits, caches = _forward(model, batch, train)
    loss, dlogits = L.weighted_cross_entropy(logits, labels.astype(np.int64), weights)
    return loss, _backward(model, dlogits, caches)


def loss_only(model: UNetModel, batch, labels, class_weights=None, train: bool = False) -> float:
    k = model.config.num_classes
    weights = np.ones(k) if class_weights is None else np.asarray(class_weights, dtype=np.float64)
    logits, _ = _forward(model, batch, train)
    return L.weighted_cross_entropy(logits, np.asarray(labels, dtype=np.int64), weights)[0]
