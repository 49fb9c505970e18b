"""Adam training loop and whole-volume inference."""
from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np
from threadpoolctl import threadpool_limits

from ..errors import ConfigError, ShapeError
from ..preprocess import AugmentationSpec, SliceSample, random_augmentation
from ..volume_io import Volume
from .layers import softmax
from .model import UNetConfig, UNetModel, _forward, loss_and_grad, loss_only

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-3
    epochs: int = 20
    batch_size: int = 8
    # None -> inverse class frequency over the training labels
    class_weights: tuple | None = None
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    patience: int = 5
    seed: int = 0
    augmentation: AugmentationSpec | None = None
    # keep at most this fraction of slices without any foreground (seeded draw)
    empty_slice_fraction: float = 1.0
    # train on random crop_size x crop_size windows instead of whole slices
    crop_size: int | None = None
    # probability that a crop is centered on a foreground pixel (when one exists)
    crop_foreground_bias: float = 0.5

    def __post_init__(self):
        if self.learning_rate <= 0 or self.epochs < 1 or self.batch_size < 1 or self.patience < 1:
            raise ConfigError("learning rate, epochs, batch size and patience must be positive")
        if self.class_weights is not None:
            cw = tuple(float(w) for w in self.class_weights)
            if any(w <= 0 for w in cw):
                raise ConfigError("class weights must be positive")
            object.__setattr__(self, "class_weights", cw)
        if not 0.0 <= self.empty_slice_fraction <= 1.0:
            raise ConfigError("empty_slice_fraction must be in [0, 1]")
        if self.crop_size is not None and self.crop_size < 1:
            raise ConfigError("crop_size must be positive")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["augmentation"] = None if self.augmentation is None else asdict(self.augmentation)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        if d.get("augmentation") is not None:
            d["augmentation"] = AugmentationSpec(**d["augmentation"])
        if d.get("class_weights") is not None:
            d["class_weights"] = tuple(d["class_weights"])
        return cls(**d)


@dataclass
class TrainHistory:
    train_loss: list = field(default_factory=list)
    val_loss: list = field(default_factory=list)
    best_epoch: int = -1


class Adam:
    def __init__(self, params: dict, lr, beta1, beta2, eps):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.t = 0

    def step(self, params: dict, grads: dict):
        self.t += 1
        c1 = 1 - self.beta1**self.t
        c2 = 1 - self.beta2**self.t
        for k, g in grads.items():
            m, v = self.m[k], self.v[k]
            m *= self.beta1
            m += (1 - self.beta1) * g
            v *= self.beta2
            v += (1 - self.beta2) * g * g
            params[k] -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def inverse_frequency_weights(samples: Sequence[SliceSample], num_classes: int = 2) -> tuple:
    counts = np.zeros(num_classes)
    for s in samples:
        counts += np.bincount(s.label.ravel(), minlength=num_classes)[:num_classes]
    counts = np.maximum(counts, 1)
    return tuple(float(w) for w in counts.sum() / (num_classes * counts))


def random_crop(sample: SliceSample, size: int, fg_bias: float, rng) -> SliceSample:
    """Seeded ``size`` x ``size`` window, centered on a foreground pixel with probability ``fg_bias``."""
    h, w = sample.label.shape
    if size > h or size > w:
        raise ConfigError(f"crop size {size} exceeds slice {h}x{w}")
    fg = np.argwhere(sample.label > 0)
    if len(fg) and rng.random() < fg_bias:
        cy, cx = fg[rng.integers(len(fg))]
        top = int(np.clip(cy - size // 2, 0, h - size))
        left = int(np.clip(cx - size // 2, 0, w - size))
    else:
        top = int(rng.integers(h - size + 1))
        left = int(rng.integers(w - size + 1))
    return SliceSample(sample.channels[:, top:top + size, left:left + size],
                       sample.label[top:top + size, left:left + size], sample.subject_id, sample.slice_index)


def _batch(samples):
    x = np.stack([s.channels for s in samples])
    y = np.stack([s.label for s in samples])
    return x, y


def _mean_loss(model, samples, weights, batch_size):
    if not samples:
        return None
    total = 0.0
    for i in range(0, len(samples), batch_size):
        chunk = samples[i:i + batch_size]
        x, y = _batch(chunk)
        total += loss_only(model, x, y, weights, train=False) * len(chunk)
    return total / len(samples)


def _select_slices(samples, fraction, rng):
    if fraction >= 1.0:
        return list(samples)
    keep = []
    for s in samples:
        if s.label.any() or rng.random() < fraction:
            keep.append(s)
    return keep


def train(config: UNetConfig, tconfig: TrainConfig, train_samples, val_samples=(), callback=None):
    """Fit a U-Net; returns ``(model, history)``.

    The returned parameters are those of the epoch with the lowest
    validation loss (training loss when no validation samples are given).
    Shuffling, slice selection and augmentation all draw from one generator
    seeded by ``tconfig.seed``; initialization is seeded by ``config.seed``.
    """
    if not train_samples:
        raise ConfigError("empty training set")
    train_ids = {s.subject_id for s in train_samples}
    val_ids = {s.subject_id for s in val_samples}
    if train_ids & val_ids - {""}:
        raise ConfigError(f"training and validation subjects overlap: {sorted(train_ids & val_ids)}")
    for s in list(train_samples) + list(val_samples):
        if s.n_channels != config.in_channels:
            raise ShapeError(f"sample has {s.n_channels} channels, model expects {config.in_channels}")

    rng = np.random.default_rng(tconfig.seed)
    pool = _select_slices(train_samples, tconfig.empty_slice_fraction, rng)
    weights = tconfig.class_weights or inverse_frequency_weights(pool, config.num_classes)
    model = UNetModel.initialize(config)
    opt = Adam(model.parameters, tconfig.learning_rate, tconfig.beta1, tconfig.beta2, tconfig.eps)
    history = TrainHistory()
    best, best_loss, stale = model.copy(), np.inf, 0

    with threadpool_limits(limits=1, user_api="blas"):
        for epoch in range(tconfig.epochs):
            order = rng.permutation(len(pool))
            running, seen = 0.0, 0
            for i in range(0, len(order), tconfig.batch_size):
                chunk = [pool[j] for j in order[i:i + tconfig.batch_size]]
                if tconfig.augmentation is not None:
                    chunk = [random_augmentation(s, tconfig.augmentation, rng) for s in chunk]
                if tconfig.crop_size is not None:
                    chunk = [random_crop(s, tconfig.crop_size, tconfig.crop_foreground_bias, rng) for s in chunk]
                x, y = _batch(chunk)
                loss, grads = loss_and_grad(model, x, y, weights, train=True)
                opt.step(model.parameters, grads)
                running += loss * len(chunk)
                seen += len(chunk)
            history.train_loss.append(running / seen)
            val = _mean_loss(model, list(val_samples), weights, tconfig.batch_size)
            score = history.train_loss[-1] if val is None else val
            if val is not None:
                history.val_loss.append(val)
            log.info("epoch %d train %.5f val %s", epoch, history.train_loss[-1], val)
            if callback is not None:
                callback(epoch, history)
            if score < best_loss:
                best, best_loss, stale = model.copy(), score, 0
                history.best_epoch = epoch
            else:
                stale += 1
                if stale >= tconfig.patience:
                    break
    return best, history


def _pad_amounts(n, multiple):
    total = (-n) % multiple
    return total // 2, total - total // 2


def predict_volume(model: UNetModel, volumes: Sequence[Volume], batch_size: int = 16):
    """Slice-wise inference; returns ``(probability, binary)`` volumes on the input grid."""
    cfg = model.config
    if len(volumes) != cfg.in_channels:
        raise ShapeError(f"model expects {cfg.in_channels} volumes, got {len(volumes)}")
    ref = volumes[0]
    for v in volumes[1:]:
        ref.check_geometry(v, "input volumes")
    nx, ny, nz = ref.dims
    px, py = _pad_amounts(nx, cfg.multiple), _pad_amounts(ny, cfg.multiple)
    stack = np.stack([v.data for v in volumes])  # (n, nx, ny, nz)
    stack = np.pad(stack, ((0, 0), px, py, (0, 0)))
    slices = np.ascontiguousarray(stack.transpose(3, 0, 1, 2))  # (nz, n, X, Y)
    prob = np.empty((nz, nx, ny))
    labels = np.empty((nz, nx, ny), dtype=np.int64)
    with threadpool_limits(limits=1, user_api="blas"):
        for i in range(0, nz, batch_size):
            logits, _ = _forward(model, slices[i:i + batch_size], train=False)
            logits = logits[:, px[0]:px[0] + nx, py[0]:py[0] + ny, :]
            p = softmax(logits)
            if cfg.num_classes == 2:
                fg = p[..., 1]
                labels[i:i + batch_size] = fg > 0.5
            else:
                fg = 1.0 - p[..., 0]
                labels[i:i + batch_size] = p.argmax(axis=-1)
            prob[i:i + batch_size] = fg
    prob_vol = ref.like(prob.transpose(1, 2, 0), "float64")
    binary = ref.like((labels.transpose(1, 2, 0) > 0).astype(np.float64), "uint8")
    return prob_vol, binary
