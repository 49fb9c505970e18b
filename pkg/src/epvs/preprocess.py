"""SWI construction, intensity normalization, axial slicing and augmentation."""
from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy import ndimage

from .errors import DegenerateInputError, DomainError, ShapeError, SpecError, ValidationError
from .volume_io import Volume

_PHASE_TOL = 1e-6


def centered_window(n: int, k: int) -> np.ndarray:
    """Boolean mask over DFT bins (standard, unshifted order) keeping the
    ``k`` lowest signed frequencies -k//2 .. k - k//2 - 1."""
    k = min(k, n)
    freqs = np.fft.fftfreq(n, d=1.0 / n).round().astype(int)
    # fftfreq puts -n/2 for even n; the window is defined on signed frequencies
    return (freqs >= -(k // 2)) & (freqs <= k - k // 2 - 1)


def homodyne_phase(z: np.ndarray, filter_size=(64, 64)) -> np.ndarray:
    """High-pass phase of a complex 2D image: arg(z / lowpass(z))."""
    wx = centered_window(z.shape[0], filter_size[0])
    wy = centered_window(z.shape[1], filter_size[1])
    spectrum = np.fft.fft2(z)
    low = np.fft.ifft2(spectrum * np.outer(wx, wy))
    # z * conj(low) has the same argument as z / low and is defined where low == 0
    return np.angle(z * np.conj(low))


def phase_mask(phase_hp: np.ndarray) -> np.ndarray:
    mask = np.where(phase_hp < 0, (np.pi + phase_hp) / np.pi, 1.0)
    return np.clip(mask, 0.0, 1.0)


def build_swi(magnitude: Volume, phase: Volume, filter_size=(64, 64), mask_power: int = 4) -> Volume:
    """Susceptibility-weighted image from magnitude and phase volumes.

    Each axial slice is processed independently: the phase is high-pass
    filtered by dividing the complex image by its low-pass (a centered
    ``filter_size`` k-space window), a negative-phase mask is built from the
    result and the magnitude is multiplied by the mask ``mask_power`` times.
    """
    magnitude.check_geometry(phase, "magnitude/phase")
    if mask_power < 0:
        raise DomainError("mask_power must be non-negative")
    phi = phase.data
    if phi.min() < -np.pi - _PHASE_TOL or phi.max() > np.pi + _PHASE_TOL:
        raise DomainError("phase values must lie in [-pi, pi]")
    mag = magnitude.data
    out = np.empty_like(mag)
    for k in range(mag.shape[2]):
        z = mag[:, :, k] * np.exp(1j * phi[:, :, k])
        mask = phase_mask(homodyne_phase(z, filter_size))
        out[:, :, k] = mag[:, :, k] * mask**mask_power
    dtype = magnitude.dtype if magnitude.dtype.startswith("float") else "float32"
    return magnitude.like(out, dtype)


def normalize_intensity(volume: Volume, mask: Volume | None = None) -> Volume:
    """Z-score inside ``mask`` (population sd); zero outside."""
    if mask is None:
        sel = np.ones(volume.dims, dtype=bool)
    else:
        volume.check_geometry(mask, "mask")
        sel = mask.data > 0
    values = volume.data[sel]
    if values.size < 2:
        raise DegenerateInputError("mask selects fewer than two voxels")
    sd = values.std()
    if not sd > 0:
        raise DegenerateInputError("masked region has zero variance")
    out = np.zeros(volume.dims)
    out[sel] = (values - values.mean()) / sd
    return volume.like(out, "float64")


@dataclass
class SliceSample:
    channels: np.ndarray  # (n, H, W)
    label: np.ndarray  # (H, W) integer
    subject_id: str = ""
    slice_index: int = 0

    def __post_init__(self):
        self.channels = np.asarray(self.channels, dtype=np.float64)
        self.label = np.asarray(self.label, dtype=np.int64)
        if self.channels.ndim != 3 or not 1 <= self.channels.shape[0] <= 4:
            raise ShapeError(f"channels must be (n, H, W) with 1 <= n <= 4, got {self.channels.shape}")
        if self.label.shape != self.channels.shape[1:]:
            raise ShapeError("label and channels must share height x width")

    @property
    def n_channels(self) -> int:
        return self.channels.shape[0]


def extract_axial_slices(volumes: Sequence[Volume], labels: Volume, subject_id: str = "") -> list:
    """One :class:`SliceSample` per axial plane, channels in the given order."""
    if not volumes:
        raise ValidationError("need at least one volume")
    for v in volumes:
        v.check_geometry(labels, "volume/label")
    stack = np.stack([v.data for v in volumes])  # (n, nx, ny, nz)
    lab = (labels.data > 0).astype(np.int64)
    return [
        SliceSample(stack[:, :, :, k], lab[:, :, k], subject_id, k)
        for k in range(labels.dims[2])
    ]


def stack_slices(samples: Sequence[SliceSample]):
    """Inverse of :func:`extract_axial_slices`: ((n, nx, ny, nz) channels, (nx, ny, nz) label)."""
    channels = np.stack([s.channels for s in samples], axis=-1)
    label = np.stack([s.label for s in samples], axis=-1)
    return channels, label


@dataclass(frozen=True)
class AugmentationSpec:
    """Geometric augmentation grid.

    Every output combines at most one flip, one rotation and one translation
    (each may also be skipped), so the output count is
    ``(1 + len(flips)) * (1 + len(rotations)) * (1 + len(translations))``,
    minus one when the untouched identity is excluded.
    """

    flips: tuple = ()
    translations: tuple = ()
    rotations: tuple = ()
    include_identity: bool = True
    rotation_jitter: float = 0.0  # degrees; each rotation is perturbed by U(-j, j)

    def __post_init__(self):
        for f in self.flips:
            if f not in ("horizontal", "vertical"):
                raise SpecError(f"unknown flip {f!r}")
        object.__setattr__(self, "flips", tuple(self.flips))
        object.__setattr__(self, "translations", tuple(tuple(int(v) for v in t) for t in self.translations))
        object.__setattr__(self, "rotations", tuple(float(r) for r in self.rotations))

    @property
    def count(self) -> int:
        total = (1 + len(self.flips)) * (1 + len(self.rotations)) * (1 + len(self.translations))
        return total if self.include_identity else total - 1

    def combinations(self) -> list:
        """All (flip, rotation, translation) triples, ``None`` meaning skipped."""
        combos = itertools.product(
            (None,) + self.flips, (None,) + self.rotations, (None,) + self.translations
        )
        return [c for c in combos if self.include_identity or c != (None, None, None)]


def _flip(a, how):
    # arrays are (..., H, W); "horizontal" mirrors W, "vertical" mirrors H
    return a[..., ::-1] if how == "horizontal" else a[..., ::-1, :]


def _rotate(a, angle, order):
    return ndimage.rotate(a, angle, axes=(-2, -1), reshape=False, order=order, mode="constant", cval=0.0)


def apply_transform(sample: SliceSample, flip=None, rotation=None, translation=None) -> SliceSample:
    channels, label = sample.channels, sample.label
    if flip is not None:
        channels, label = _flip(channels, flip), _flip(label, flip)
    if rotation is not None and rotation % 360 != 0:
        channels = _rotate(channels, rotation, order=1)
        label = _rotate(label.astype(np.float64), rotation, order=0)
    if translation is not None:
        dx, dy = translation
        h, w = label.shape
        if abs(dx) >= h or abs(dy) >= w:
            raise SpecError(f"translation {translation} exceeds slice extent {(h, w)}")
        # circular shift keeps every foreground voxel
        channels = np.roll(channels, (dx, dy), axis=(-2, -1))
        label = np.roll(label, (dx, dy), axis=(-2, -1))
    return SliceSample(np.ascontiguousarray(channels), np.ascontiguousarray(label).round().astype(np.int64),
                       sample.subject_id, sample.slice_index)


def augment(sample: SliceSample, spec: AugmentationSpec, seed: int = 0) -> list:
    """Every augmentation in ``spec`` applied to ``sample``, in a fixed order."""
    h, w = sample.label.shape
    for dx, dy in spec.translations:
        if abs(dx) >= h or abs(dy) >= w:
            raise SpecError(f"translation {(dx, dy)} exceeds slice extent {(h, w)}")
    rng = np.random.default_rng(seed)
    out = []
    for flip, rot, shift in spec.combinations():
        if rot is not None and spec.rotation_jitter:
            rot = rot + rng.uniform(-spec.rotation_jitter, spec.rotation_jitter)
        out.append(apply_transform(sample, flip, rot, shift))
    return out


def random_augmentation(sample: SliceSample, spec: AugmentationSpec, rng: np.random.Generator) -> SliceSample:
    """One variant drawn uniformly from ``spec``'s combinations (used per epoch in training)."""
    combos = spec.combinations()
    flip, rot, shift = combos[int(rng.integers(len(combos)))]
    if rot is not None and spec.rotation_jitter:
        rot = rot + rng.uniform(-spec.rotation_jitter, spec.rotation_jitter)
    return apply_transform(sample, flip, rot, shift)
