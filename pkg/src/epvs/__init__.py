"""Enlarged perivascular space detection from multi-sequence MRI.

Modules: ``volume_io`` (NIfTI-1), ``preprocess`` (SWI, normalization,
slicing, augmentation), ``unet`` (numpy U-Net), ``lesion`` (components and
matching), ``metrics``, ``phantom`` (synthetic cohorts) and ``harness``
(cross-validated ablation and reports).
"""

__version__ = "0.1.0"
