"""Synthetic multi-sequence brain blocks with known ePVS ground truth.

ePVS are thin capsules, mimics are larger ellipsoids: white-matter
hyperintensities (bright on T2w *and* FLAIR) and lacunes (CSF-like, but
wider than any ePVS).  Intensities come from a per-sequence contrast table.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from .errors import ConfigError, PlacementError, ValidationError
from .lesion import label_components
from .volume_io import LabelVolume, Volume, read_labels, read_nifti, write_nifti

SEQUENCES = ("T1w", "T2w", "FLAIR", "SWI")
TISSUES = ("background", "epvs", "wmh", "lacune")
REGION_NAMES = (
    "basal ganglia",
    "frontoparietal",
    "temporal and hippocampal",
    "insula",
    "midbrain",
    "thalamus",
    "occipital",
)

DEFAULT_CONTRAST = {
    "T1w": {"background": 0.6, "epvs": 0.5, "wmh": 0.5, "lacune": 0.15},
    "T2w": {"background": 0.4, "epvs": 1.0, "wmh": 1.0, "lacune": 1.0},
    "FLAIR": {"background": 0.5, "epvs": 0.45, "wmh": 1.0, "lacune": 0.1},
    "SWI": {"background": 0.5, "epvs": 0.5, "wmh": 0.5, "lacune": 0.5},
}

MAX_ATTEMPTS = 1000


@dataclass(frozen=True)
class PhantomSpec:
    dims: tuple = (64, 64, 64)
    spacing: tuple = (1.0, 1.0, 1.0)
    n_epvs: tuple = (20, 40)
    epvs_radius: tuple = (0.5, 1.5)
    epvs_length: tuple = (2.0, 10.0)
    n_wmh: tuple = (2, 4)
    wmh_radius: tuple = (2.0, 4.0)
    n_lacunes: tuple = (1, 3)
    lacune_diameter: tuple = (5.0, 12.0)
    noise_sigma: float = 0.05
    contrast_table: dict = field(default_factory=lambda: {k: dict(v) for k, v in DEFAULT_CONTRAST.items()})
    n_regions: int = 7
    margin: int = 2

    def __post_init__(self):
        for name in ("dims", "spacing", "n_epvs", "epvs_radius", "epvs_length", "n_wmh", "wmh_radius",
                     "n_lacunes", "lacune_diameter"):
            object.__setattr__(self, name, tuple(getattr(self, name)))
        lo, hi = self.epvs_radius
        if not 0 < lo <= hi <= 1.5:
            raise ConfigError("ePVS radius must lie in (0, 1.5] voxels (diameter <= 3)")
        lo, hi = self.lacune_diameter
        if not 3 <= lo <= hi <= 15:
            raise ConfigError("lacune diameters must lie in [3, 15] voxels")
        for name in ("n_epvs", "n_wmh", "n_lacunes"):
            lo, hi = getattr(self, name)
            if not 0 <= lo <= hi:
                raise ConfigError(f"{name} must be an ordered non-negative range")
        if not 1 <= self.n_regions <= len(REGION_NAMES):
            raise ConfigError(f"n_regions must be in 1..{len(REGION_NAMES)}")
        if self.noise_sigma < 0:
            raise ConfigError("noise_sigma must be non-negative")
        missing = [(s, t) for s in SEQUENCES for t in TISSUES if t not in self.contrast_table.get(s, {})]
        if missing:
            raise ConfigError(f"contrast table lacks entries {missing}")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "PhantomSpec":
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise ConfigError(f"unknown phantom spec keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class PhantomCase:
    subject_id: str
    volumes: dict  # sequence name -> Volume
    gt_epvs: Volume
    mimic_mask: Volume
    regions: LabelVolume
    spec: PhantomSpec | None = None
    seed: int | None = None
    lesions: list = field(default_factory=list)  # placement records

    def __eq__(self, other):
        if not isinstance(other, PhantomCase):
            return NotImplemented
        return (
            self.subject_id == other.subject_id
            and self.volumes.keys() == other.volumes.keys()
            and all(self.volumes[k] == other.volumes[k] for k in self.volumes)
            and self.gt_epvs == other.gt_epvs
            and self.mimic_mask == other.mimic_mask
            and self.regions == other.regions
            and self.seed == other.seed
        )

    def provenance(self) -> dict:
        return {
            "subject_id": self.subject_id,
            "seed": self.seed,
            "spec": None if self.spec is None else self.spec.to_dict(),
            "region_names": {str(k): v for k, v in self.regions.label_names.items()},
            "lesions": self.lesions,
        }


# -- rasterization ---------------------------------------------------------------


def _segment_distance(points, p0, p1):
    d = p1 - p0
    denom = float(d @ d)
    t = np.zeros(len(points)) if denom == 0 else np.clip((points - p0) @ d / denom, 0.0, 1.0)
    closest = p0 + t[:, None] * d
    return np.linalg.norm(points - closest, axis=1)


def _box(lo, hi, dims):
    lo = np.maximum(np.floor(lo).astype(int), 0)
    hi = np.minimum(np.ceil(hi).astype(int), np.array(dims) - 1)
    axes = [np.arange(a, b + 1) for a, b in zip(lo, hi)]
    return np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, 3)


def capsule_voxels(p0, p1, radius, dims) -> np.ndarray:
    """Voxels whose centers lie within ``radius`` of segment p0-p1, made 26-connected.

    A chain of rounded points along the axis is added so that thin capsules
    do not fall apart; only the component containing that chain is kept.
    """
    p0, p1 = np.asarray(p0, float), np.asarray(p1, float)
    pts = _box(np.minimum(p0, p1) - radius - 1, np.maximum(p0, p1) + radius + 1, dims)
    inside = pts[_segment_distance(pts.astype(float), p0, p1) <= radius]
    steps = max(2, int(np.ceil(np.linalg.norm(p1 - p0) * 4)) + 1)
    chain = np.rint(p0 + np.linspace(0, 1, steps)[:, None] * (p1 - p0)).astype(int)
    vox = np.unique(np.concatenate([inside, chain]), axis=0)
    vox = vox[np.all((vox >= 0) & (vox < np.array(dims)), axis=1)]
    lo = vox.min(axis=0)
    local = np.zeros(vox.max(axis=0) - lo + 1, dtype=bool)
    local[tuple((vox - lo).T)] = True
    coords, comp = label_components(local, 26)
    anchor = tuple(np.rint((p0 + p1) / 2).astype(int) - lo)
    anchor_comp = comp[np.flatnonzero(np.all(coords == np.clip(anchor, 0, np.array(local.shape) - 1), axis=1))]
    keep = comp == (anchor_comp[0] if len(anchor_comp) else np.bincount(comp).argmax())
    return coords[keep] + lo


def ellipsoid_voxels(center, radii, dims) -> np.ndarray:
    center, radii = np.asarray(center, float), np.asarray(radii, float)
    pts = _box(center - radii, center + radii, dims)
    r = (((pts - center) / radii) ** 2).sum(axis=1)
    return pts[r <= 1.0]


def _dilated_hits(occupied, vox):
    """True if any voxel of ``vox`` or its 26-neighbourhood is occupied."""
    dims = np.array(occupied.shape)
    for d in np.array(np.meshgrid(*[[-1, 0, 1]] * 3, indexing="ij")).reshape(3, -1).T:
        nb = vox + d
        ok = np.all((nb >= 0) & (nb < dims), axis=1)
        if occupied[tuple(nb[ok].T)].any():
            return True
    return False


def _fits(vox, dims, margin):
    return len(vox) > 0 and vox.min() >= margin and np.all(vox.max(axis=0) <= np.array(dims) - 1 - margin)


def _random_direction(rng):
    v = rng.normal(size=3)
    return v / np.linalg.norm(v)


def _place(kind, make, occupied, rng, spec, index):
    for _ in range(MAX_ATTEMPTS):
        vox, record = make(rng)
        if _fits(vox, spec.dims, spec.margin) and not _dilated_hits(occupied, vox):
            occupied[tuple(vox.T)] = True
            record.update(kind=kind, index=index, n_voxels=int(len(vox)))
            return vox, record
    raise PlacementError(f"could not place {kind} #{index} without overlap after {MAX_ATTEMPTS} attempts")


def region_labels(spec: PhantomSpec) -> LabelVolume:
    """Axis-aligned slabs along x, one per region name."""
    data = np.zeros(spec.dims)
    for lab, xs in enumerate(np.array_split(np.arange(spec.dims[0]), spec.n_regions), start=1):
        data[xs, :, :] = lab
    names = {i + 1: REGION_NAMES[i] for i in range(spec.n_regions)}
    return LabelVolume(data, spec.spacing, None, "uint8", names)


def generate_phantom(spec: PhantomSpec, seed: int, subject_id: str | None = None) -> PhantomCase:
    rng = np.random.default_rng(seed)
    dims = tuple(int(d) for d in spec.dims)
    lo_c = np.full(3, spec.margin + 1.0)
    hi_c = np.array(dims) - spec.margin - 2.0
    occupied = np.zeros(dims, dtype=bool)
    tissue = np.zeros(dims, dtype=np.int8)  # index into TISSUES
    records = []

    def wmh(r):
        c = r.uniform(lo_c, hi_c)
        radii = r.uniform(*spec.wmh_radius, size=3)
        return ellipsoid_voxels(c, radii, dims), {"center": c.tolist(), "radii": radii.tolist()}

    def lacune(r):
        c = r.uniform(lo_c, hi_c)
        diam = r.uniform(*spec.lacune_diameter, size=3)
        return ellipsoid_voxels(c, diam / 2, dims), {"center": c.tolist(), "diameters": diam.tolist()}

    def epvs(r):
        c = r.uniform(lo_c, hi_c)
        u = _random_direction(r)
        length = r.uniform(*spec.epvs_length)
        radius = r.uniform(*spec.epvs_radius)
        p0, p1 = c - u * length / 2, c + u * length / 2
        return capsule_voxels(p0, p1, radius, dims), {"p0": p0.tolist(), "p1": p1.tolist(), "radius": radius}

    counts = {name: int(rng.integers(lo, hi + 1)) for name, (lo, hi) in
              (("wmh", spec.n_wmh), ("lacune", spec.n_lacunes), ("epvs", spec.n_epvs))}
    for kind, make, code in (("wmh", wmh, 2), ("lacune", lacune, 3), ("epvs", epvs, 1)):
        for i in range(counts[kind]):
            vox, rec = _place(kind, make, occupied, rng, spec, i)
            tissue[tuple(vox.T)] = code
            records.append(rec)

    volumes = {}
    for seq in SEQUENCES:
        table = spec.contrast_table[seq]
        levels = np.array([table[t] for t in TISSUES], dtype=np.float64)
        img = levels[tissue]
        if spec.noise_sigma > 0:
            img = img + rng.normal(0.0, spec.noise_sigma, size=dims)
        volumes[seq] = Volume(img, spec.spacing, None, "float32")
    gt = Volume((tissue == 1).astype(np.float64), spec.spacing, None, "uint8")
    mimics = Volume(((tissue == 2) | (tissue == 3)).astype(np.float64), spec.spacing, None, "uint8")
    sid = subject_id if subject_id is not None else f"seed{seed}"
    return PhantomCase(sid, volumes, gt, mimics, region_labels(spec), spec, int(seed), records)


def subject_seed(master_seed: int, index: int) -> int:
    return int(np.random.SeedSequence([int(master_seed), int(index)]).generate_state(1)[0])


def generate_cohort(spec: PhantomSpec, n_subjects: int, master_seed: int) -> list:
    if n_subjects < 1:
        raise ConfigError("n_subjects must be >= 1")
    cases = []
    for i in range(n_subjects):
        try:
            cases.append(generate_phantom(spec, subject_seed(master_seed, i), f"sub-{i:03d}"))
        except PlacementError as exc:
            raise PlacementError(f"subject {i}: {exc}") from exc
    return cases


# -- persistence ---------------------------------------------------------------------


def save_case(case: PhantomCase, directory) -> Path:
    d = Path(directory) / case.subject_id
    d.mkdir(parents=True, exist_ok=True)
    for seq, vol in case.volumes.items():
        write_nifti(vol, d / f"{seq}.nii.gz")
    write_nifti(case.gt_epvs, d / "gt_epvs.nii.gz")
    write_nifti(case.mimic_mask, d / "mimics.nii.gz")
    write_nifti(case.regions, d / "regions.nii.gz")
    (d / "provenance.json").write_text(json.dumps(case.provenance(), indent=2, sort_keys=True))
    return d


def save_cohort(cases, directory) -> None:
    for case in cases:
        save_case(case, directory)


def load_case(subject_dir) -> PhantomCase:
    d = Path(subject_dir)
    prov = {}
    if (d / "provenance.json").exists():
        prov = json.loads((d / "provenance.json").read_text())
    volumes = {seq: read_nifti(d / f"{seq}.nii.gz") for seq in SEQUENCES if (d / f"{seq}.nii.gz").exists()}
    if not (d / "gt_epvs.nii.gz").exists():
        raise ValidationError(f"{d}: missing gt_epvs.nii.gz")
    gt = read_nifti(d / "gt_epvs.nii.gz")
    mimics = read_nifti(d / "mimics.nii.gz") if (d / "mimics.nii.gz").exists() else gt.like(np.zeros(gt.dims), "uint8")
    names = {int(k): v for k, v in prov.get("region_names", {}).items()}
    if (d / "regions.nii.gz").exists():
        regions = read_labels(d / "regions.nii.gz", names)
    else:
        regions = LabelVolume(np.ones(gt.dims), gt.spacing, gt.affine, "uint8", {1: "whole volume"})
    spec = PhantomSpec.from_dict(prov["spec"]) if prov.get("spec") else None
    return PhantomCase(prov.get("subject_id", d.name), volumes, gt, mimics, regions, spec,
                       prov.get("seed"), prov.get("lesions", []))


def load_cohort(directory) -> list:
    root = Path(directory)
    subs = sorted(p for p in root.iterdir() if p.is_dir() and (p / "gt_epvs.nii.gz").exists())
    if not subs:
        raise ValidationError(f"{root}: no subject directories with gt_epvs.nii.gz")
    return [load_case(p) for p in subs]
