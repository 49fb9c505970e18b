"""Discrete lesions: 3D connected components, centers of mass, matching."""
from __future__ import annotations

import csv
import itertools
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial.distance import cdist

from .errors import DomainError, ShapeError, ValidationError
from .volume_io import Volume

CONNECTIVITIES = (6, 18, 26)


def neighbor_offsets(connectivity: int, half: bool = False) -> np.ndarray:
    """Offsets of the 3D neighborhood; ``half`` keeps one of each ±d pair."""
    if connectivity not in CONNECTIVITIES:
        raise ValidationError(f"connectivity must be one of {CONNECTIVITIES}")
    max_nonzero = {6: 1, 18: 2, 26: 3}[connectivity]
    offs = [
        d for d in itertools.product((-1, 0, 1), repeat=3)
        if 0 < sum(map(abs, d)) <= max_nonzero and (not half or d > (0, 0, 0))
    ]
    return np.array(offs, dtype=np.int64)


@dataclass
class Lesion:
    id: int
    voxels: np.ndarray  # (n, 3) voxel indices
    volume_mm3: float
    com_vox: np.ndarray
    com_mm: np.ndarray

    @property
    def volume_vox(self) -> int:
        return len(self.voxels)


@dataclass
class LesionSet:
    lesions: list
    dims: tuple
    spacing: tuple
    affine: np.ndarray
    connectivity: int = 26

    def __len__(self):
        return len(self.lesions)

    def __iter__(self):
        return iter(self.lesions)

    @property
    def total_voxels(self) -> int:
        return sum(les.volume_vox for les in self.lesions)

    def coms_mm(self) -> np.ndarray:
        if not self.lesions:
            return np.zeros((0, 3))
        return np.array([les.com_mm for les in self.lesions])

    def voxel_points_mm(self) -> np.ndarray:
        """World coordinates of every foreground voxel."""
        if not self.lesions:
            return np.zeros((0, 3))
        ijk = np.concatenate([les.voxels for les in self.lesions]).astype(np.float64)
        return ijk @ self.affine[:3, :3].T + self.affine[:3, 3]

    def subset(self, ids) -> "LesionSet":
        keep = set(ids)
        return LesionSet([les for les in self.lesions if les.id in keep], self.dims, self.spacing,
                         self.affine, self.connectivity)

    def mask(self) -> np.ndarray:
        out = np.zeros(self.dims, dtype=bool)
        for les in self.lesions:
            out[tuple(les.voxels.T)] = True
        return out

    def same_geometry(self, other: "LesionSet") -> bool:
        return tuple(self.dims) == tuple(other.dims) and np.allclose(self.affine, other.affine, atol=1e-6)

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["id", "volume_vox", "volume_mm3", "com_x_mm", "com_y_mm", "com_z_mm"])
            for les in self.lesions:
                w.writerow([les.id, les.volume_vox, repr(les.volume_mm3), *map(repr, map(float, les.com_mm))])

    def summary(self) -> dict:
        """Count / total voxels / average voxels per lesion, as tabulated per subject."""
        return lesion_size_summary(len(self), self.total_voxels)


def lesion_size_summary(count: int, total_voxels: int) -> dict:
    avg = total_voxels / count if count else None
    return {"count": int(count), "total_voxels": int(total_voxels), "avg_voxels": avg}


def center_of_mass(voxels, affine):
    """Unweighted mean voxel index and its world (mm) position."""
    voxels = np.asarray(voxels, dtype=np.float64)
    if voxels.size == 0:
        raise ValidationError("center of mass of an empty lesion")
    com_vox = voxels.mean(axis=0)
    affine = np.asarray(affine, dtype=np.float64)
    com_mm = affine[:3, :3] @ com_vox + affine[:3, 3]
    return com_vox, com_mm


class _UnionFind:
    def __init__(self, n):
        self.parent = list(range(n))

    def find(self, a):
        parent = self.parent
        while parent[a] != a:
            parent[a] = parent[parent[a]]
            a = parent[a]
        return a

    def union(self, a, b):
        ra, rb = self.find(a), self.find(b)
        if ra != rb:
            # smaller index wins so roots stay deterministic
            if rb < ra:
                ra, rb = rb, ra
            self.parent[rb] = ra


def label_components(mask: np.ndarray, connectivity: int = 26):
    """Union-find labelling; returns (coords (n,3) in scan order, component id per coord).

    Ids are 0.. in order of each component's first voxel in C-order scan.
    """
    coords = np.argwhere(mask)
    n = len(coords)
    if n == 0:
        return coords, np.zeros(0, dtype=np.int64)
    index = np.full(mask.shape, -1, dtype=np.int64)
    index[tuple(coords.T)] = np.arange(n)
    uf = _UnionFind(n)
    dims = np.array(mask.shape)
    for d in neighbor_offsets(connectivity, half=True):
        nb = coords + d
        ok = np.all((nb >= 0) & (nb < dims), axis=1)
        src = np.flatnonzero(ok)
        dst = index[tuple(nb[ok].T)]
        hit = dst >= 0
        for a, b in zip(src[hit].tolist(), dst[hit].tolist()):
            uf.union(a, b)
    roots = np.array([uf.find(i) for i in range(n)])
    _, first, inverse = np.unique(roots, return_index=True, return_inverse=True)
    # relabel by first appearance in scan order
    order = np.argsort(first)
    rank = np.empty_like(order)
    rank[order] = np.arange(len(order))
    return coords, rank[inverse]


def _as_binary(mask) -> np.ndarray:
    data = mask.data if isinstance(mask, Volume) else np.asarray(mask)
    if not np.all((data == 0) | (data == 1)):
        raise DomainError("mask must contain only 0 and 1")
    return data.astype(bool)


def connected_components(mask: Volume, connectivity: int = 26) -> LesionSet:
    """Split the foreground of a binary mask into lesions."""
    data = _as_binary(mask)
    coords, comp = label_components(data, connectivity)
    lesions = []
    if len(coords):
        order = np.argsort(comp, kind="stable")
        bounds = np.flatnonzero(np.diff(comp[order])) + 1
        for lid, members in enumerate(np.split(order, bounds)):
            vox = coords[members]
            com_vox, com_mm = center_of_mass(vox, mask.affine)
            lesions.append(Lesion(lid, vox, len(vox) * mask.voxel_volume, com_vox, com_mm))
    return LesionSet(lesions, mask.dims, mask.spacing, np.array(mask.affine), connectivity)


@dataclass
class MatchResult:
    pairs: list = field(default_factory=list)  # (pred id, gt id, distance mm)
    unmatched_pred: list = field(default_factory=list)
    unmatched_gt: list = field(default_factory=list)

    @property
    def tp(self) -> int:
        return len(self.pairs)

    @property
    def fp(self) -> int:
        return len(self.unmatched_pred)

    @property
    def fn(self) -> int:
        return len(self.unmatched_gt)


def greedy_match(pred_points, gt_points, max_dist, pred_ids=None, gt_ids=None) -> MatchResult:
    """Nearest-first one-to-one matching of two point lists within ``max_dist``."""
    pred_points = np.asarray(pred_points, dtype=np.float64).reshape(-1, 3)
    gt_points = np.asarray(gt_points, dtype=np.float64).reshape(-1, 3)
    pred_ids = list(range(len(pred_points))) if pred_ids is None else list(pred_ids)
    gt_ids = list(range(len(gt_points))) if gt_ids is None else list(gt_ids)
    result = MatchResult()
    if len(pred_points) and len(gt_points):
        dist = cdist(pred_points, gt_points)
        pi, gi = np.nonzero(dist <= max_dist)
        candidates = sorted(zip(dist[pi, gi].tolist(), [pred_ids[i] for i in pi], [gt_ids[j] for j in gi]))
        used_p, used_g = set(), set()
        for d, p, g in candidates:
            if p not in used_p and g not in used_g:
                used_p.add(p)
                used_g.add(g)
                result.pairs.append((p, g, d))
    matched_p = {p for p, _, _ in result.pairs}
    matched_g = {g for _, g, _ in result.pairs}
    result.unmatched_pred = [p for p in pred_ids if p not in matched_p]
    result.unmatched_gt = [g for g in gt_ids if g not in matched_g]
    return result


def match_lesions(pred: LesionSet, gt: LesionSet, max_dist_mm: float = 3.0) -> MatchResult:
    """Match predicted to ground-truth lesions by center-of-mass distance."""
    if not pred.same_geometry(gt):
        raise ShapeError("prediction and ground truth lesion sets have different geometry")
    return greedy_match(pred.coms_mm(), gt.coms_mm(), max_dist_mm,
                        [les.id for les in pred], [les.id for les in gt])
