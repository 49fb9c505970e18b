"""NIfTI-1 reading/writing and the in-memory volume types.

Volumes hold their samples as a read-only ``(nx, ny, nz)`` float64 array
(x-fastest on disk, i.e. Fortran order).  ``dtype`` records the on-disk
storage type; values are normalized to that type's precision on
construction so that ``read_nifti(write_nifti(v)) == v`` holds exactly.
"""
from __future__ import annotations

import gzip
import logging
import os
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping

import numpy as np

from .errors import (
    GeometryError,
    NiftiFormatError,
    ShapeError,
    TruncatedFileError,
    UnsupportedDtypeError,
    ValidationError,
)

log = logging.getLogger(__name__)

HEADER_SIZE = 348
VOX_OFFSET = 352

# NIfTI datatype code <-> numpy storage type
DTYPE_CODES = {2: "uint8", 4: "int16", 16: "float32", 64: "float64"}
CODE_FOR_DTYPE = {v: k for k, v in DTYPE_CODES.items()}
SUPPORTED_DTYPES = tuple(CODE_FOR_DTYPE)

_HEADER_FIELDS = [
    ("sizeof_hdr", "i4"),
    ("data_type", "S10"),
    ("db_name", "S18"),
    ("extents", "i4"),
    ("session_error", "i2"),
    ("regular", "S1"),
    ("dim_info", "u1"),
    ("dim", "i2", (8,)),
    ("intent_p1", "f4"),
    ("intent_p2", "f4"),
    ("intent_p3", "f4"),
    ("intent_code", "i2"),
    ("datatype", "i2"),
    ("bitpix", "i2"),
    ("slice_start", "i2"),
    ("pixdim", "f4", (8,)),
    ("vox_offset", "f4"),
    ("scl_slope", "f4"),
    ("scl_inter", "f4"),
    ("slice_end", "i2"),
    ("slice_code", "u1"),
    ("xyzt_units", "u1"),
    ("cal_max", "f4"),
    ("cal_min", "f4"),
    ("slice_duration", "f4"),
    ("toffset", "f4"),
    ("glmax", "i4"),
    ("glmin", "i4"),
    ("descrip", "S80"),
    ("aux_file", "S24"),
    ("qform_code", "i2"),
    ("sform_code", "i2"),
    ("quatern_b", "f4"),
    ("quatern_c", "f4"),
    ("quatern_d", "f4"),
    ("qoffset_x", "f4"),
    ("qoffset_y", "f4"),
    ("qoffset_z", "f4"),
    ("srow_x", "f4", (4,)),
    ("srow_y", "f4", (4,)),
    ("srow_z", "f4", (4,)),
    ("intent_name", "S16"),
    ("magic", "S4"),
]


def _header_dtype(endian: str) -> np.dtype:
    fields = []
    for f in _HEADER_FIELDS:
        name, code = f[0], f[1]
        if code[0] in "iuf":
            code = endian + code
        fields.append((name, code) + tuple(f[2:]))
    dt = np.dtype(fields)
    assert dt.itemsize == HEADER_SIZE
    return dt


_HDR_LE = _header_dtype("<")
_HDR_BE = _header_dtype(">")


def _readonly(a: np.ndarray) -> np.ndarray:
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class Volume:
    """A 3D scalar grid with spacing (mm) and a voxel-to-world affine."""

    data: np.ndarray
    spacing: tuple = (1.0, 1.0, 1.0)
    affine: np.ndarray | None = None
    dtype: str = "float32"

    def __post_init__(self):
        data = np.asarray(self.data)
        if data.ndim != 3 or min(data.shape) < 1:
            raise ShapeError(f"volume data must be a non-empty 3D array, got shape {data.shape}")
        if self.dtype not in SUPPORTED_DTYPES:
            raise UnsupportedDtypeError(f"unsupported dtype {self.dtype!r}")
        spacing = tuple(float(s) for s in self.spacing)
        if len(spacing) != 3 or not all(s > 0 and np.isfinite(s) for s in spacing):
            raise ValidationError(f"spacing must be three positive numbers, got {self.spacing}")
        affine = np.diag(spacing + (1.0,)) if self.affine is None else np.array(self.affine, dtype=np.float64)
        if affine.shape != (4, 4) or not np.array_equal(affine[3], [0.0, 0.0, 0.0, 1.0]):
            raise GeometryError("affine must be 4x4 with last row (0, 0, 0, 1)")
        object.__setattr__(self, "spacing", spacing)
        object.__setattr__(self, "affine", _readonly(affine))
        object.__setattr__(self, "data", _readonly(self._coerce(data)))

    def _coerce(self, data: np.ndarray) -> np.ndarray:
        if self.dtype in ("uint8", "int16"):
            info = np.iinfo(self.dtype)
            if data.size and (data.min() < info.min or data.max() > info.max):
                raise ValidationError(f"values out of range for {self.dtype}")
            return np.rint(data).astype(self.dtype).astype(np.float64)
        return data.astype(self.dtype).astype(np.float64)

    @property
    def dims(self) -> tuple:
        return tuple(int(n) for n in self.data.shape)

    @property
    def voxel_volume(self) -> float:
        return float(np.prod(self.spacing))

    def same_geometry(self, other: "Volume", atol: float = 1e-6) -> bool:
        return (
            self.dims == other.dims
            and np.allclose(self.spacing, other.spacing, atol=atol)
            and np.allclose(self.affine, other.affine, atol=atol)
        )

    def check_geometry(self, other: "Volume", what: str = "volume"):
        if not self.same_geometry(other):
            raise ShapeError(f"{what} geometry mismatch: {self.dims} vs {other.dims}")

    def like(self, data, dtype: str | None = None) -> "Volume":
        """New volume with this geometry and different samples."""
        return Volume(data, self.spacing, self.affine, dtype or self.dtype)

    def to_world(self, ijk) -> np.ndarray:
        ijk = np.atleast_2d(np.asarray(ijk, dtype=np.float64))
        return ijk @ self.affine[:3, :3].T + self.affine[:3, 3]

    def __eq__(self, other):
        if type(self) is not type(other):
            return NotImplemented
        return (
            self.dtype == other.dtype
            and self.spacing == other.spacing
            and np.array_equal(self.affine, other.affine)
            and np.array_equal(self.data, other.data)
            and getattr(self, "label_names", None) == getattr(other, "label_names", None)
        )

    __hash__ = None


@dataclass(frozen=True, eq=False)
class LabelVolume(Volume):
    """Integer region labels (0 = background) plus a label-id -> name map."""

    dtype: str = "int16"
    label_names: Mapping[int, str] = field(default_factory=dict)

    def __post_init__(self):
        super().__post_init__()
        if self.data.size and self.data.min() < 0:
            raise ValidationError("labels must be non-negative")
        names = {int(k): str(v) for k, v in dict(self.label_names).items()}
        if 0 in names:
            raise ValidationError("label 0 is reserved for background")
        object.__setattr__(self, "label_names", names)

    def _coerce(self, data):
        if not np.all(np.equal(np.mod(data, 1), 0)):
            raise ValidationError("label volume must hold integers")
        return super()._coerce(data).astype(np.int64)

    def like(self, data, dtype=None) -> "LabelVolume":
        return LabelVolume(data, self.spacing, self.affine, dtype or self.dtype, self.label_names)


def as_label_volume(volume: Volume, label_names=None) -> LabelVolume:
    dtype = volume.dtype if volume.dtype in ("uint8", "int16") else "int16"
    return LabelVolume(volume.data, volume.spacing, volume.affine, dtype, label_names or {})


# -- quaternion helpers ------------------------------------------------------


def _quaternion_to_affine(hdr) -> np.ndarray:
    b, c, d = float(hdr["quatern_b"]), float(hdr["quatern_c"]), float(hdr["quatern_d"])
    a = np.sqrt(max(0.0, 1.0 - (b * b + c * c + d * d)))
    rot = np.array(
        [
            [a * a + b * b - c * c - d * d, 2 * (b * c - a * d), 2 * (b * d + a * c)],
            [2 * (b * c + a * d), a * a + c * c - b * b - d * d, 2 * (c * d - a * b)],
            [2 * (b * d - a * c), 2 * (c * d + a * b), a * a + d * d - b * b - c * c],
        ]
    )
    pixdim = hdr["pixdim"].astype(np.float64)
    qfac = -1.0 if pixdim[0] < 0 else 1.0
    aff = np.eye(4)
    aff[:3, :3] = rot * np.array([pixdim[1], pixdim[2], pixdim[3] * qfac])
    aff[:3, 3] = [hdr["qoffset_x"], hdr["qoffset_y"], hdr["qoffset_z"]]
    return aff


def _affine_to_quaternion(affine: np.ndarray):
    """Return (b, c, d, qfac) or None if the affine has shear."""
    m = affine[:3, :3]
    zooms = np.linalg.norm(m, axis=0)
    rot = m / zooms
    qfac = 1.0
    if np.linalg.det(rot) < 0:
        rot = rot.copy()
        rot[:, 2] *= -1
        qfac = -1.0
    if not np.allclose(rot.T @ rot, np.eye(3), atol=1e-4):
        return None
    trace = np.trace(rot)
    if trace > 0:
        s = 0.5 / np.sqrt(trace + 1.0)
        a = 0.25 / s
        b = (rot[2, 1] - rot[1, 2]) * s
        c = (rot[0, 2] - rot[2, 0]) * s
        d = (rot[1, 0] - rot[0, 1]) * s
    elif rot[0, 0] > rot[1, 1] and rot[0, 0] > rot[2, 2]:
        s = 2.0 * np.sqrt(1.0 + rot[0, 0] - rot[1, 1] - rot[2, 2])
        a = (rot[2, 1] - rot[1, 2]) / s
        b = 0.25 * s
        c = (rot[0, 1] + rot[1, 0]) / s
        d = (rot[0, 2] + rot[2, 0]) / s
    elif rot[1, 1] > rot[2, 2]:
        s = 2.0 * np.sqrt(1.0 + rot[1, 1] - rot[0, 0] - rot[2, 2])
        a = (rot[0, 2] - rot[2, 0]) / s
        b = (rot[0, 1] + rot[1, 0]) / s
        c = 0.25 * s
        d = (rot[1, 2] + rot[2, 1]) / s
    else:
        s = 2.0 * np.sqrt(1.0 + rot[2, 2] - rot[0, 0] - rot[1, 1])
        a = (rot[1, 0] - rot[0, 1]) / s
        b = (rot[0, 2] + rot[2, 0]) / s
        c = (rot[1, 2] + rot[2, 1]) / s
        d = 0.25 * s
    if a < 0:
        b, c, d = -b, -c, -d
    return b, c, d, qfac


# -- reading -------------------------------------------------------------------


def _load_bytes(path) -> bytes:
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:2] == b"\x1f\x8b":
        try:
            raw = gzip.decompress(raw)
        except (OSError, EOFError) as exc:
            raise TruncatedFileError(f"{path}: corrupt or truncated gzip stream") from exc
    return raw


def _parse_header(raw: bytes, path) -> np.void:
    if len(raw) < HEADER_SIZE:
        raise TruncatedFileError(f"{path}: {len(raw)} bytes, shorter than a NIfTI-1 header")
    hdr = None
    for dt in (_HDR_LE, _HDR_BE):
        cand = np.frombuffer(raw[:HEADER_SIZE], dtype=dt)[0]
        if 1 <= cand["dim"][0] <= 7:
            hdr = cand
            break
    if hdr is None:
        raise NiftiFormatError(f"{path}: dim[0] is not in 1..7 under either byte order")
    magic = bytes(raw[344:348])
    if magic not in (b"n+1\x00", b"ni1\x00"):
        raise NiftiFormatError(f"{path}: bad magic {magic!r}")
    return hdr


def read_nifti(path) -> Volume:
    """Read a single-file (or .hdr/.img pair) NIfTI-1 volume, optionally gzipped."""
    path = Path(path)
    raw = _load_bytes(path)
    hdr = _parse_header(raw, path)
    big_endian = hdr.dtype == _HDR_BE
    code = int(hdr["datatype"])
    if code not in DTYPE_CODES:
        raise UnsupportedDtypeError(f"{path}: datatype code {code} not supported")
    dtype = DTYPE_CODES[code]

    dim = [int(x) for x in hdr["dim"]]
    ndim = dim[0]
    shape = [max(1, dim[i]) if i <= ndim else 1 for i in range(1, 4)]
    if ndim > 3 and any(dim[i] > 1 for i in range(4, ndim + 1)):
        raise ShapeError(f"{path}: only 3D volumes are supported, got dim {dim[:ndim + 1]}")

    if bytes(raw[344:348]) == b"ni1\x00":
        payload_src = _load_bytes(_paired_image(path))
        offset = int(hdr["vox_offset"])
    else:
        payload_src = raw
        offset = int(hdr["vox_offset"]) or VOX_OFFSET
    count = int(np.prod(shape))
    storage = np.dtype(dtype).newbyteorder(">" if big_endian else "<")
    nbytes = count * storage.itemsize
    if len(payload_src) < offset + nbytes:
        raise TruncatedFileError(f"{path}: expected {nbytes} data bytes at offset {offset}")
    flat = np.frombuffer(payload_src, dtype=storage, count=count, offset=offset)
    data = flat.reshape(shape, order="F").astype(np.float64)

    slope, inter = float(hdr["scl_slope"]), float(hdr["scl_inter"])
    if slope != 0 and not (slope == 1 and inter == 0):
        data = data * slope + inter
        dtype = "float64"

    pixdim = hdr["pixdim"].astype(np.float64)
    spacing = tuple(float(abs(p)) if p != 0 else 1.0 for p in pixdim[1:4])
    if hdr["sform_code"] > 0:
        affine = np.eye(4)
        affine[0], affine[1], affine[2] = hdr["srow_x"], hdr["srow_y"], hdr["srow_z"]
    elif hdr["qform_code"] > 0:
        affine = _quaternion_to_affine(hdr)
    else:
        warnings.warn(f"{path}: no sform/qform, using spacing-scaled identity affine", stacklevel=2)
        affine = np.diag(spacing + (1.0,))
    return Volume(data, spacing, affine, dtype)


def _paired_image(path: Path) -> Path:
    name = path.name
    for hdr_ext, img_ext in ((".hdr.gz", ".img.gz"), (".hdr", ".img")):
        if name.endswith(hdr_ext):
            return path.with_name(name[: -len(hdr_ext)] + img_ext)
    raise NiftiFormatError(f"{path}: 'ni1' header without a .hdr extension")


# -- writing -------------------------------------------------------------------


def encode_nifti(volume: Volume) -> bytes:
    """Serialize to single-file NIfTI-1 bytes (little-endian, uncompressed)."""
    hdr = np.zeros((), dtype=_HDR_LE)
    hdr["sizeof_hdr"] = HEADER_SIZE
    hdr["regular"] = b"r"
    hdr["dim"] = [3, *volume.dims, 1, 1, 1, 1]
    hdr["datatype"] = CODE_FOR_DTYPE[volume.dtype]
    hdr["bitpix"] = np.dtype(volume.dtype).itemsize * 8
    hdr["pixdim"] = [1.0, *volume.spacing, 0.0, 0.0, 0.0, 0.0]
    hdr["vox_offset"] = VOX_OFFSET
    hdr["scl_slope"] = 1.0
    hdr["xyzt_units"] = 2  # mm
    hdr["sform_code"] = 1
    hdr["srow_x"], hdr["srow_y"], hdr["srow_z"] = volume.affine[0], volume.affine[1], volume.affine[2]
    quat = _affine_to_quaternion(volume.affine)
    if quat is not None:
        b, c, d, qfac = quat
        hdr["qform_code"] = 1
        hdr["quatern_b"], hdr["quatern_c"], hdr["quatern_d"] = b, c, d
        hdr["pixdim"][0] = qfac
        hdr["qoffset_x"], hdr["qoffset_y"], hdr["qoffset_z"] = volume.affine[:3, 3]
    hdr["magic"] = b"n+1"
    payload = volume.data.astype("<" + np.dtype(volume.dtype).str[1:]).tobytes(order="F")
    return hdr.tobytes() + b"\x00\x00\x00\x00" + payload


def write_nifti(volume: Volume, path) -> None:
    """Write ``volume`` to ``path``; a ``.gz`` suffix selects gzip compression."""
    if not isinstance(volume, Volume):
        raise ValidationError("write_nifti expects a Volume")
    blob = encode_nifti(volume)
    path = Path(path)
    if path.suffix == ".gz":
        # mtime=0 keeps the compressed bytes reproducible
        blob = gzip.compress(blob, compresslevel=6, mtime=0)
    tmp = path.with_name(path.name + ".part")
    with open(tmp, "wb") as fh:
        fh.write(blob)
    os.replace(tmp, path)


def read_labels(path, label_names=None) -> LabelVolume:
    return as_label_volume(read_nifti(path), label_names)


# -- orientation -----------------------------------------------------------------


def axis_orientation(affine: np.ndarray) -> list:
    """For each voxel axis, the closest world axis and its sign: [(world_axis, ±1), ...]."""
    m = np.asarray(affine, dtype=np.float64)[:3, :3]
    if abs(np.linalg.det(m)) < 1e-12:
        raise GeometryError("affine is singular")
    m = np.abs(m / np.linalg.norm(m, axis=0))
    result = [None] * 3
    free_vox, free_world = set(range(3)), set(range(3))
    for _ in range(3):
        best = max(((m[w, v], v, w) for v in free_vox for w in free_world))
        _, v, w = best
        sign = 1 if affine[w][v] > 0 else -1
        result[v] = (w, sign)
        free_vox.discard(v)
        free_world.discard(w)
    return result


def reorient_to_canonical(volume: Volume) -> Volume:
    """Permute/flip voxel axes so the affine is closest to axis-aligned RAS.

    World coordinates of every voxel are unchanged.
    """
    ornt = axis_orientation(volume.affine)
    # perm[j] = old voxel axis that maps to world axis j
    perm = [None] * 3
    flips = [False] * 3
    for v, (w, sign) in enumerate(ornt):
        perm[w] = v
        flips[w] = sign < 0
    if perm == [0, 1, 2] and not any(flips):
        return volume
    data = np.transpose(volume.data, perm)
    dims = data.shape
    transform = np.zeros((4, 4))
    transform[3, 3] = 1.0
    for j in range(3):
        if flips[j]:
            data = np.flip(data, axis=j)
            transform[perm[j], j] = -1.0
            transform[perm[j], 3] = dims[j] - 1
        else:
            transform[perm[j], j] = 1.0
    affine = volume.affine @ transform
    spacing = tuple(volume.spacing[p] for p in perm)
    data = np.ascontiguousarray(data)
    if isinstance(volume, LabelVolume):
        return LabelVolume(data, spacing, affine, volume.dtype, volume.label_names)
    return Volume(data, spacing, affine, volume.dtype)
