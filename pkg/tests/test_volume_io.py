import gzip
import struct
import zlib

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from epvs.errors import (
    GeometryError,
    NiftiFormatError,
    ShapeError,
    TruncatedFileError,
    UnsupportedDtypeError,
    ValidationError,
)
from epvs.volume_io import (
    HEADER_SIZE,
    SUPPORTED_DTYPES,
    LabelVolume,
    Volume,
    encode_nifti,
    read_labels,
    read_nifti,
    reorient_to_canonical,
    write_nifti,
)


def random_volume(rng, dtype, dims=None):
    dims = dims or tuple(int(d) for d in rng.integers(1, 33, size=3))
    if dtype == "uint8":
        data = rng.integers(0, 256, size=dims)
    elif dtype == "int16":
        data = rng.integers(-32768, 32768, size=dims)
    else:
        data = rng.normal(0, 100, size=dims)
    spacing = tuple(float(np.float32(s)) for s in rng.uniform(0.3, 3.0, size=3))
    affine = np.diag(spacing + (1.0,))
    affine[:3, 3] = np.float32(rng.uniform(-100, 100, size=3))
    return Volume(data, spacing, affine, dtype)


def _header(dim, datatype=16, bitpix=32, endian="<", magic=b"n+1\x00", sform=False):
    """Hand-packed NIfTI-1 header, independent of the writer."""
    h = bytearray(HEADER_SIZE)
    struct.pack_into(endian + "i", h, 0, 348)
    struct.pack_into(endian + "8h", h, 40, *dim)
    struct.pack_into(endian + "hh", h, 70, datatype, bitpix)
    struct.pack_into(endian + "8f", h, 76, 1, 1, 1, 1, 0, 0, 0, 0)
    struct.pack_into(endian + "f", h, 108, 352.0)
    if sform:
        struct.pack_into(endian + "h", h, 254, 1)
        struct.pack_into(endian + "4f", h, 280, 2, 0, 0, 10)
        struct.pack_into(endian + "4f", h, 296, 0, 3, 0, 20)
        struct.pack_into(endian + "4f", h, 312, 0, 0, 4, 30)
    h[344:348] = magic
    return bytes(h) + b"\x00" * 4


@pytest.mark.parametrize("dtype", SUPPORTED_DTYPES)
@pytest.mark.parametrize("suffix", [".nii", ".nii.gz"])
def test_roundtrip_bit_exact(tmp_path, dtype, suffix):
    rng = np.random.default_rng(zlib.crc32(f"{dtype}{suffix}".encode()))
    for i in range(3):
        v = random_volume(rng, dtype)
        p = tmp_path / f"v{i}{suffix}"
        write_nifti(v, p)
        back = read_nifti(p)
        assert back == v
        assert back.data.tobytes() == v.data.tobytes()


@settings(max_examples=25, deadline=None)
@given(st.sampled_from(SUPPORTED_DTYPES), st.tuples(*[st.integers(1, 12)] * 3), st.integers(0, 2**31))
def test_roundtrip_property(tmp_path_factory, dtype, dims, seed):
    v = random_volume(np.random.default_rng(seed), dtype, dims)
    p = tmp_path_factory.mktemp("rt") / "v.nii"
    write_nifti(v, p)
    assert read_nifti(p) == v


def test_single_voxel_file_size(tmp_path):
    p = tmp_path / "one.nii"
    write_nifti(Volume(np.full((1, 1, 1), 7.0)), p)
    raw = p.read_bytes()
    assert len(raw) == 352 + 4
    assert struct.unpack("<f", raw[352:356])[0] == 7.0


def test_hand_packed_header_dims(tmp_path):
    vals = np.arange(64, dtype="<f4")
    p = tmp_path / "h.nii"
    p.write_bytes(_header([3, 4, 4, 4, 1, 1, 1, 1]) + vals.tobytes())
    with pytest.warns(UserWarning):
        v = read_nifti(p)
    assert v.dims == (4, 4, 4)
    # x fastest on disk
    assert v.data[1, 0, 0] == 1.0 and v.data[0, 1, 0] == 4.0 and v.data[0, 0, 1] == 16.0


def test_big_endian_header(tmp_path):
    vals = np.arange(8, dtype=">f4")
    p = tmp_path / "be.nii"
    p.write_bytes(_header([3, 2, 2, 2, 1, 1, 1, 1], endian=">", sform=True) + vals.tobytes())
    v = read_nifti(p)
    assert v.dims == (2, 2, 2)
    assert v.data[1, 1, 1] == 7.0
    assert np.allclose(v.affine[:3], [[2, 0, 0, 10], [0, 3, 0, 20], [0, 0, 4, 30]])


def test_gzip_transparent(tmp_path):
    v = random_volume(np.random.default_rng(1), "float32", (5, 6, 7))
    plain = tmp_path / "a.nii"
    write_nifti(v, plain)
    gz = tmp_path / "copy.nii.gz"
    gz.write_bytes(gzip.compress(plain.read_bytes()))
    assert read_nifti(gz) == read_nifti(plain)


def test_gzip_output_deterministic(tmp_path):
    v = random_volume(np.random.default_rng(2), "int16", (4, 4, 4))
    write_nifti(v, tmp_path / "a.nii.gz")
    write_nifti(v, tmp_path / "b.nii.gz")
    assert (tmp_path / "a.nii.gz").read_bytes() == (tmp_path / "b.nii.gz").read_bytes()


def test_scaling_applied(tmp_path):
    raw = bytearray(_header([3, 2, 1, 1, 1, 1, 1, 1], datatype=4, bitpix=16, sform=True))
    struct.pack_into("<ff", raw, 112, 0.5, 10.0)
    p = tmp_path / "s.nii"
    p.write_bytes(bytes(raw) + np.array([2, 4], dtype="<i2").tobytes())
    assert read_nifti(p).data.ravel().tolist() == [11.0, 12.0]


def test_qform_used_without_sform(tmp_path):
    v = Volume(np.zeros((3, 3, 3)), (1.0, 2.0, 3.0), np.diag([-1.0, 2.0, 3.0, 1.0]))
    blob = bytearray(encode_nifti(v))
    struct.pack_into("<h", blob, 254, 0)  # drop sform_code
    p = tmp_path / "q.nii"
    p.write_bytes(bytes(blob))
    assert np.allclose(read_nifti(p).affine, v.affine, atol=1e-6)


def test_format_errors(tmp_path):
    good = _header([3, 1, 1, 1, 1, 1, 1, 1], sform=True) + b"\x00" * 4
    bad_magic = tmp_path / "m.nii"
    bad_magic.write_bytes(good[:344] + b"xxxx" + good[348:])
    with pytest.raises(NiftiFormatError):
        read_nifti(bad_magic)
    dt = tmp_path / "d.nii"
    dt.write_bytes(_header([3, 1, 1, 1, 1, 1, 1, 1], datatype=32, bitpix=64, sform=True) + b"\x00" * 8)
    with pytest.raises(UnsupportedDtypeError):
        read_nifti(dt)
    short = tmp_path / "t.nii"
    short.write_bytes(_header([3, 4, 4, 4, 1, 1, 1, 1], sform=True) + b"\x00" * 10)
    with pytest.raises(TruncatedFileError):
        read_nifti(short)
    tiny = tmp_path / "x.nii"
    tiny.write_bytes(b"\x00" * 100)
    with pytest.raises(TruncatedFileError):
        read_nifti(tiny)
    assert issubclass(TruncatedFileError, ValidationError)


def test_invalid_volumes_rejected():
    with pytest.raises(ShapeError):
        Volume(np.zeros((2, 2)))
    with pytest.raises(ValidationError):
        Volume(np.zeros((2, 2, 2)), spacing=(1, 0, 1))
    bad = np.eye(4)
    bad[3, 0] = 1
    with pytest.raises(GeometryError):
        Volume(np.zeros((2, 2, 2)), affine=bad)
    with pytest.raises(UnsupportedDtypeError):
        Volume(np.zeros((2, 2, 2)), dtype="int32")
    with pytest.raises(ValidationError):
        Volume(np.full((1, 1, 1), 300.0), dtype="uint8")


def test_write_rejects_non_volume(tmp_path):
    with pytest.raises(ValidationError):
        write_nifti(np.zeros((2, 2, 2)), tmp_path / "x.nii")
    assert not (tmp_path / "x.nii").exists()


def test_unwritable_path(tmp_path):
    with pytest.raises(OSError):
        write_nifti(Volume(np.zeros((1, 1, 1))), tmp_path / "missing" / "x.nii")


def test_volume_is_immutable():
    v = Volume(np.zeros((2, 2, 2)))
    with pytest.raises(ValueError):
        v.data[0, 0, 0] = 1


def test_label_volume(tmp_path):
    lab = LabelVolume(np.array([[[0, 1], [2, 3]]]), label_names={1: "a", 2: "b"})
    assert lab.data.dtype == np.int64
    with pytest.raises(ValidationError):
        LabelVolume(np.zeros((1, 1, 1)), label_names={0: "bg"})
    with pytest.raises(ValidationError):
        LabelVolume(np.full((1, 1, 1), -1.0))
    write_nifti(lab, tmp_path / "l.nii.gz")
    back = read_labels(tmp_path / "l.nii.gz", {1: "a", 2: "b"})
    assert np.array_equal(back.data, lab.data) and back.label_names == lab.label_names


# -- reorientation ------------------------------------------------------------------------


def _world(v, ijk):
    # direct matrix multiply, homogeneous coordinates
    return (v.affine @ np.append(np.asarray(ijk, float), 1.0))[:3]


def test_ras_fixed_point():
    v = random_volume(np.random.default_rng(3), "float32", (4, 5, 6))
    assert reorient_to_canonical(v) is v


def test_flipped_x():
    data = np.zeros((5, 3, 2))
    data[1, 2, 1] = 9.0
    aff = np.diag([-2.0, 1.0, 1.0, 1.0])
    aff[0, 3] = 8.0
    v = Volume(data, (2, 1, 1), aff)
    r = reorient_to_canonical(v)
    assert np.array_equal(r.data, data[::-1])
    assert r.affine[0, 0] == 2.0
    before = _world(v, (1, 2, 1))
    after = _world(r, np.argwhere(r.data == 9.0)[0])
    assert np.allclose(before, after, atol=1e-6)


def test_permuted_axes_and_world_preserved():
    rng = np.random.default_rng(4)
    data = rng.normal(size=(3, 4, 5))
    # voxel axes (i, j, k) point along world (z, x, y)
    aff = np.zeros((4, 4))
    aff[2, 0], aff[0, 1], aff[1, 2], aff[3, 3] = 1.5, 1.0, 2.0, 1.0
    aff[:3, 3] = [5, -3, 7]
    v = Volume(data, (1.5, 1.0, 2.0), aff, "float64")
    r = reorient_to_canonical(v)
    assert r.dims == (4, 5, 3)
    assert sorted(r.data.ravel()) == sorted(v.data.ravel())
    assert np.allclose(np.diag(r.affine)[:3], [1.0, 2.0, 1.5])
    assert reorient_to_canonical(r) == r
    for ijk in rng.integers(0, [3, 4, 5], size=(100, 3)):
        w = _world(v, ijk)
        new_ijk = np.linalg.solve(r.affine, np.append(w, 1))[:3]
        idx = tuple(np.rint(new_ijk).astype(int))
        assert np.allclose(new_ijk, idx, atol=1e-6)
        assert r.data[idx] == v.data[tuple(ijk)]


def test_oblique_flip_idempotent():
    rng = np.random.default_rng(5)
    th = 0.3
    rot = np.array([[np.cos(th), -np.sin(th), 0], [np.sin(th), np.cos(th), 0], [0, 0, 1]])
    aff = np.eye(4)
    aff[:3, :3] = rot @ np.diag([-1.0, 1.0, -2.0])
    v = Volume(rng.normal(size=(4, 3, 2)), (1, 1, 2), aff, "float64")
    once = reorient_to_canonical(v)
    assert reorient_to_canonical(once) == once
    for ijk in np.ndindex(4, 3, 2):
        w = _world(v, ijk)
        new = np.linalg.solve(once.affine, np.append(w, 1))[:3]
        assert once.data[tuple(np.rint(new).astype(int))] == v.data[ijk]


def test_singular_affine():
    aff = np.eye(4)
    aff[0, 0] = 0
    with pytest.raises(GeometryError):
        reorient_to_canonical(Volume(np.zeros((2, 2, 2)), affine=aff))
