import json
import os

import nibabel as nib
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from soupsr.errors import DataError, FormatError, UnsupportedError
from soupsr.volume_io import Volume, denormalize, load_volume, normalize, save_volume


def write_raw(tmp_path, data, spacing=(1, 1, 1), name="v"):
    path = tmp_path / f"{name}.vol"
    path.write_bytes(np.asarray(data, dtype="<f4").tobytes())
    path.with_suffix(".json").write_text(json.dumps({"dims": list(data.shape), "spacing_mm": list(spacing), "id": name}))
    return path


def test_raw_zero_volume(tmp_path):
    v = load_volume(write_raw(tmp_path, np.zeros((4, 4, 4))))
    assert v.shape == (4, 4, 4)
    assert not v.data.any()
    assert v.spacing == (1.0, 1.0, 1.0)


def test_raw_with_nan_is_data_error(tmp_path):
    data = np.zeros((4, 4, 4))
    data[1, 2, 3] = np.nan
    with pytest.raises(DataError):
        load_volume(write_raw(tmp_path, data))


def test_nifti_header_written_by_nibabel(tmp_path):
    # nibabel array axes are (i, j, k) = (x, y, z)
    xyz = np.random.default_rng(0).random((8, 8, 8)).astype(np.float32)
    img = nib.Nifti1Image(xyz, np.diag([2.0, 2.0, 1.0, 1.0]))
    img.header.set_zooms((2.0, 2.0, 1.0))
    path = tmp_path / "a.nii"
    nib.save(img, path)
    v = load_volume(path)
    assert v.shape == (8, 8, 8)
    assert v.spacing == (1.0, 2.0, 2.0)
    np.testing.assert_array_equal(v.data, xyz.transpose(2, 1, 0))


@pytest.mark.parametrize("dtype", [np.uint8, np.int16, np.int32, np.float64])
def test_nifti_accepted_datatypes(tmp_path, dtype):
    xyz = np.arange(5 * 6 * 7).reshape(5, 6, 7).astype(dtype) % 120
    path = tmp_path / "b.nii"
    nib.save(nib.Nifti1Image(xyz, np.eye(4)), path)
    v = load_volume(path)
    assert v.shape == (7, 6, 5)
    np.testing.assert_array_equal(v.data, xyz.transpose(2, 1, 0).astype(np.float32))


def test_nifti_unsupported_datatype(tmp_path):
    path = tmp_path / "c.nii"
    nib.save(nib.Nifti1Image(np.zeros((4, 4, 4), dtype=np.complex64), np.eye(4)), path)
    with pytest.raises(UnsupportedError):
        load_volume(path)


def test_nifti_bad_magic(tmp_path):
    path = tmp_path / "d.nii"
    save_volume(Volume(np.ones((4, 4, 4))), path)
    raw = bytearray(path.read_bytes())
    raw[344:348] = b"ni1\x00"
    path.write_bytes(bytes(raw))
    with pytest.raises(FormatError):
        load_volume(path)


def test_nifti_written_here_reads_in_nibabel(tmp_path):
    data = np.random.default_rng(1).random((6, 7, 8)).astype(np.float32)
    path = tmp_path / "e.nii"
    save_volume(Volume(data, (3.0, 0.5, 0.75)), path)
    img = nib.load(path)
    assert img.shape == (8, 7, 6)
    np.testing.assert_allclose(img.header.get_zooms(), (0.75, 0.5, 3.0))
    np.testing.assert_array_equal(np.asarray(img.dataobj).transpose(2, 1, 0), data)


@pytest.mark.parametrize("fmt,suffix", [("raw", ".vol"), ("nifti1", ".nii"), ("nifti1", ".nii.gz")])
def test_round_trip(tmp_path, fmt, suffix):
    data = np.random.default_rng(2).normal(size=(8, 8, 8)).astype(np.float32)
    v = Volume(data, (1.25, 0.9, 0.9), id="rt")
    path = tmp_path / f"rt{suffix}"
    save_volume(v, path, fmt)
    back = load_volume(path, fmt)
    assert back.data.tobytes() == v.data.tobytes()
    np.testing.assert_allclose(back.spacing, v.spacing, rtol=1e-6)


def test_raw_payload_bytes_identical(tmp_path):
    data = np.random.default_rng(3).random((8, 8, 8)).astype(np.float32)
    save_volume(Volume(data), tmp_path / "p.vol")
    save_volume(load_volume(tmp_path / "p.vol"), tmp_path / "q.vol")
    assert (tmp_path / "p.vol").read_bytes() == (tmp_path / "q.vol").read_bytes()


def test_save_read_only_location(tmp_path):
    ro = tmp_path / "ro"
    ro.mkdir()
    ro.chmod(0o500)
    # root ignores permission bits; /proc refuses new files for everyone
    target = ro / "x.vol" if os.geteuid() != 0 else "/proc/soupsr-x.vol"
    with pytest.raises(OSError):
        save_volume(Volume(np.zeros((4, 4, 4))), target)


def test_save_missing_directory_is_io_error(tmp_path):
    with pytest.raises(OSError):
        save_volume(Volume(np.zeros((4, 4, 4))), tmp_path / "nope" / "x.nii")


def test_normalize_examples():
    np.testing.assert_array_equal(normalize(Volume(np.array([0.0, 100.0] * 4).reshape(2, 2, 2))).data.ravel(), [0, 1] * 4)
    const = normalize(Volume(np.full((3, 3, 3), 7.0)))
    assert not const.data.any()
    assert const.intensity_range == (7.0, 8.0)
    ramp = normalize(Volume(np.array([-1.0, 0.0, 1.0]).reshape(3, 1, 1)))
    np.testing.assert_array_equal(ramp.data.ravel(), [0.0, 0.5, 1.0])


def test_volume_rejects_bad_spacing():
    with pytest.raises(DataError):
        Volume(np.zeros((2, 2, 2)), (1.0, 0.0, 1.0))


arrays = st.integers(0, 2**32 - 1).map(lambda seed: np.random.default_rng(seed).normal(size=(3, 4, 5)) * 50 + 10)


@settings(max_examples=40, deadline=None)
@given(arrays)
def test_denormalize_inverts_normalize(data):
    v = Volume(data)
    n = normalize(v)
    assert n.data.min() >= 0 and n.data.max() <= 1
    back = denormalize(n).data
    span = v.intensity_range[1] - v.intensity_range[0]
    np.testing.assert_allclose(back, v.data, rtol=1e-6, atol=1e-6 * span)


@settings(max_examples=40, deadline=None)
@given(arrays, st.floats(0, 5))
def test_normalize_monotone(data, bump):
    a = Volume(data)
    b = Volume(data + bump)
    lo, hi = min(a.data.min(), b.data.min()), max(a.data.max(), b.data.max())
    # same (lo, hi) for both: append the joint extremes as an extra slab
    pad = np.full((1, 4, 5), lo)
    pad[0, 0, 0] = hi
    na = normalize(Volume(np.concatenate([a.data, pad]))).data[:-1]
    nb = normalize(Volume(np.concatenate([b.data, pad]))).data[:-1]
    assert np.all(na <= nb)
