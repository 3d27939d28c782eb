import struct

import numpy as np
import pytest

from core import DimensionError
from matrix_io import (
    read_csv_matrix,
    read_csv_vector,
    read_kmm,
    read_manifest,
    write_csv_matrix,
    write_kmm,
    write_manifest,
)


def test_kmm_layout(tmp_path):
    M = np.array([[1.0, 2.0, 3.0], [4.0, 5.0, 6.5]])
    path = write_kmm(tmp_path / "m.kmm", M)
    raw = path.read_bytes()
    assert raw[:4] == b"KMM1"
    assert struct.unpack("<II", raw[4:12]) == (2, 3)
    assert struct.unpack("<6d", raw[12:]) == (1.0, 2.0, 3.0, 4.0, 5.0, 6.5)
    np.testing.assert_array_equal(read_kmm(path), M)


def test_kmm_preserves_bits(tmp_path, rng):
    M = rng.standard_normal((7, 5)) * 1e-300
    np.testing.assert_array_equal(read_kmm(write_kmm(tmp_path / "m.kmm", M)), M)


def test_kmm_rejects_corrupt_files(tmp_path):
    bad_magic = tmp_path / "bad.kmm"
    bad_magic.write_bytes(b"KMM2" + struct.pack("<II", 1, 1) + struct.pack("<d", 1.0))
    with pytest.raises(ValueError):
        read_kmm(bad_magic)

    truncated = tmp_path / "short.kmm"
    truncated.write_bytes(b"KMM1" + struct.pack("<II", 2, 2) + struct.pack("<d", 1.0))
    with pytest.raises(ValueError):
        read_kmm(truncated)


def test_csv_full_precision(tmp_path, rng):
    M = rng.standard_normal((4, 3))
    path = write_csv_matrix(tmp_path / "m.csv", M)
    np.testing.assert_array_equal(read_csv_matrix(path), M)

    v = rng.standard_normal(5)
    np.testing.assert_array_equal(read_csv_vector(write_csv_matrix(tmp_path / "v.csv", v)), v)
    with pytest.raises(DimensionError):
        read_csv_vector(path)


def test_manifest_converts_numpy_values(tmp_path):
    manifest = {
        "patch": np.array([3, 1, 2]),
        "snr_db": np.float64(6.0206),
        "count": np.int64(4),
        "nested": {"values": (np.float32(0.5), 1), "converged": np.bool_(True)},
    }
    loaded = read_manifest(write_manifest(tmp_path / "manifest.yaml", manifest))
    assert loaded == {
        "patch": [3, 1, 2], "snr_db": 6.0206, "count": 4, "nested": {"values": [0.5, 1], "converged": True},
    }
    assert type(loaded["nested"]["converged"]) is bool
    with pytest.raises(FileNotFoundError):
        read_manifest(tmp_path / "missing.yaml")
