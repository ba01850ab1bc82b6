"""Artifact serialization: calibration dumps, projection files, manifests, snapshots."""

from __future__ import annotations

import numpy as np
import pytest

from esa.compression import CalibrationSet, random_projections
from esa.errors import FormatError
from esa.formats import (
    config_hash,
    read_calibration,
    read_manifest,
    read_projection,
    read_snapshot,
    write_calibration,
    write_manifest,
    write_projection,
    write_snapshot,
)


@pytest.fixture
def calib():
    rng = np.random.default_rng(0)
    return CalibrationSet(
        layer_index=3,
        queries=rng.normal(size=(10, 6)).astype(np.float32),
        keys=rng.normal(size=(10, 6)).astype(np.float32),
    )


class TestCalibrationFile:
    def test_round_trip(self, tmp_path, calib):
        p = tmp_path / "calib.bin"
        write_calibration(p, calib)
        got = read_calibration(p)
        assert got.layer_index == 3
        assert np.array_equal(got.queries, calib.queries)
        assert np.array_equal(got.keys, calib.keys)

    def test_rewrite_is_byte_identical(self, tmp_path, calib):
        a, b = tmp_path / "a.bin", tmp_path / "b.bin"
        write_calibration(a, calib)
        write_calibration(b, calib)
        assert a.read_bytes() == b.read_bytes()

    def test_bad_magic_names_path(self, tmp_path):
        p = tmp_path / "junk.bin"
        p.write_bytes(b"NOTMAGIC" + b"\x00" * 40)
        with pytest.raises(FormatError, match="junk.bin"):
            read_calibration(p)

    def test_truncated_payload(self, tmp_path, calib):
        p = tmp_path / "calib.bin"
        write_calibration(p, calib)
        p.write_bytes(p.read_bytes()[:-17])
        with pytest.raises(FormatError, match="truncated"):
            read_calibration(p)

    def test_trailing_bytes(self, tmp_path, calib):
        p = tmp_path / "calib.bin"
        write_calibration(p, calib)
        p.write_bytes(p.read_bytes() + b"x")
        with pytest.raises(FormatError, match="trailing"):
            read_calibration(p)


class TestProjectionFile:
    def test_round_trip(self, tmp_path):
        pair = random_projections(16, 4, seed=1, layer_index=2)
        p = tmp_path / "proj.bin"
        write_projection(p, pair)
        got = read_projection(p)
        assert (got.layer_index, got.d_prime, got.d_h) == (2, 4, 16)
        for a, b in [(got.w_q, pair.w_q), (got.b_q, pair.b_q), (got.w_k, pair.w_k), (got.b_k, pair.b_k)]:
            assert np.array_equal(a, b)

    def test_wrong_magic_rejected(self, tmp_path):
        pair = random_projections(8, 2)
        cal = tmp_path / "x.bin"
        # A calibration file is not a projection file.
        write_calibration(
            cal,
            CalibrationSet(0, np.zeros((2, 8), np.float32), np.zeros((2, 8), np.float32)),
        )
        with pytest.raises(FormatError, match="magic"):
            read_projection(cal)
        proj = tmp_path / "p.bin"
        write_projection(proj, pair)
        with pytest.raises(FormatError, match="magic"):
            read_calibration(proj)

    def test_implausible_dims_rejected(self, tmp_path):
        import struct

        p = tmp_path / "p.bin"
        p.write_bytes(b"ESAPROJ1" + struct.pack("<III", 9, 4, 0) + b"\x00" * 16)
        with pytest.raises(FormatError, match="implausible"):
            read_projection(p)


class TestConfigHash:
    def test_stable_and_order_insensitive(self):
        a = config_hash({"k": 64, "epsilon": 3})
        b = config_hash({"epsilon": 3, "k": 64})
        assert a == b
        assert len(a) == 12
        assert int(a, 16) >= 0

    def test_sensitive_to_values(self):
        assert config_hash({"k": 64}) != config_hash({"k": 65})


class TestManifest:
    def test_round_trip(self, tmp_path):
        p = tmp_path / "manifest.json"
        write_manifest(
            p,
            seeds={"corpus": 0},
            config={"d_prime": 16},
            artifacts={"calib": "calib_layer0.bin"},
        )
        doc = read_manifest(p)
        assert doc["seeds"] == {"corpus": 0}
        assert doc["config_hash"] == config_hash({"d_prime": 16})
        assert doc["artifacts"]["calib"] == "calib_layer0.bin"

    def test_invalid_json(self, tmp_path):
        p = tmp_path / "manifest.json"
        p.write_text("{nope")
        with pytest.raises(FormatError, match="JSON"):
            read_manifest(p)

    def test_wrong_format_tag(self, tmp_path):
        p = tmp_path / "manifest.json"
        p.write_text('{"format": "something-else"}')
        with pytest.raises(FormatError, match="format"):
            read_manifest(p)


class TestSnapshot:
    def test_round_trip(self, tmp_path):
        rng = np.random.default_rng(2)
        arrays = {
            "initial": rng.normal(size=(4, 6)).astype(np.float32),
            "middle": rng.normal(size=(0, 6)).astype(np.float32),
            "ring": rng.normal(size=(3, 6)).astype(np.float32),
        }
        p = tmp_path / "cache.snap"
        write_snapshot(p, {"layer": 1, "l_l": 3}, arrays)
        header, got = read_snapshot(p)
        assert header == {"layer": 1, "l_l": 3}
        assert set(got) == set(arrays)
        for name in arrays:
            assert np.array_equal(got[name], arrays[name])

    def test_bad_header_line(self, tmp_path):
        p = tmp_path / "cache.snap"
        p.write_bytes(b"not json\n" + b"\x00" * 8)
        with pytest.raises(FormatError, match="header"):
            read_snapshot(p)

    def test_wrong_magic(self, tmp_path):
        p = tmp_path / "cache.snap"
        p.write_bytes(b'{"magic": "other", "arrays": []}\n')
        with pytest.raises(FormatError, match="magic"):
            read_snapshot(p)

    def test_truncated_array(self, tmp_path):
        p = tmp_path / "cache.snap"
        write_snapshot(p, {}, {"a": np.ones((5, 5), np.float32)})
        p.write_bytes(p.read_bytes()[:-4])
        with pytest.raises(FormatError, match="truncated"):
            read_snapshot(p)
