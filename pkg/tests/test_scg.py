import json
import struct

import numpy as np
import pytest

from syncast import scg
from syncast.errors import (
    ChecksumError,
    HeaderError,
    InvalidValueError,
    MagicMismatchError,
    TruncatedPayloadError,
)
from syncast.grid import GridSpec
from conftest import random_state


@pytest.fixture
def seq(grid8):
    return [random_state(grid8, seed=k, timestamp=k) for k in range(3)]


def test_round_trip_bit_exact(tmp_path, seq):
    path = tmp_path / "a.scg"
    scg.write_grid_file(seq, path)
    states = scg.read_grid_file(path).to_states()
    assert len(states) == 3
    for a, b in zip(seq, states):
        assert np.array_equal(a.upper, b.upper)
        assert np.array_equal(a.surface, b.surface)
        assert a.timestamp == b.timestamp


def test_write_is_deterministic(tmp_path, seq):
    p1, p2 = tmp_path / "a.scg", tmp_path / "b.scg"
    scg.write_grid_file(seq, p1)
    scg.write_grid_file(seq, p2)
    assert p1.read_bytes() == p2.read_bytes()


def test_header_contents(tmp_path, seq, grid8):
    path = tmp_path / "a.scg"
    scg.write_grid_file(seq, path)
    h = scg.read_grid_file(path).header
    for key in scg.REQUIRED_KEYS:
        assert key in h
    assert h["dtype"] == "f32le"
    assert h["n_steps"] == 3
    assert h["n_lat"] == grid8.n_lat and h["n_lon"] == grid8.n_lon


def test_grid_reconstruction(tmp_path, seq, grid8):
    path = tmp_path / "a.scg"
    scg.write_grid_file(seq, path)
    g = scg.read_grid_file(path).grid
    assert np.allclose(g.lat_deg, grid8.lat_deg)
    assert g.resolution_deg == grid8.resolution_deg


def test_bad_magic(tmp_path, seq):
    path = tmp_path / "a.scg"
    scg.write_grid_file(seq, path)
    blob = bytearray(path.read_bytes())
    blob[:4] = b"NOPE"
    path.write_bytes(bytes(blob))
    with pytest.raises(MagicMismatchError):
        scg.read_grid_file(path)


def test_truncated_payload(tmp_path, seq):
    path = tmp_path / "a.scg"
    scg.write_grid_file(seq, path)
    blob = path.read_bytes()
    path.write_bytes(blob[:-100])
    with pytest.raises(TruncatedPayloadError):
        scg.read_grid_file(path)


def test_header_not_json(tmp_path, seq):
    path = tmp_path / "a.scg"
    scg.write_grid_file(seq, path)
    blob = bytearray(path.read_bytes())
    (hdr_len,) = struct.unpack("<I", blob[4:8])
    blob[8:8 + 4] = b"\xff\xfe\xfd\xfc"
    path.write_bytes(bytes(blob))
    with pytest.raises(HeaderError):
        scg.read_grid_file(path)


def test_missing_header_key(tmp_path, seq):
    path = tmp_path / "a.scg"
    scg.write_grid_file(seq, path)
    blob = path.read_bytes()
    (hdr_len,) = struct.unpack("<I", blob[4:8])
    header = json.loads(blob[8:8 + hdr_len])
    del header["z_levels"]
    hdr = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    path.write_bytes(blob[:4] + struct.pack("<I", len(hdr)) + hdr
                     + blob[8 + hdr_len:])
    with pytest.raises(HeaderError):
        scg.read_grid_file(path)


def test_crc_mismatch(tmp_path, seq):
    path = tmp_path / "a.scg"
    scg.write_grid_file(seq, path)
    blob = bytearray(path.read_bytes())
    blob[-50] ^= 0xFF  # corrupt one payload byte
    path.write_bytes(bytes(blob))
    with pytest.raises(ChecksumError):
        scg.read_grid_file(path)


def test_nonfinite_write_refused(tmp_path, seq):
    seq[0].surface[0, 0, 0] = np.inf
    with pytest.raises(InvalidValueError):
        scg.write_grid_file(seq, tmp_path / "a.scg")


def test_surface_file_round_trip(tmp_path, grid8):
    rng = np.random.default_rng(1)
    fields = rng.normal(size=(4, 8, 8, 2)).astype(np.float32)
    path = tmp_path / "s.scg"
    scg.write_surface_file(fields, ["a", "b"], grid8, path,
                           timestamps=[0, 1, 2, 3],
                           extra_header={"custom": 7})
    raw = scg.read_grid_file(path)
    assert np.array_equal(raw.surface, fields)
    assert raw.upper.size == 0
    assert raw.header["custom"] == 7
    assert raw.header["surface_vars"] == ["a", "b"]


def test_surface_file_wrong_var_count(tmp_path, grid8):
    with pytest.raises(InvalidValueError):
        scg.write_surface_file(np.zeros((1, 8, 8, 3), dtype=np.float32),
                               ["a", "b"], grid8, tmp_path / "s.scg")
