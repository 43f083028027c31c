import struct

import numpy as np
import pytest

from attloc import checkpoint
from attloc.checkpoint import CheckpointError, dumps, loads
from attloc.features import NormStats
from attloc.model import Mode, init_params
from attloc.numerics import make_rng


@pytest.fixture
def blob_parts():
    params = init_params(make_rng(7))
    norm = NormStats(mean=make_rng(1).standard_normal(40), std=1 + make_rng(2).random(40))
    return params, norm


@pytest.mark.parametrize("mode", list(Mode))
def test_round_trip_is_bit_exact(blob_parts, mode, tmp_path):
    params, norm = blob_parts
    path = tmp_path / "m.ckpt"
    checkpoint.save(path, params, norm, mode)
    p2, n2, m2 = checkpoint.load(path)
    assert m2 is mode
    assert n2.mean.tobytes() == norm.mean.tobytes() and n2.std.tobytes() == norm.std.tobytes()
    assert list(p2) == list(params)
    for k in params:
        assert p2[k].shape == params[k].shape
        assert p2[k].tobytes() == params[k].tobytes()
    assert dumps(p2, n2, m2) == path.read_bytes()


def test_header_layout(blob_parts):
    blob = dumps(*blob_parts, Mode.ATT_LOC)
    assert blob[:4] == b"ATLC"
    assert struct.unpack("<IB", blob[4:9]) == (1, 1)


def test_bad_magic(blob_parts):
    blob = dumps(*blob_parts, Mode.ATT_LOC)
    with pytest.raises(CheckpointError, match="magic"):
        loads(b"XXXX" + blob[4:])


def test_version_mismatch_rejected(blob_parts):
    blob = bytearray(dumps(*blob_parts, Mode.ATT_LOC))
    blob[4:8] = struct.pack("<I", 2)
    with pytest.raises(CheckpointError, match="version 2"):
        loads(bytes(blob))


def test_truncated_and_trailing(blob_parts):
    blob = dumps(*blob_parts, Mode.ATT_LOC)
    with pytest.raises(CheckpointError, match="truncated"):
        loads(blob[:-3])
    with pytest.raises(CheckpointError, match="trailing"):
        loads(blob + b"\0")


def test_non_finite_payload_rejected(blob_parts):
    params, norm = blob_parts
    blob = bytearray(dumps(params, norm, Mode.ATT_LOC))
    blob[-8:] = struct.pack("<d", float("nan"))
    with pytest.raises(CheckpointError):
        loads(bytes(blob))


def test_missing_tensor_refused_on_save(blob_parts):
    params, norm = blob_parts
    del params["loc_b"]
    with pytest.raises(ValueError):
        dumps(params, norm, Mode.ATT_LOC)
