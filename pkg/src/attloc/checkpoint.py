"""Binary checkpoint: named float64 tensors plus normalization stats and mode.

Layout (little-endian):

    b"ATLC" | u32 version | u8 mode | u32 n_mels | f64[n_mels] mean | f64[n_mels] std
    | u32 n_tensors | per tensor: u32 name_len, utf-8 name, u32 rank, u32[rank] dims,
      f64[prod(dims)] payload
"""

import struct

import numpy as np

from .features import NormStats
from .model import Mode, param_shapes, validate_params
from .numerics import NumericalError

MAGIC = b"ATLC"
VERSION = 1
_MODES = [Mode.BASELINE_CGRNN, Mode.ATT_LOC]


class CheckpointError(Exception):
    pass


def dumps(params, norm, mode):
    validate_params(params)
    out = [MAGIC, struct.pack("<IB", VERSION, _MODES.index(mode))]
    mean = np.ascontiguousarray(norm.mean, dtype="<f8")
    std = np.ascontiguousarray(norm.std, dtype="<f8")
    out.append(struct.pack("<I", len(mean)))
    out += [mean.tobytes(), std.tobytes()]
    names = list(param_shapes())
    out.append(struct.pack("<I", len(names)))
    for name in names:
        arr = np.ascontiguousarray(params[name], dtype="<f8")
        raw = name.encode("utf-8")
        out.append(struct.pack("<I", len(raw)) + raw)
        out.append(struct.pack(f"<I{arr.ndim}I", arr.ndim, *arr.shape))
        out.append(arr.tobytes())
    return b"".join(out)


class _Reader:
    def __init__(self, blob):
        self.blob = blob
        self.pos = 0

    def take(self, n):
        if self.pos + n > len(self.blob):
            raise CheckpointError("checkpoint is truncated")
        piece = self.blob[self.pos:self.pos + n]
        self.pos += n
        return piece

    def unpack(self, fmt):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def floats(self, n):
        return np.frombuffer(self.take(8 * n), dtype="<f8").astype(np.float64)


def loads(blob):
    """Inverse of ``dumps``: returns (params, norm, mode)."""
    r = _Reader(blob)
    if r.take(4) != MAGIC:
        raise CheckpointError("not a checkpoint (bad magic)")
    version, mode_id = r.unpack("<IB")
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}, expected {VERSION}")
    if mode_id >= len(_MODES):
        raise CheckpointError(f"unknown mode id {mode_id}")
    (n_mels,) = r.unpack("<I")
    norm = NormStats(mean=r.floats(n_mels), std=r.floats(n_mels))
    (n_tensors,) = r.unpack("<I")
    params = {}
    for _ in range(n_tensors):
        (name_len,) = r.unpack("<I")
        name = r.take(name_len).decode("utf-8")
        (rank,) = r.unpack("<I")
        dims = r.unpack(f"<{rank}I")
        params[name] = r.floats(int(np.prod(dims))).reshape(dims)
    if r.pos != len(blob):
        raise CheckpointError(f"{len(blob) - r.pos} trailing bytes after the tensor table")
    try:
        validate_params(params)
    except (ValueError, NumericalError) as exc:
        raise CheckpointError(str(exc)) from None
    return params, norm, _MODES[mode_id]


def save(path, params, norm, mode):
    with open(path, "wb") as f:
        f.write(dumps(params, norm, mode))


def load(path):
    with open(path, "rb") as f:
        return loads(f.read())
