"""Dense kernels and seeded random streams shared by every other module.

Arrays are plain float64 numpy arrays.  The helpers here add the shape and
finiteness checks the rest of the package relies on.
"""

import zlib

import numpy as np


class NumericalError(ArithmeticError):
    """Raised when a NaN or infinity shows up where it must not."""


def as_matrix(x):
    return np.ascontiguousarray(x, dtype=np.float64)


def _reject_nan(x, where):
    if np.isnan(x).any():
        raise NumericalError(f"NaN input to {where}")


def check_finite(x, stage):
    """Raise NumericalError naming ``stage`` if ``x`` holds NaN or inf."""
    if not np.isfinite(x).all():
        raise NumericalError(f"non-finite values in {stage}")
    return x


def matmul(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim != 2 or b.ndim != 2:
        raise ValueError(f"matmul expects 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul shape mismatch: {a.shape} x {b.shape}")
    return a @ b


def sigmoid(x):
    x = np.asarray(x, dtype=np.float64)
    _reject_nan(x, "sigmoid")
    e = np.exp(-np.abs(x))
    r = 1.0 / (1.0 + e)
    return np.where(x >= 0, r, e * r)


def relu(x):
    x = np.asarray(x, dtype=np.float64)
    _reject_nan(x, "relu")
    return np.maximum(x, 0.0)


def tanh_(x):
    x = np.asarray(x, dtype=np.float64)
    _reject_nan(x, "tanh")
    return np.tanh(x)


def softmax_rows(x):
    """Softmax over the last axis, shifted by the row max for stability."""
    x = np.asarray(x, dtype=np.float64)
    _reject_nan(x, "softmax_rows")
    e = np.exp(x - x.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def make_rng(seed):
    """Seeded generator; identical seeds give identical streams."""
    return np.random.Generator(np.random.PCG64(int(seed)))


def derive_rng(seed, label):
    """Independent stream for a named subcomponent of a seeded run."""
    tag = zlib.crc32(label.encode("utf-8"))
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence([int(seed), tag])))
