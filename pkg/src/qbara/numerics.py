"""Dense float64 matrices and seeded random numbers.

A matrix is a 2-D ``numpy.ndarray`` of dtype float64 in C (row-major) order.
Feature vectors are 1 x D matrices; batches stack along rows.

Random numbers come from numpy's PCG64 bit generator seeded through
``SeedSequence``. PCG64 is a documented 64-bit generator whose stream for a
given seed is stable across platforms and numpy releases, and
``SeedSequence.spawn`` gives independent child streams.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DataError, ParameterError, ShapeError

Matrix = np.ndarray


def as_matrix(values, name: str = "matrix") -> Matrix:
    """Coerce ``values`` to a finite float64 row-major 2-D array."""
    m = np.ascontiguousarray(values, dtype=np.float64)
    if m.ndim != 2:
        raise ShapeError(f"{name} must be 2-D, got shape {m.shape}")
    if m.shape[0] < 1 or m.shape[1] < 1:
        raise ShapeError(f"{name} must have positive dimensions, got {m.shape}")
    if not np.isfinite(m).all():
        raise DataError(f"{name} contains non-finite values")
    return m


def check_finite(m: Matrix, name: str = "result") -> Matrix:
    if not np.isfinite(m).all():
        raise DataError(f"{name} contains non-finite values")
    return m


def matmul(a: Matrix, b: Matrix) -> Matrix:
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"cannot multiply {a.shape} by {b.shape}")
    return check_finite(a @ b)


def repeat_cols(m: Matrix, group: int) -> Matrix:
    """Repeat every column ``group`` times contiguously (repeat_interleave)."""
    if group < 1:
        raise ParameterError(f"group must be positive, got {group}")
    return np.repeat(m, group, axis=1)


def repeat_rows(m: Matrix, group: int) -> Matrix:
    if group < 1:
        raise ParameterError(f"group must be positive, got {group}")
    return np.repeat(m, group, axis=0)


def segment_sum_cols(m: Matrix, group: int) -> Matrix:
    """Sum each run of ``group`` adjacent columns; adjoint of :func:`repeat_cols`."""
    if group < 1:
        raise ParameterError(f"group must be positive, got {group}")
    rows, cols = m.shape
    if cols % group:
        raise ShapeError(f"{cols} columns are not divisible by group {group}")
    return m.reshape(rows, cols // group, group).sum(axis=2)


@dataclass(frozen=True)
class Uniform:
    lo: float = -1.0
    hi: float = 1.0


@dataclass(frozen=True)
class Normal:
    mean: float = 0.0
    std: float = 1.0


@dataclass(frozen=True)
class Zeros:
    pass


Distribution = Uniform | Normal | Zeros


def make_rng(seed: int | np.random.SeedSequence) -> np.random.Generator:
    if isinstance(seed, np.random.SeedSequence):
        return np.random.Generator(np.random.PCG64(seed))
    if seed < 0:
        raise ParameterError(f"seed must be non-negative, got {seed}")
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed)))


def split_rng(seed: int, n: int) -> list[np.random.Generator]:
    """``n`` independent generators derived from one seed."""
    return [make_rng(child) for child in np.random.SeedSequence(seed).spawn(n)]


def rng_fill(rng: np.random.Generator, rows: int, cols: int, dist: Distribution) -> Matrix:
    if rows < 1 or cols < 1:
        raise ShapeError(f"dimensions must be positive, got {rows}x{cols}")
    if isinstance(dist, Zeros):
        return np.zeros((rows, cols))
    if isinstance(dist, Uniform):
        if not (np.isfinite(dist.lo) and np.isfinite(dist.hi)) or dist.hi <= dist.lo:
            raise ParameterError(f"uniform needs finite lo < hi, got ({dist.lo}, {dist.hi})")
        return rng.uniform(dist.lo, dist.hi, size=(rows, cols))
    if isinstance(dist, Normal):
        if not (np.isfinite(dist.mean) and np.isfinite(dist.std)) or dist.std < 0:
            raise ParameterError(f"normal needs finite mean and std >= 0, got ({dist.mean}, {dist.std})")
        return rng.normal(dist.mean, dist.std, size=(rows, cols))
    raise ParameterError(f"unknown distribution {dist!r}")
