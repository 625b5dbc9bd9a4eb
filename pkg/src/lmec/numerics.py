"""Dense float64 matrix helpers and a seeded counter-based generator.

Matrices are plain 2-D ``numpy.ndarray`` objects of dtype float64. The helpers
here only add the shape checks and error reporting the attention code relies
on; nothing mutates its inputs.
"""
from __future__ import annotations

from typing import Literal

import numpy as np

from .errors import NonFiniteError, ShapeError

Matrix = np.ndarray


def as_matrix(a, name: str = "matrix") -> Matrix:
    """Coerce ``a`` to a finite 2-D float64 array (a copy only when needed)."""
    m = np.asarray(a, dtype=np.float64)
    if m.ndim == 1:
        m = m[None, :]
    if m.ndim != 2:
        raise ShapeError(f"{name}: expected a 2-D matrix, got shape {m.shape}")
    if not np.all(np.isfinite(m)):
        raise NonFiniteError(f"{name}: contains NaN or Inf")
    return m


def float_array(a) -> np.ndarray:
    """``a`` as an array, keeping any floating dtype (float64 or wider) and casting the rest to float64."""
    arr = np.asarray(a)
    return arr if arr.dtype.kind == "f" and arr.dtype.itemsize >= 8 else arr.astype(np.float64)


def matmul(a: Matrix, b: Matrix) -> Matrix:
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul expects 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(
            f"matmul shape mismatch: ({a.shape[0]}x{a.shape[1]}) @ ({b.shape[0]}x{b.shape[1]})"
        )
    return a @ b


def softmax_rows(a: Matrix) -> Matrix:
    shifted = a - a.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def elementwise(a: Matrix, b: Matrix, op: Literal["add", "mul"]) -> Matrix:
    if a.shape != b.shape:
        raise ShapeError(f"elementwise {op}: shapes {a.shape} and {b.shape} differ")
    if op == "add":
        return a + b
    if op == "mul":
        return a * b
    raise ValueError(f"unknown elementwise op {op!r}")


def broadcast_row_mul(a: Matrix, v) -> Matrix:
    """Multiply every row of ``a`` entry-wise by the row vector ``v``."""
    row = float_array(v).reshape(-1)
    if a.ndim != 2 or row.shape[0] != a.shape[1]:
        raise ShapeError(f"broadcast_row_mul: vector of length {row.shape[0]} vs matrix {a.shape}")
    return a * row[None, :]


def max_rel_error(actual: Matrix, reference: Matrix) -> float:
    """``max|actual - reference| / max|reference|`` (absolute when the reference is all zero)."""
    diff = float(np.max(np.abs(actual - reference), initial=0.0))
    scale = float(np.max(np.abs(reference), initial=0.0))
    return diff / scale if scale > 0.0 else diff


class Rng:
    """Deterministic generator on top of numpy's Philox counter-based bit generator.

    Equal seeds give bit-identical draws. ``child(*keys)`` derives an
    independent stream from the seed and integer keys, so callers never share
    generator state.
    """

    def __init__(self, seed: int, *keys: int):
        if not 0 <= seed < 2**64:
            raise ValueError("seed must be an unsigned 64-bit integer")
        self.seed = seed
        self.keys = tuple(keys)
        ss = np.random.SeedSequence([seed, *keys])
        self._gen = np.random.Generator(np.random.Philox(ss))

    def child(self, *keys: int) -> "Rng":
        return Rng(self.seed, *self.keys, *keys)

    def normal(self, rows: int, cols: int, scale: float = 1.0) -> Matrix:
        return self._gen.standard_normal((rows, cols)) * scale

    def uniform(self, rows: int, cols: int, low: float = 0.0, high: float = 1.0) -> Matrix:
        return self._gen.uniform(low, high, size=(rows, cols))

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)
