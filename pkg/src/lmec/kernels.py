"""Kernel feature maps and position re-weighting factors for linear attention.

Positions are indexed from 0, so position 0 always receives weight
``cos(0) = 1``.
"""
from __future__ import annotations

import enum
import functools
import math
from dataclasses import dataclass
from typing import Union

import numpy as np

from .errors import SequenceTooLongError, ShapeError
from .numerics import Matrix, Rng, float_array


class ActivationKind(str, enum.Enum):
    RELU = "relu"
    SIGMOID = "sigmoid"
    TANH = "tanh"
    ELU = "elu"


def _sigmoid(x: Matrix) -> Matrix:
    # split by sign so exp never overflows
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def apply_activation(kind: ActivationKind, x: Matrix) -> Matrix:
    """Non-negative kernel map applied entry-wise.

    relu: max(x, 0); sigmoid: 1/(1+e^-x); tanh: 0.5*tanh(x)+0.5;
    elu: ELU(x)+1, i.e. x+1 for x >= 0 and e^x for x < 0.
    """
    kind = ActivationKind(kind)
    if kind is ActivationKind.RELU:
        return np.maximum(x, 0.0)
    if kind is ActivationKind.SIGMOID:
        return _sigmoid(x)
    if kind is ActivationKind.TANH:
        return 0.5 * np.tanh(x) + 0.5
    return np.exp(np.minimum(x, 0.0)) + np.maximum(x, 0.0)


def activation_derivative(kind: ActivationKind, x: Matrix) -> Matrix:
    """Entry-wise derivative of :func:`apply_activation`; relu uses 0 at the kink."""
    kind = ActivationKind(kind)
    if kind is ActivationKind.RELU:
        return (x > 0).astype(np.float64)
    if kind is ActivationKind.SIGMOID:
        s = _sigmoid(x)
        return s * (1.0 - s)
    if kind is ActivationKind.TANH:
        t = np.tanh(x)
        return 0.5 * (1.0 - t * t)
    return np.where(x >= 0, 1.0, np.exp(np.minimum(x, 0.0)))


def has_kink(kind: ActivationKind) -> bool:
    """Whether finite differences must avoid a neighbourhood of x = 0."""
    return ActivationKind(kind) in (ActivationKind.RELU, ActivationKind.ELU)


@dataclass(frozen=True, eq=False)
class LearnablePositionTable:
    """Per-position learnable phases ``R`` (max_len x d), used as ``cos(R)``.

    A single-column table is broadcast across all feature columns.
    """

    r: Matrix

    def __post_init__(self):
        r = float_array(self.r)
        if r.ndim != 2:
            raise ShapeError(f"position table must be 2-D, got shape {r.shape}")
        if not np.all(np.isfinite(r)):
            raise ValueError("position table contains non-finite entries")
        object.__setattr__(self, "r", r)

    @property
    def max_len(self) -> int:
        return self.r.shape[0]

    @property
    def dim(self) -> int:
        return self.r.shape[1]

    @functools.cached_property
    def cos_r(self) -> Matrix:
        """``cos(R)``, computed once; the table is never mutated in place."""
        c = np.cos(self.r)
        c.setflags(write=False)
        return c

    @classmethod
    def init(cls, max_len: int, dim: int, rng: Rng) -> "LearnablePositionTable":
        # initial weights cos(R) lie in [0, 1]
        return cls(rng.uniform(max_len, dim, 0.0, math.pi / 2))

    def columns(self, start: int, stop: int) -> "LearnablePositionTable":
        if self.dim == 1:
            return self
        return LearnablePositionTable(self.r[:, start:stop])


@dataclass(frozen=True)
class Npe:
    """No position embedding: similarity is psi(Q_i) . psi(K_j)."""

    def columns(self, start: int, stop: int) -> "Npe":
        return self


@dataclass(frozen=True)
class MRpe:
    """cosFormer multiplicative relative re-weighting cos(pi (i-j) / 2M)."""

    max_len: int

    def columns(self, start: int, stop: int) -> "MRpe":
        return self


@dataclass(frozen=True, eq=False)
class MApe:
    """Multiplicative absolute re-weighting of keys, cos(pi j / 2M) * w_ext."""

    max_len: int
    w_ext: Matrix

    def __post_init__(self):
        w = float_array(self.w_ext).reshape(1, -1)
        object.__setattr__(self, "w_ext", w)

    @classmethod
    def with_ones(cls, max_len: int, dim: int) -> "MApe":
        return cls(max_len, np.ones((1, dim)))

    def columns(self, start: int, stop: int) -> "MApe":
        return MApe(self.max_len, self.w_ext[:, start:stop])


@dataclass(frozen=True)
class LmApe:
    """Learnable multiplicative absolute re-weighting of keys, cos(R_j)."""

    table: LearnablePositionTable

    @property
    def max_len(self) -> int:
        return self.table.max_len

    def columns(self, start: int, stop: int) -> "LmApe":
        return LmApe(self.table.columns(start, stop))


@dataclass(frozen=True)
class ARpe:
    """Additive relative bias cos(pi (i-j) / 2M) on top of psi(Q_i) . psi(K_j)."""

    max_len: int

    def columns(self, start: int, stop: int) -> "ARpe":
        return self


PeStyle = Union[Npe, MRpe, MApe, LmApe, ARpe]

PE_NAMES = {"npe": Npe, "mrpe": MRpe, "mape": MApe, "lmape": LmApe, "arpe": ARpe}


def pe_name(pe: PeStyle) -> str:
    for name, cls in PE_NAMES.items():
        if isinstance(pe, cls):
            return name
    raise TypeError(f"not a position-embedding style: {pe!r}")


def check_length(n: int, max_len: int) -> None:
    if n > max_len:
        raise SequenceTooLongError(n, max_len)


@functools.lru_cache(maxsize=256)
def _phase_vectors(max_len: int, n: int) -> tuple[np.ndarray, np.ndarray]:
    ph = np.arange(n, dtype=np.float64) * (math.pi / (2 * max_len))
    c, s = np.cos(ph), np.sin(ph)
    c.setflags(write=False)
    s.setflags(write=False)
    return c, s


def cosformer_phase_vectors(max_len: int, n: int) -> tuple[np.ndarray, np.ndarray]:
    """Return ``(cos(pi i / 2M), sin(pi i / 2M))`` for i = 0..n-1 (cached, read-only)."""
    check_length(n, max_len)
    return _phase_vectors(max_len, n)


def m_ape_weights(max_len: int, n: int, w_ext: Matrix) -> Matrix:
    w = float_array(w_ext).reshape(1, -1)
    return cosformer_phase_vectors(max_len, n)[0][:, None] * w


def lm_ape_weights(table: LearnablePositionTable, n: int, d_k: int | None = None) -> Matrix:
    """``cos`` of the first ``n`` table rows; a one-column table is replicated to ``d_k`` columns.

    These weights multiply psi(K) only, never psi(Q).
    """
    check_length(n, table.max_len)
    w = table.cos_r[:n]
    if d_k is not None and w.shape[1] != d_k:
        if w.shape[1] != 1:
            raise ShapeError(f"position table has {w.shape[1]} columns, expected {d_k} or 1")
        w = np.repeat(w, d_k, axis=1)
    return w


def a_rpe_bias_terms(max_len: int, n: int) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Factors of the bias ``B[i, j] = cos(pi (i-j) / 2M)``.

    Returns ``(cos_q, cos_k, sin_q, sin_k)`` with
    ``B = outer(cos_q, cos_k) + outer(sin_q, sin_k)``, so ``B @ V`` can be
    evaluated as ``cos_q (cos_k^T V) + sin_q (sin_k^T V)``.
    """
    c, s = cosformer_phase_vectors(max_len, n)
    return c, c, s, s
