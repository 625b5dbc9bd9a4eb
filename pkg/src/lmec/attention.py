"""Softmax and kernelized linear attention in left and right product order.

Every linear variant is reduced to a list of factor pairs ``(A_t, B_t)`` whose
similarity matrix is ``S = sum_t A_t B_t^T``:

    npe    [(psi(Q), psi(K))]
    mape   [(psi(Q), psi(K) * cos(pi j / 2M) w_ext)]
    lmape  [(psi(Q), psi(K) * cos(R_j))]
    mrpe   [(psi(Q) cos_i, psi(K) cos_j), (psi(Q) sin_i, psi(K) sin_j)]
    arpe   [(psi(Q), psi(K)), (cos_i, cos_j), (sin_i, sin_j)]

The left order forms ``A_t B_t^T`` (N x N) and multiplies by V; the right
order forms ``B_t^T V`` (d x d_v) first. Flop estimates count 2mkn per
product plus one flop per element for sums, row/column reductions and the
normalizing division.
"""
from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .errors import DegenerateKernelError, ShapeError
from .kernels import (
    ActivationKind,
    ARpe,
    LmApe,
    MApe,
    MRpe,
    Npe,
    PeStyle,
    a_rpe_bias_terms,
    apply_activation,
    check_length,
    cosformer_phase_vectors,
    lm_ape_weights,
    m_ape_weights,
)
from .numerics import Matrix, Rng, matmul, softmax_rows


class ProductOrder(str, enum.Enum):
    LEFT = "left"
    RIGHT = "right"
    DYNAMIC = "dynamic"


@dataclass(frozen=True)
class LinearAttentionSpec:
    """Configuration of one linear-attention layer.

    ``pe`` is sized for the full model dimension ``d_k * heads``; each head
    uses its own column slice of any learnable PE tensor.
    """

    activation: ActivationKind = ActivationKind.ELU
    pe: PeStyle = field(default_factory=Npe)
    product_order: ProductOrder = ProductOrder.DYNAMIC
    normalize: bool = True
    d_k: int = 64
    heads: int = 1

    def __post_init__(self):
        object.__setattr__(self, "activation", ActivationKind(self.activation))
        object.__setattr__(self, "product_order", ProductOrder(self.product_order))
        if self.d_k < 1 or self.heads < 1:
            raise ValueError("d_k and heads must be positive")

    @property
    def model_dim(self) -> int:
        return self.d_k * self.heads

    def for_head(self, h: int) -> "LinearAttentionSpec":
        start = h * self.d_k
        return LinearAttentionSpec(
            self.activation, self.pe.columns(start, start + self.d_k),
            self.product_order, self.normalize, self.d_k, 1,
        )

    def resolve_order(self, n: int) -> ProductOrder:
        if self.product_order is ProductOrder.DYNAMIC:
            return dynamic_dispatch(self, n)
        return self.product_order


@dataclass
class AttentionOutput:
    values: Matrix
    resolved_order: ProductOrder
    flop_estimate: int


def dynamic_dispatch(spec: LinearAttentionSpec, n: int) -> ProductOrder:
    """Left product while ``n <= d_k`` (per head), right product beyond."""
    return ProductOrder.LEFT if n <= spec.d_k else ProductOrder.RIGHT


def softmax_attention(q: Matrix, k: Matrix, v: Matrix, d_k: int | None = None) -> Matrix:
    if q.shape[1] != k.shape[1]:
        raise ShapeError(f"query width {q.shape[1]} != key width {k.shape[1]}")
    if k.shape[0] != v.shape[0]:
        raise ShapeError(f"{k.shape[0]} keys but {v.shape[0]} values")
    scale = 1.0 / math.sqrt(d_k if d_k is not None else q.shape[1])
    return matmul(softmax_rows(matmul(q, k.T) * scale), v)


# -- generic factored evaluation ------------------------------------------------

Terms = Sequence[tuple[Matrix, Matrix]]


def _check_terms(terms: Terms, v: Matrix) -> int:
    n = v.shape[0]
    for a, b in terms:
        if a.shape[0] != n or b.shape[0] != n:
            raise ShapeError(f"factor rows {a.shape[0]}/{b.shape[0]} do not match {n} values")
        if a.shape[1] != b.shape[1]:
            raise ShapeError(f"query factor width {a.shape[1]} != key factor width {b.shape[1]}")
    return n


def _normalize(num: Matrix, den: np.ndarray) -> Matrix:
    zero = np.flatnonzero(den == 0.0)
    if zero.size:
        raise DegenerateKernelError(int(zero[0]))
    return num / den[:, None]


def evaluate_left(terms: Terms, v: Matrix, normalize: bool, materialize: bool = False) -> tuple[Matrix, int]:
    """``(sum_t A_t B_t^T) V``; per term unless ``materialize`` sums S before multiplying by V."""
    n = _check_terms(terms, v)
    dv = v.shape[1]
    t = len(terms)
    flops = 0
    if materialize:
        s = sum(matmul(a, b.T) for a, b in terms)
        flops += sum(2 * n * n * a.shape[1] for a, _ in terms) + (t - 1) * n * n
        num = matmul(s, v)
        flops += 2 * n * n * dv
        if normalize:
            den = s.sum(axis=1)
            flops += n * n
    else:
        num = den = 0.0
        for a, b in terms:
            s = matmul(a, b.T)
            num = num + matmul(s, v)
            flops += 2 * n * n * a.shape[1] + 2 * n * n * dv
            if normalize:
                den = den + s.sum(axis=1)
                flops += n * n
        flops += (t - 1) * n * dv + ((t - 1) * n if normalize else 0)
    if not normalize:
        return num, flops
    return _normalize(num, den), flops + n * dv


def evaluate_right(terms: Terms, v: Matrix, normalize: bool) -> tuple[Matrix, int]:
    """``sum_t A_t (B_t^T V)``, never forming an N x N matrix."""
    n = _check_terms(terms, v)
    dv = v.shape[1]
    t = len(terms)
    num = den = 0.0
    flops = 0
    for a, b in terms:
        d = a.shape[1]
        num = num + matmul(a, matmul(b.T, v))
        flops += 4 * n * d * dv
        if normalize:
            den = den + a @ b.sum(axis=0)
            flops += 3 * n * d
    flops += (t - 1) * n * dv + ((t - 1) * n if normalize else 0)
    if not normalize:
        return num, flops
    return _normalize(num, den), flops + n * dv


def linear_attention_left(q_prime: Matrix, k_weighted: Matrix, v: Matrix, normalize: bool = True) -> Matrix:
    return evaluate_left([(q_prime, k_weighted)], v, normalize)[0]


def linear_attention_right(q_prime: Matrix, k_weighted: Matrix, v: Matrix, normalize: bool = True) -> Matrix:
    return evaluate_right([(q_prime, k_weighted)], v, normalize)[0]


# -- variant assembly ---------------------------------------------------------


def _check_qkv(q: Matrix, k: Matrix, v: Matrix, spec: LinearAttentionSpec) -> int:
    if q.shape != k.shape:
        raise ShapeError(f"query shape {q.shape} != key shape {k.shape}")
    if k.shape[0] != v.shape[0]:
        raise ShapeError(f"{k.shape[0]} keys but {v.shape[0]} values")
    if q.shape[1] != spec.d_k:
        raise ShapeError(f"head width {q.shape[1]} != spec.d_k {spec.d_k}")
    return q.shape[0]


def factor_terms(q: Matrix, k: Matrix, spec: LinearAttentionSpec) -> tuple[list[tuple[Matrix, Matrix]], int]:
    """Build the ``(A_t, B_t)`` pairs for ``spec.pe`` plus the flops spent re-weighting."""
    n, d = q.shape
    pq = apply_activation(spec.activation, q)
    pk = apply_activation(spec.activation, k)
    pe = spec.pe
    if isinstance(pe, Npe):
        return [(pq, pk)], 0
    if isinstance(pe, MApe):
        if pe.w_ext.shape[1] != d:
            raise ShapeError(f"w_ext has {pe.w_ext.shape[1]} columns, head width is {d}")
        return [(pq, pk * m_ape_weights(pe.max_len, n, pe.w_ext))], 2 * n * d
    if isinstance(pe, LmApe):
        return [(pq, pk * lm_ape_weights(pe.table, n, d))], n * d
    if isinstance(pe, MRpe):
        c, s = cosformer_phase_vectors(pe.max_len, n)
        c, s = c[:, None], s[:, None]
        return [(pq * c, pk * c), (pq * s, pk * s)], 4 * n * d
    if isinstance(pe, ARpe):
        cq, ck, sq, sk = a_rpe_bias_terms(pe.max_len, n)
        return [(pq, pk), (cq[:, None], ck[:, None]), (sq[:, None], sk[:, None])], 0
    raise TypeError(f"unsupported position embedding {pe!r}")


def _run(q: Matrix, k: Matrix, v: Matrix, spec: LinearAttentionSpec) -> AttentionOutput:
    n = _check_qkv(q, k, v, spec)
    terms, pe_flops = factor_terms(q, k, spec)
    order = spec.resolve_order(n)
    if order is ProductOrder.LEFT:
        values, flops = evaluate_left(terms, v, spec.normalize, materialize=isinstance(spec.pe, ARpe))
    else:
        values, flops = evaluate_right(terms, v, spec.normalize)
    return AttentionOutput(values, order, flops + pe_flops)


def cosformer_attention(q: Matrix, k: Matrix, v: Matrix, spec: LinearAttentionSpec) -> AttentionOutput:
    """cosFormer relative re-weighting, evaluated as its two cos/sin terms."""
    if not isinstance(spec.pe, MRpe):
        raise TypeError("cosformer_attention requires an MRpe position embedding")
    check_length(q.shape[0], spec.pe.max_len)
    return _run(q, k, v, spec)


def lmla_attention(q: Matrix, k: Matrix, v: Matrix, spec: LinearAttentionSpec) -> AttentionOutput:
    """Single-term attention with key-only re-weighting (LmApe; also MApe and Npe)."""
    if not isinstance(spec.pe, (LmApe, MApe, Npe)):
        raise TypeError("lmla_attention requires an LmApe, MApe or Npe position embedding")
    return _run(q, k, v, spec)


def a_rpe_attention(q: Matrix, k: Matrix, v: Matrix, spec: LinearAttentionSpec) -> AttentionOutput:
    """Kernel similarity plus the additive bias cos(pi (i-j) / 2M)."""
    if not isinstance(spec.pe, ARpe):
        raise TypeError("a_rpe_attention requires an ARpe position embedding")
    return _run(q, k, v, spec)


def linear_attention(q: Matrix, k: Matrix, v: Matrix, spec: LinearAttentionSpec) -> AttentionOutput:
    """Single-head linear attention for any position-embedding style."""
    return _run(q, k, v, spec)


def similarity_matrix(q: Matrix, k: Matrix, spec: LinearAttentionSpec) -> Matrix:
    """The N x N similarity the left order materializes (before normalization)."""
    terms, _ = factor_terms(q, k, spec)
    return sum(a @ b.T for a, b in terms)


# -- multi-head ---------------------------------------------------------------


def _project(x: Matrix, w: Matrix, b) -> Matrix:
    y = matmul(x, w)
    return y if b is None else y + np.reshape(b, (1, -1))


def multi_head(
    q: Matrix,
    k: Matrix,
    v: Matrix,
    spec: LinearAttentionSpec,
    w_q: Matrix,
    w_k: Matrix,
    w_v: Matrix,
    w_o: Matrix,
    b_q=None,
    b_k=None,
    b_v=None,
    b_o=None,
) -> Matrix:
    """Project, split into ``spec.heads`` column blocks, attend per head, concatenate, project out."""
    if model_dim_check(w_q.shape[1], spec.heads) != spec.d_k:
        raise ShapeError(f"w_q width {w_q.shape[1]} does not give {spec.heads} heads of width {spec.d_k}")
    dm = spec.model_dim
    for name, w in (("w_k", w_k), ("w_v", w_v)):
        if w.shape[1] != dm:
            raise ShapeError(f"{name} has {w.shape[1]} output columns, expected d_k*heads = {dm}")
    if w_o.shape[0] != dm:
        raise ShapeError(f"w_o has {w_o.shape[0]} input rows, expected {dm}")
    qp, kp, vp = _project(q, w_q, b_q), _project(k, w_k, b_k), _project(v, w_v, b_v)
    outs = []
    for h in range(spec.heads):
        cols = slice(h * spec.d_k, (h + 1) * spec.d_k)
        outs.append(linear_attention(qp[:, cols], kp[:, cols], vp[:, cols], spec.for_head(h)).values)
    return _project(np.concatenate(outs, axis=1), w_o, b_o)


@dataclass
class MultiHeadParams:
    """Projection weights and biases of one multi-head attention layer."""

    w_q: Matrix
    w_k: Matrix
    w_v: Matrix
    w_o: Matrix
    b_q: np.ndarray
    b_k: np.ndarray
    b_v: np.ndarray
    b_o: np.ndarray

    @classmethod
    def init(cls, model_dim: int, rng: Rng, scale: Optional[float] = None) -> "MultiHeadParams":
        s = scale if scale is not None else 1.0 / math.sqrt(model_dim)
        ws = [rng.normal(model_dim, model_dim, s) for _ in range(4)]
        bs = [rng.normal(1, model_dim, 0.1)[0] for _ in range(4)]
        return cls(*ws, *bs)

    def forward(self, x: Matrix, spec: LinearAttentionSpec) -> Matrix:
        return multi_head(x, x, x, spec, self.w_q, self.w_k, self.w_v, self.w_o,
                          self.b_q, self.b_k, self.b_v, self.b_o)


def model_dim_check(model_dim: int, heads: int) -> int:
    """Per-head width, rejecting a model dimension that does not split evenly."""
    if heads < 1 or model_dim % heads:
        raise ShapeError(f"model dimension {model_dim} is not divisible by {heads} heads")
    return model_dim // heads
