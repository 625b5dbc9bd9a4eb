"""Analytic backward passes and their central finite-difference oracle.

Left- and right-order attention backward passes are written independently:
the left pass differentiates through the materialized N x N similarity, the
right pass through the d x d_v key/value summaries.
"""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from typing import Callable, Iterable, Optional

import numpy as np

from . import blocks
from .attention import LinearAttentionSpec, MultiHeadParams, ProductOrder, _project, factor_terms, linear_attention
from .equivalence import build_pe
from .errors import DegenerateKernelError, NonFiniteError, ShapeError
from .kernels import (
    ActivationKind,
    ARpe,
    LearnablePositionTable,
    LmApe,
    MApe,
    MRpe,
    Npe,
    activation_derivative,
    apply_activation,
    cosformer_phase_vectors,
    has_kink,
    lm_ape_weights,
    m_ape_weights,
)
from .numerics import Matrix, Rng


# -- oracle ---------------------------------------------------------------------


def finite_diff_grad(f: Callable[[Matrix], float], x: Matrix, eps: float = 1e-5, dtype=np.float64) -> Matrix:
    """Central differences ``(f(x + eps e_i) - f(x - eps e_i)) / 2 eps`` for every coordinate.

    ``x`` is perturbed in ``dtype``; with ``np.longdouble`` and an ``f`` that
    preserves its input dtype, the difference quotient carries ~2000x less
    round-off than in float64.
    """
    x = np.array(x, dtype=dtype)
    grad = np.zeros(x.shape)
    for idx in np.ndindex(x.shape):
        orig = x[idx]
        x[idx] = orig + eps
        fp = f(x)
        x[idx] = orig - eps
        fm = f(x)
        x[idx] = orig
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise NonFiniteError(f"non-finite function value perturbing coordinate {idx}")
        grad[idx] = (fp - fm) / (2 * eps)
    return grad


ORACLE_DTYPE = np.longdouble if np.finfo(np.longdouble).eps < np.finfo(np.float64).eps else np.float64


def kink_mask(pre: Callable[[Matrix], Iterable[np.ndarray]], x: Matrix, eps: float = 1e-5, radius: float = 10.0) -> np.ndarray:
    """Coordinates of ``x`` whose +-radius*eps perturbation moves some pre-activation across 0.

    ``pre(x)`` returns the arrays that feed a kinked activation.
    """
    x = np.array(x, dtype=np.float64)
    mask = np.zeros(x.shape, dtype=bool)
    h = radius * eps
    for idx in np.ndindex(x.shape):
        orig = x[idx]
        x[idx] = orig + h
        hi = [np.array(p) for p in pre(x)]
        x[idx] = orig - h
        lo = [np.array(p) for p in pre(x)]
        x[idx] = orig
        mask[idx] = any(np.any((a > 0) != (b > 0)) for a, b in zip(hi, lo))
    return mask


@dataclass
class GradReport:
    op_name: str
    tensor_name: str
    max_rel_error: float
    worst_coordinate: tuple
    eps_used: float
    skipped: int = 0

    def csv_row(self) -> list[str]:
        return [self.op_name, self.tensor_name, f"{self.max_rel_error:.3e}", f"{self.eps_used:g}"]


def compare(op_name: str, tensor_name: str, analytic: Matrix, numeric: Matrix, eps: float,
            skip: Optional[np.ndarray] = None) -> GradReport:
    """Relative error ``|a - n| / max(|a|, |n|, 1e-8)``, maximized over non-skipped coordinates."""
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    if analytic.shape != numeric.shape:
        raise ShapeError(f"{op_name}/{tensor_name}: analytic {analytic.shape} vs numeric {numeric.shape}")
    rel = np.abs(analytic - numeric) / np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8)
    skipped = 0
    if skip is not None:
        rel = np.where(skip, 0.0, rel)
        skipped = int(skip.sum())
    worst = np.unravel_index(int(np.argmax(rel)), rel.shape) if rel.size else ()
    return GradReport(op_name, tensor_name, float(rel.max(initial=0.0)), tuple(int(i) for i in worst), eps, skipped)


def reports_to_csv(reports: Iterable[GradReport]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["op_name", "tensor_name", "max_rel_error", "eps"])
    for r in reports:
        w.writerow(r.csv_row())
    return buf.getvalue()


# -- attention backward ---------------------------------------------------------


@dataclass
class AttentionGrads:
    q: Matrix
    k: Matrix
    v: Matrix
    table: Optional[Matrix] = None
    w_ext: Optional[Matrix] = None


def _out_grads(num: Matrix, den: Optional[np.ndarray], upstream: Matrix):
    if den is None:
        return upstream, None
    zero = np.flatnonzero(den == 0.0)
    if zero.size:
        raise DegenerateKernelError(int(zero[0]))
    out = num / den[:, None]
    return upstream / den[:, None], -(upstream * out).sum(axis=1) / den


def _left_backward(terms, v, normalize, upstream):
    s = sum(a @ b.T for a, b in terms)
    num = s @ v
    den = s.sum(axis=1) if normalize else None
    dnum, dden = _out_grads(num, den, upstream)
    ds = dnum @ v.T
    if dden is not None:
        ds = ds + dden[:, None]
    dv = s.T @ dnum
    dterms = [(ds @ b, ds.T @ a) for a, b in terms]
    return dterms, dv


def _right_backward(terms, v, normalize, upstream):
    kv = [b.T @ v for _, b in terms]
    ksum = [b.sum(axis=0) for _, b in terms]
    num = sum(a @ c for (a, _), c in zip(terms, kv))
    den = sum(a @ z for (a, _), z in zip(terms, ksum)) if normalize else None
    dnum, dden = _out_grads(num, den, upstream)
    dterms = []
    dv = np.zeros_like(v)
    for (a, b), c, z in zip(terms, kv, ksum):
        dc = a.T @ dnum
        da = dnum @ c.T
        db = v @ dc.T
        if dden is not None:
            da = da + np.outer(dden, z)
            db = db + (a.T @ dden)[None, :]
        dterms.append((da, db))
        dv = dv + b @ dc
    return dterms, dv


def backward_attention(q: Matrix, k: Matrix, v: Matrix, spec: LinearAttentionSpec, upstream: Matrix,
                       order: Optional[ProductOrder] = None) -> AttentionGrads:
    """Gradients of ``sum(upstream * linear_attention(q, k, v, spec).values)``.

    ``order`` overrides the spec's (possibly dynamic) product order. The PE
    gradient is reported for LmApe (``table``, full table shape with zero rows
    beyond N) and MApe (``w_ext``).
    """
    n, d = q.shape
    if upstream.shape != v.shape:
        raise ShapeError(f"upstream shape {upstream.shape} != value shape {v.shape}")
    order = ProductOrder(order) if order is not None else spec.resolve_order(n)
    if order is ProductOrder.DYNAMIC:
        raise ValueError("backward needs a concrete product order")
    terms, _ = factor_terms(q, k, spec)
    if order is ProductOrder.LEFT:
        dterms, dv = _left_backward(terms, v, spec.normalize, upstream)
    else:
        dterms, dv = _right_backward(terms, v, spec.normalize, upstream)

    pk = apply_activation(spec.activation, k)
    pe = spec.pe
    grads = AttentionGrads(q=None, k=None, v=dv)
    if isinstance(pe, (Npe, ARpe)):
        dpq, dpk = dterms[0]
    elif isinstance(pe, MApe):
        w = m_ape_weights(pe.max_len, n, pe.w_ext)
        dpq, db = dterms[0]
        dpk = db * w
        c, _ = cosformer_phase_vectors(pe.max_len, n)
        grads.w_ext = (c[:, None] * db * pk).sum(axis=0, keepdims=True)
    elif isinstance(pe, LmApe):
        w = lm_ape_weights(pe.table, n, d)
        dpq, db = dterms[0]
        dpk = db * w
        r = pe.table.r
        dr = -np.sin(r[:n]) * db * pk
        table_grad = np.zeros_like(r)
        table_grad[:n] = dr.sum(axis=1, keepdims=True) if r.shape[1] == 1 else dr
        grads.table = table_grad
    elif isinstance(pe, MRpe):
        c, s = cosformer_phase_vectors(pe.max_len, n)
        (da1, db1), (da2, db2) = dterms
        dpq = da1 * c[:, None] + da2 * s[:, None]
        dpk = db1 * c[:, None] + db2 * s[:, None]
    else:
        raise TypeError(f"unsupported position embedding {pe!r}")
    grads.q = dpq * activation_derivative(spec.activation, q)
    grads.k = dpk * activation_derivative(spec.activation, k)
    return grads


def backward_multi_head(x: Matrix, spec: LinearAttentionSpec, p: MultiHeadParams, upstream: Matrix,
                        order: Optional[ProductOrder] = None) -> dict[str, Matrix]:
    """Gradients of ``sum(upstream * p.forward(x, spec))`` for every tensor, plus the PE tensor and x."""
    qp, kp, vp = _project(x, p.w_q, p.b_q), _project(x, p.w_k, p.b_k), _project(x, p.w_v, p.b_v)
    dk_ = spec.d_k
    outs = []
    dq = np.zeros_like(qp)
    dk = np.zeros_like(kp)
    dv = np.zeros_like(vp)
    pe_grad = None
    dcat = upstream @ p.w_o.T
    for h in range(spec.heads):
        cols = slice(h * dk_, (h + 1) * dk_)
        hs = spec.for_head(h)
        outs.append(linear_attention(qp[:, cols], kp[:, cols], vp[:, cols], hs).values)
        g = backward_attention(qp[:, cols], kp[:, cols], vp[:, cols], hs, dcat[:, cols], order)
        dq[:, cols], dk[:, cols], dv[:, cols] = g.q, g.k, g.v
        if g.table is not None:
            if pe_grad is None:
                pe_grad = np.zeros_like(spec.pe.table.r)
            if spec.pe.table.dim == 1:
                pe_grad += g.table
            else:
                pe_grad[:, cols] = g.table
        if g.w_ext is not None:
            if pe_grad is None:
                pe_grad = np.zeros_like(spec.pe.w_ext)
            pe_grad[:, cols] = g.w_ext
    cat = np.concatenate(outs, axis=1)
    grads = {
        "w_q": x.T @ dq, "w_k": x.T @ dk, "w_v": x.T @ dv, "w_o": cat.T @ upstream,
        "b_q": dq.sum(axis=0), "b_k": dk.sum(axis=0), "b_v": dv.sum(axis=0), "b_o": upstream.sum(axis=0),
        "x": dq @ p.w_q.T + dk @ p.w_k.T + dv @ p.w_v.T,
    }
    if isinstance(spec.pe, LmApe):
        grads["table"] = pe_grad
    elif isinstance(spec.pe, MApe):
        grads["w_ext"] = pe_grad
    return grads


# -- feed-forward backward ------------------------------------------------------


def _ff_act_and_grad(kind: blocks.GluActivation, z: Matrix) -> tuple[Matrix, Matrix]:
    return blocks.ff_activation(kind, z), blocks.ff_activation_derivative(kind, z)


def backward_glu(x: Matrix, p: blocks.GluParams, upstream: Matrix) -> dict[str, Matrix]:
    z1 = x @ p.w1 + p.b1
    z2 = x @ p.w2 + p.b2
    a, da_dz = _ff_act_and_grad(p.activation, z1)
    h = a * z2
    dh = upstream @ p.w3.T
    dz1 = dh * z2 * da_dz
    dz2 = dh * a
    return {
        "x": dz1 @ p.w1.T + dz2 @ p.w2.T,
        "w1": x.T @ dz1, "b1": dz1.sum(axis=0),
        "w2": x.T @ dz2, "b2": dz2.sum(axis=0),
        "w3": h.T @ upstream, "b3": upstream.sum(axis=0),
    }


def backward_ffn(x: Matrix, p: blocks.FfnParams, upstream: Matrix) -> dict[str, Matrix]:
    z1 = x @ p.w1 + p.b1
    a, da_dz = _ff_act_and_grad(p.activation, z1)
    dz1 = (upstream @ p.w2.T) * da_dz
    return {
        "x": dz1 @ p.w1.T,
        "w1": x.T @ dz1, "b1": dz1.sum(axis=0),
        "w2": a.T @ upstream, "b2": upstream.sum(axis=0),
    }


# -- check drivers --------------------------------------------------------------


def _check_tensor(op: str, name: str, analytic, loss: Callable[[Matrix], float], x0: Matrix, eps: float,
                  pre: Optional[Callable[[Matrix], list]] = None) -> GradReport:
    x0 = np.asarray(x0, dtype=np.float64)
    shape = x0.shape
    x2 = x0.reshape(1, -1) if x0.ndim == 1 else x0

    def f2(m):
        return loss(m.reshape(shape))

    numeric = finite_diff_grad(f2, x2, eps, dtype=ORACLE_DTYPE)
    skip = None
    if pre is not None:
        skip = kink_mask(lambda m: pre(m.reshape(shape)), x2, eps)
    return compare(op, name, np.reshape(analytic, x2.shape), numeric, eps, skip)


def _with_pe(spec: LinearAttentionSpec, tensor: Matrix) -> LinearAttentionSpec:
    if isinstance(spec.pe, LmApe):
        pe = LmApe(LearnablePositionTable(tensor))
    else:
        pe = MApe(spec.pe.max_len, tensor)
    return LinearAttentionSpec(spec.activation, pe, spec.product_order, spec.normalize, spec.d_k, spec.heads)


def check_attention_grads(activation: ActivationKind, pe_name: str, order: ProductOrder, seed: int,
                          n: int = 6, d_k: int = 3, heads: int = 2, max_len: int = 8,
                          eps: float = 1e-5) -> list[GradReport]:
    """Finite-difference check of every tensor of a multi-head linear-attention layer."""
    rng = Rng(seed)
    dm = d_k * heads
    spec = LinearAttentionSpec(activation, build_pe(pe_name, max_len, dm, rng.child(1)), order, True, d_k, heads)
    p = MultiHeadParams.init(dm, rng.child(2), scale=0.7)
    # shifted query/key biases keep relu rows from dying entirely (zero row-sums are rejected)
    p.b_q = p.b_q + 2.0
    p.b_k = p.b_k + 2.0
    x = rng.child(3).normal(n, dm)
    g_up = rng.child(4).normal(n, dm)
    grads = backward_multi_head(x, spec, p, g_up, order)
    op = f"attention/{ActivationKind(activation).value}/{pe_name}/{ProductOrder(order).value}"
    kinked = has_kink(activation)
    names = ["w_q", "w_k", "w_v", "w_o", "b_q", "b_k", "b_v", "b_o"]

    def params_with(name, value):
        vals = {k: getattr(p, k) for k in names}
        vals[name] = value
        return MultiHeadParams(**vals)

    def loss_for(pp: MultiHeadParams, xx: Matrix, sp: LinearAttentionSpec):
        return np.sum(g_up * pp.forward(xx, sp))

    def pre_for(pp: MultiHeadParams, xx: Matrix) -> list:
        if not kinked:
            return []
        return [_project(xx, pp.w_q, pp.b_q), _project(xx, pp.w_k, pp.b_k)]

    reports = []
    for name in names:
        val = getattr(p, name)
        reports.append(_check_tensor(
            op, name, grads[name],
            lambda t, name=name: loss_for(params_with(name, t), x, spec), val, eps,
            (lambda t, name=name: pre_for(params_with(name, t), x)) if kinked else None,
        ))
    reports.append(_check_tensor(op, "x", grads["x"], lambda t: loss_for(p, t, spec), x, eps,
                                 (lambda t: pre_for(p, t)) if kinked else None))
    for pe_key in ("table", "w_ext"):
        if pe_key in grads:
            t0 = spec.pe.table.r if pe_key == "table" else spec.pe.w_ext
            reports.append(_check_tensor(op, pe_key, grads[pe_key], lambda t: loss_for(p, x, _with_pe(spec, t)), t0, eps))
    return reports


def check_ff_grads(kind: str, activation: blocks.GluActivation, seed: int, n: int = 3, h_o: int = 4,
                   hidden: int = 5, eps: float = 1e-5) -> list[GradReport]:
    """Finite-difference check of a GLU (``kind='glu'``) or FFN (``kind='ffn'``) layer."""
    rng = Rng(seed)
    x = rng.child(1).normal(n, h_o)
    g_up = rng.child(2).normal(n, h_o)
    if kind == "glu":
        p = blocks.GluParams.init(h_o, hidden, rng.child(3), activation, scale=0.8, bias_scale=0.3)
        forward, backward = blocks.glu_forward, backward_glu
        names = ["w1", "b1", "w2", "b2", "w3", "b3"]
    else:
        p = blocks.FfnParams.init(h_o, hidden, rng.child(3), activation, scale=0.8, bias_scale=0.3)
        forward, backward = blocks.ffn_forward, backward_ffn
        names = ["w1", "b1", "w2", "b2"]
    grads = backward(x, p, g_up)
    op = f"{kind}/{blocks.GluActivation(activation).value}"
    kinked = blocks.ff_has_kink(activation)

    def with_(name, value):
        return p.replace(**{name: value})

    def loss(pp, xx):
        return np.sum(g_up * forward(xx, pp))

    def pre(pp, xx):
        return [xx @ pp.w1 + pp.b1] if kinked else []

    reports = []
    for name in names:
        reports.append(_check_tensor(
            op, name, grads[name], lambda t, name=name: loss(with_(name, t), x), getattr(p, name), eps,
            (lambda t, name=name: pre(with_(name, t), x)) if kinked else None,
        ))
    reports.append(_check_tensor(op, "x", grads["x"], lambda t: loss(p, t), x, eps,
                                 (lambda t: pre(p, t)) if kinked else None))
    return reports


def run_all(seeds: Iterable[int] = (0, 1, 2), eps: float = 1e-5) -> list[GradReport]:
    """Every activation x PE style x product order, plus every GLU/FFN activation, over ``seeds``."""
    reports = []
    for seed in seeds:
        for act in ActivationKind:
            for pe in ("npe", "mrpe", "mape", "lmape", "arpe"):
                for order in (ProductOrder.LEFT, ProductOrder.RIGHT):
                    reports += check_attention_grads(act, pe, order, seed, eps=eps)
        for ff_act in blocks.GluActivation:
            reports += check_ff_grads("glu", ff_act, seed, eps=eps)
            reports += check_ff_grads("ffn", ff_act, seed, eps=eps)
    return reports


def order_agreement(activation: ActivationKind, pe_name: str, seed: int, n: int = 6, d_k: int = 3) -> float:
    """Largest relative disagreement between left- and right-order analytic gradients."""
    rng = Rng(seed)
    spec = LinearAttentionSpec(activation, build_pe(pe_name, 8, d_k, rng.child(1)), ProductOrder.LEFT, True, d_k, 1)
    q, k, v, up = (rng.child(i).normal(n, d_k) for i in range(2, 6))
    q, k = q + 1.0, k + 1.0
    gl = backward_attention(q, k, v, spec, up, ProductOrder.LEFT)
    gr = backward_attention(q, k, v, spec, up, ProductOrder.RIGHT)
    worst = 0.0
    for name in ("q", "k", "v", "table", "w_ext"):
        a, b = getattr(gl, name), getattr(gr, name)
        if a is None:
            continue
        scale = max(np.max(np.abs(a)), 1e-300)
        worst = max(worst, float(np.max(np.abs(a - b)) / scale))
    return worst


__all__ = [
    "AttentionGrads", "GradReport", "MultiHeadParams", "backward_attention", "backward_ffn", "backward_glu",
    "backward_multi_head", "check_attention_grads", "check_ff_grads", "compare", "finite_diff_grad",
    "kink_mask", "order_agreement", "reports_to_csv", "run_all", "DegenerateKernelError",
]
