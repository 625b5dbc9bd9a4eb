"""Left/right product-order agreement sweep over every activation and PE style."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Iterator

from .attention import LinearAttentionSpec, ProductOrder, linear_attention
from .kernels import ActivationKind, ARpe, LearnablePositionTable, LmApe, MApe, MRpe, Npe
from .numerics import Rng, max_rel_error

PE_STYLES = ("npe", "mrpe", "mape", "lmape", "arpe")


def build_pe(name: str, max_len: int, dim: int, rng: Rng):
    if name == "npe":
        return Npe()
    if name == "mrpe":
        return MRpe(max_len)
    if name == "arpe":
        return ARpe(max_len)
    if name == "mape":
        return MApe(max_len, rng.uniform(1, dim, 0.5, 1.5))
    if name == "lmape":
        return LmApe(LearnablePositionTable.init(max_len, dim, rng))
    raise ValueError(f"unknown position embedding {name!r}")


@dataclass
class IdentityResult:
    activation: str
    pe: str
    n: int
    d_k: int
    seed: int
    normalize: bool
    rel_error: float


def order_identity(activation, pe: str, n: int, d_k: int, seed: int, normalize: bool, max_len: int) -> IdentityResult:
    """Relative disagreement ``max|L - R| / max|L|`` between the two product orders."""
    rng = Rng(seed, n, d_k)
    spec = LinearAttentionSpec(activation, build_pe(pe, max_len, d_k, rng.child(0)), ProductOrder.LEFT, normalize, d_k, 1)
    # normalized runs shift q/k so relu rows are not all zero (zero row-sums are rejected)
    shift = 2.0 if normalize else 0.0
    q = rng.child(1).normal(n, d_k) + shift
    k = rng.child(2).normal(n, d_k) + shift
    v = rng.child(3).normal(n, d_k)
    left = linear_attention(q, k, v, spec).values
    right = linear_attention(q, k, v, LinearAttentionSpec(
        spec.activation, spec.pe, ProductOrder.RIGHT, normalize, d_k, 1)).values
    return IdentityResult(ActivationKind(activation).value, pe, n, d_k, seed, normalize, max_rel_error(right, left))


def identity_sweep(
    seq_lens: Iterable[int] = (1, 7, 64, 200, 1000),
    d_ks: Iterable[int] = (4, 64),
    seeds: Iterable[int] = (0, 1, 2),
    normalize: Iterable[bool] = (False, True),
) -> Iterator[IdentityResult]:
    seq_lens = list(seq_lens)
    max_len = max(seq_lens)
    for act in ActivationKind:
        for pe in PE_STYLES:
            for n in seq_lens:
                for d_k in d_ks:
                    for seed in seeds:
                        for norm in normalize:
                            yield order_identity(act, pe, n, d_k, seed, norm, max_len)
