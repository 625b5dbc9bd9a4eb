"""Latency sweeps over sequence length for linear-attention variants, with CSV output."""
from __future__ import annotations

import csv
import math
import os
import time
from dataclasses import dataclass, field, replace
from pathlib import Path
from statistics import median
from typing import Iterable, Optional, Sequence

import numpy as np
from threadpoolctl import threadpool_limits

from .attention import LinearAttentionSpec, ProductOrder, linear_attention
from .kernels import pe_name
from .numerics import Rng

DEFAULT_SEQ_LENS = (100, 250, 500, 1000, 2000)
CSV_FIELDS = ("variant", "pe", "order", "n", "d_k", "heads", "mean_s", "stddev_s", "flop_estimate")


@dataclass
class BenchConfig:
    variants: Sequence[LinearAttentionSpec]
    seq_lengths: Sequence[int] = DEFAULT_SEQ_LENS
    batch: int = 4
    warmup_iters: int = 50
    measured_iters: int = 200
    seed: int = 0
    output_path: Optional[str] = None
    labels: Optional[Sequence[str]] = None


@dataclass
class BenchRecord:
    variant: str
    pe: str
    order: str
    n: int
    d_k: int
    heads: int
    mean_s: float
    stddev_s: float
    flop_estimate: int
    median_s: float = field(default=float("nan"), compare=False)
    samples: int = field(default=0, compare=False)

    def rounded(self) -> "BenchRecord":
        return replace(self, mean_s=round(self.mean_s, 9), stddev_s=round(self.stddev_s, 9))


def variant_label(spec: LinearAttentionSpec) -> str:
    return f"{pe_name(spec.pe)}-{spec.activation.value}-{spec.product_order.value}"


def bench_threads() -> int:
    return int(os.environ.get("LMEC_THREADS", "1"))


def validate(cfg: BenchConfig) -> None:
    if cfg.measured_iters < 1:
        raise ValueError("measured_iters must be at least 1")
    if cfg.warmup_iters < 0 or cfg.batch < 1:
        raise ValueError("warmup_iters must be >= 0 and batch >= 1")
    if not cfg.seq_lengths or not cfg.variants:
        raise ValueError("need at least one variant and one sequence length")
    if cfg.labels is not None and len(cfg.labels) != len(cfg.variants):
        raise ValueError("labels must match variants one to one")
    for spec in cfg.variants:
        max_len = getattr(spec.pe, "max_len", None)
        for n in cfg.seq_lengths:
            if n < 1:
                raise ValueError(f"sequence length {n} must be positive")
            if max_len is not None and n > max_len:
                raise ValueError(f"sequence length {n} exceeds max length {max_len} of {variant_label(spec)}")
    if cfg.output_path is not None:
        parent = Path(cfg.output_path).resolve().parent
        if not parent.is_dir() or not os.access(parent, os.W_OK):
            raise OSError(f"cannot write benchmark output to {cfg.output_path}")


def _inputs(rng: Rng, n: int, spec: LinearAttentionSpec, batch: int):
    # keys/queries centred at +0.5 so relu kernels rarely produce all-zero rows
    out = []
    for b in range(batch):
        for h in range(spec.heads):
            r = rng.child(b, h)
            q = r.normal(n, spec.d_k) + 0.5
            k = r.normal(n, spec.d_k) + 0.5
            v = r.normal(n, spec.d_k)
            out.append((q, k, v, spec.for_head(h)))
    return out


def _one_pass(items) -> int:
    flops = 0
    for q, k, v, head_spec in items:
        flops += linear_attention(q, k, v, head_spec).flop_estimate
    return flops


def run_latency_sweep(cfg: BenchConfig) -> list[BenchRecord]:
    """Time every (variant, N) pair: warm-up passes, then ``measured_iters`` timed passes.

    One pass evaluates ``batch * heads`` independent single-head attentions.
    Inputs are a deterministic function of ``cfg.seed``, the variant index and N.
    """
    validate(cfg)
    labels = cfg.labels or [variant_label(s) for s in cfg.variants]
    records = []
    with threadpool_limits(limits=bench_threads()):
        for vi, spec in enumerate(cfg.variants):
            for n in cfg.seq_lengths:
                items = _inputs(Rng(cfg.seed, vi, n), n, spec, cfg.batch)
                flops = _one_pass(items)
                for _ in range(cfg.warmup_iters):
                    _one_pass(items)
                times = []
                for _ in range(cfg.measured_iters):
                    t0 = time.perf_counter_ns()
                    _one_pass(items)
                    times.append((time.perf_counter_ns() - t0) * 1e-9)
                arr = np.asarray(times)
                records.append(BenchRecord(
                    variant=labels[vi], pe=pe_name(spec.pe), order=spec.resolve_order(n).value, n=n,
                    d_k=spec.d_k, heads=spec.heads, mean_s=float(arr.mean()),
                    stddev_s=float(arr.std(ddof=1)) if arr.size > 1 else 0.0,
                    flop_estimate=flops, median_s=float(median(times)), samples=arr.size,
                ))
    if cfg.output_path is not None:
        emit_csv(records, cfg.output_path)
    return records


def emit_csv(records: Sequence[BenchRecord], path) -> None:
    if not records:
        raise ValueError("no benchmark records to write")
    try:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(CSV_FIELDS)
            for r in records:
                w.writerow([r.variant, r.pe, r.order, r.n, r.d_k, r.heads,
                            f"{r.mean_s:.9f}", f"{r.stddev_s:.9f}", r.flop_estimate])
    except OSError as exc:
        raise OSError(f"failed writing benchmark CSV to {path}: {exc}") from exc


def read_csv(path) -> list[BenchRecord]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    return [
        BenchRecord(r["variant"], r["pe"], r["order"], int(r["n"]), int(r["d_k"]), int(r["heads"]),
                    float(r["mean_s"]), float(r["stddev_s"]), int(r["flop_estimate"]))
        for r in rows
    ]


# -- analysis -------------------------------------------------------------------


def select(records: Iterable[BenchRecord], **match) -> list[BenchRecord]:
    return sorted((r for r in records if all(getattr(r, k) == v for k, v in match.items())), key=lambda r: r.n)


def per_doubling_growth(records: Sequence[BenchRecord]) -> list[tuple[int, float]]:
    """``(N, g)`` per consecutive pair, where ``g`` is the time ratio rescaled to one doubling of N."""
    rs = sorted(records, key=lambda r: r.n)
    out = []
    for a, b in zip(rs, rs[1:]):
        doublings = math.log2(b.n / a.n)
        out.append((b.n, (b.mean_s / a.mean_s) ** (1.0 / doublings)))
    return out


def crossover_length(left: Sequence[BenchRecord], right: Sequence[BenchRecord], allowed_inversions: int = 1) -> Optional[int]:
    """Smallest tested N from which the right order is no slower than the left, up to ``allowed_inversions``."""
    by_n = {r.n: r for r in left}
    pairs = [(r.n, r.mean_s <= by_n[r.n].mean_s) for r in sorted(right, key=lambda r: r.n) if r.n in by_n]
    for i, (n, _) in enumerate(pairs):
        misses = sum(1 for _, ok in pairs[i:] if not ok)
        if pairs[i][1] and misses <= allowed_inversions:
            return n
    return None


def spec_for(pe, activation, order: ProductOrder, d_k: int, heads: int, normalize: bool = True) -> LinearAttentionSpec:
    return LinearAttentionSpec(activation, pe, order, normalize, d_k, heads)
