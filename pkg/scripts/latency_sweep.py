"""Latency vs sequence length for M-RPE and LM-APE attention, left and right products.

Writes one CSV with every (variant, order, N) record and prints the headline
comparisons: right/left speed-up at the longest N, LM-APE vs M-RPE margin,
and per-doubling growth of each order.

    python3 scripts/latency_sweep.py --out results/latency.csv
    python3 scripts/latency_sweep.py --warmup 3 --iters 15 --out /tmp/quick.csv
"""
import argparse
from pathlib import Path

from lmec.attention import LinearAttentionSpec, ProductOrder
from lmec.bench import DEFAULT_SEQ_LENS, BenchConfig, crossover_length, per_doubling_growth, run_latency_sweep, select
from lmec.kernels import ActivationKind, LearnablePositionTable, LmApe, MRpe
from lmec.numerics import Rng


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--seq-lens", default=",".join(map(str, DEFAULT_SEQ_LENS)))
    ap.add_argument("--dk", type=int, default=64)
    ap.add_argument("--heads", type=int, default=4)
    ap.add_argument("--batch", type=int, default=4)
    ap.add_argument("--warmup", type=int, default=50)
    ap.add_argument("--iters", type=int, default=200)
    ap.add_argument("--activation", default="elu", choices=[a.value for a in ActivationKind])
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--out", default="results/latency.csv")
    args = ap.parse_args()

    lens = [int(s) for s in args.seq_lens.split(",")]
    max_len = max(lens)
    table = LearnablePositionTable.init(max_len, args.dk * args.heads, Rng(args.seed, 1))
    specs, labels = [], []
    for order in (ProductOrder.LEFT, ProductOrder.RIGHT):
        for name, pe in (("mrpe", MRpe(max_len)), ("lmape", LmApe(table))):
            specs.append(LinearAttentionSpec(args.activation, pe, order, True, args.dk, args.heads))
            labels.append(f"{name}-{order.value}")
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    recs = run_latency_sweep(BenchConfig(specs, lens, args.batch, args.warmup, args.iters, args.seed, args.out, labels))

    print(f"{'variant':<12} " + " ".join(f"{n:>10}" for n in lens) + "   (mean ms per pass)")
    for label in labels:
        print(f"{label:<12} " + " ".join(f"{r.mean_s * 1e3:10.2f}" for r in select(recs, variant=label)))
    n_max = max(lens)
    for pe in ("mrpe", "lmape"):
        left = select(recs, variant=f"{pe}-left")
        right = select(recs, variant=f"{pe}-right")
        print(f"{pe}: left/right at N={n_max}: {left[-1].mean_s / right[-1].mean_s:.1f}x; "
              f"crossover N={crossover_length(left, right)}")
        print(f"  growth per doubling  left "
              + " ".join(f"{g:.2f}" for _, g in per_doubling_growth(left))
              + " | right " + " ".join(f"{g:.2f}" for _, g in per_doubling_growth(right)))
    for order in ("left", "right"):
        m = select(recs, variant=f"mrpe-{order}")[-1]
        l = select(recs, variant=f"lmape-{order}")[-1]
        print(f"{order}: lmape vs mrpe at N={n_max}: {(l.mean_s / m.mean_s - 1):+.1%}")
    print(f"wrote {args.out}")


if __name__ == "__main__":
    main()
