"""Command line entry point: ``lmec bench|gradcheck|equivalence``."""
from __future__ import annotations

import argparse
import sys
from pathlib import Path

from . import bench, gradcheck
from .attention import LinearAttentionSpec, ProductOrder
from .equivalence import PE_STYLES, build_pe, identity_sweep
from .kernels import ActivationKind
from .numerics import Rng

IDENTITY_TOL = 1e-10
GRAD_TOL = 1e-6


def _int_list(text: str) -> list[int]:
    return [int(t) for t in text.split(",") if t.strip()]


def _names(text: str) -> list[str]:
    names = [t.strip().lower() for t in text.split(",") if t.strip()]
    bad = [n for n in names if n not in PE_STYLES]
    if bad:
        raise argparse.ArgumentTypeError(f"unknown variants {bad}; choose from {', '.join(PE_STYLES)}")
    return names


def _u64(text: str) -> int:
    v = int(text)
    if not 0 <= v < 2**64:
        raise argparse.ArgumentTypeError("seed must fit in an unsigned 64-bit integer")
    return v


def _on_off(text: str) -> bool:
    if text not in ("on", "off"):
        raise argparse.ArgumentTypeError("expected on or off")
    return text == "on"


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="lmec", description=__doc__)
    sub = ap.add_subparsers(dest="command", required=True)

    b = sub.add_parser("bench", help="latency sweep over sequence lengths, written as CSV")
    b.add_argument("--variants", type=_names, default=["mrpe", "lmape"])
    b.add_argument("--activation", choices=[a.value for a in ActivationKind], default="elu")
    b.add_argument("--order", choices=[o.value for o in ProductOrder], default="dynamic")
    b.add_argument("--seq-lens", type=_int_list, default=list(bench.DEFAULT_SEQ_LENS))
    b.add_argument("--dk", type=int, default=64)
    b.add_argument("--heads", type=int, default=4)
    b.add_argument("--batch", type=int, default=4)
    b.add_argument("--warmup", type=int, default=50)
    b.add_argument("--iters", type=int, default=200)
    b.add_argument("--seed", type=_u64, default=0)
    b.add_argument("--normalize", type=_on_off, default=True)
    b.add_argument("--out", required=True)

    g = sub.add_parser("gradcheck", help="finite-difference check of every backward pass")
    g.add_argument("--seed", type=_u64, default=0)
    g.add_argument("--seeds", type=int, default=3, help="number of consecutive seeds starting at --seed")
    g.add_argument("--out", required=True)

    e = sub.add_parser("equivalence", help="left vs right product agreement for every variant")
    e.add_argument("--seed", type=_u64, default=0)
    e.add_argument("--seeds", type=int, default=3)
    return ap


def cmd_bench(args) -> int:
    max_len = max(args.seq_lens)
    rng = Rng(args.seed)
    specs = [
        LinearAttentionSpec(args.activation, build_pe(name, max_len, args.dk * args.heads, rng.child(i)),
                            args.order, args.normalize, args.dk, args.heads)
        for i, name in enumerate(args.variants)
    ]
    cfg = bench.BenchConfig(specs, args.seq_lens, args.batch, args.warmup, args.iters, args.seed, args.out)
    records = bench.run_latency_sweep(cfg)
    for r in records:
        print(f"{r.variant:<24} N={r.n:<6} {r.order:<5} mean={r.mean_s * 1e3:10.3f} ms  sd={r.stddev_s * 1e3:8.3f} ms")
    print(f"wrote {len(records)} records to {args.out}")
    return 0


def cmd_gradcheck(args) -> int:
    reports = gradcheck.run_all(seeds=range(args.seed, args.seed + args.seeds))
    Path(args.out).write_text(gradcheck.reports_to_csv(reports))
    worst = max(reports, key=lambda r: r.max_rel_error)
    failed = [r for r in reports if r.max_rel_error >= GRAD_TOL]
    print(f"{len(reports)} tensors checked, worst {worst.op_name}/{worst.tensor_name} = {worst.max_rel_error:.2e}")
    print(f"{'FAIL' if failed else 'PASS'}: {len(failed)} tensors at or above {GRAD_TOL:g}; wrote {args.out}")
    return 1 if failed else 0


def cmd_equivalence(args) -> int:
    worst = 0.0
    failed = 0
    for r in identity_sweep(seeds=range(args.seed, args.seed + args.seeds)):
        worst = max(worst, r.rel_error)
        if r.rel_error >= IDENTITY_TOL:
            failed += 1
            print(f"FAIL {r.activation}/{r.pe} N={r.n} d_k={r.d_k} seed={r.seed} normalize={r.normalize}: {r.rel_error:.2e}")
    print(f"{'FAIL' if failed else 'PASS'}: worst left/right relative error {worst:.2e} (tolerance {IDENTITY_TOL:g})")
    return 1 if failed else 0


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    return {"bench": cmd_bench, "gradcheck": cmd_gradcheck, "equivalence": cmd_equivalence}[args.command](args)


if __name__ == "__main__":
    sys.exit(main())
