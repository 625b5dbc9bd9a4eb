"""Finite-difference check of every backward pass over several seeds; CSV report plus a per-op summary."""
import argparse
from collections import defaultdict
from pathlib import Path

from lmec.gradcheck import reports_to_csv, run_all

TOL = 1e-6


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--seeds", type=int, default=3)
    ap.add_argument("--out", default="results/gradcheck.csv")
    args = ap.parse_args()

    reports = run_all(seeds=range(args.seeds))
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    Path(args.out).write_text(reports_to_csv(reports))

    worst = defaultdict(float)
    for r in reports:
        family = "/".join(r.op_name.split("/")[:2])
        worst[family] = max(worst[family], r.max_rel_error)
    for family, err in sorted(worst.items()):
        print(f"{family:<24} {err:.2e}")
    bad = [r for r in reports if r.max_rel_error >= TOL]
    print(f"{len(reports)} tensors, {len(bad)} at or above {TOL:g}; wrote {args.out}")
    return 1 if bad else 0


if __name__ == "__main__":
    raise SystemExit(main())
