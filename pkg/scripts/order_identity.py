"""Left vs right product agreement for every activation and position-embedding style.

Prints the worst relative disagreement per (activation, PE) pair across
sequence lengths, head widths, seeds and both normalization settings.
"""
import argparse
import time
from collections import defaultdict

from lmec.equivalence import identity_sweep


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--seq-lens", default="1,7,64,200,1000")
    ap.add_argument("--dks", default="4,64")
    ap.add_argument("--seeds", type=int, default=3)
    args = ap.parse_args()

    t0 = time.perf_counter()
    worst = defaultdict(float)
    count = 0
    for r in identity_sweep([int(s) for s in args.seq_lens.split(",")],
                            [int(s) for s in args.dks.split(",")], range(args.seeds)):
        worst[(r.activation, r.pe)] = max(worst[(r.activation, r.pe)], r.rel_error)
        count += 1
    for (act, pe), err in sorted(worst.items()):
        print(f"{act:<8} {pe:<6} {err:.2e}")
    print(f"{count} cases in {time.perf_counter() - t0:.1f}s, worst {max(worst.values()):.2e}")


if __name__ == "__main__":
    main()
