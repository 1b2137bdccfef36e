"""Pooling ablation on the feature-level synthetic set (attention vs none, VLAD vs BoW vs GAP).

    python3 scripts/table1_proxy.py --seeds 5 --variants att-netvlad,netvlad,att-gap
"""
import argparse
import time

from attnvlad import experiments as ex


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--seeds", type=int, default=5)
    ap.add_argument("--variants", default=",".join(ex.VARIANTS))
    args = ap.parse_args()
    variants = [v for v in args.variants.split(",") if v]
    unknown = set(variants) - set(ex.VARIANTS)
    if unknown:
        ap.error(f"unknown variants: {sorted(unknown)}; choose from {list(ex.VARIANTS)}")
    t0 = time.perf_counter()
    summary = ex.ablation(range(args.seeds), variants,
                          progress=lambda r: print(f"  seed {r.seed} {r.variant:<12} acc={r.accuracy:.3f}"
                                                   f" ({r.seconds:.1f}s)", flush=True))
    print(summary.table())
    print(f"uniform attention baseline (signal-cell fraction): {ex.signal_fraction(ex.ABLATION_SPEC):.3f}")
    print(f"total {time.perf_counter() - t0:.0f}s")


if __name__ == "__main__":
    main()
