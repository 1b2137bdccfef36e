"""Attentional NetVLAD test accuracy against the attention-loss weight lambda.

    python3 scripts/lambda_sweep.py --seeds 5 --lambdas 1e-4,0.01,0.4,1
"""
import argparse

from attnvlad import experiments as ex


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--seeds", type=int, default=5)
    ap.add_argument("--lambdas", default=",".join(f"{v:g}" for v in ex.LAMBDAS))
    args = ap.parse_args()
    lambdas = [float(t) for t in args.lambdas.split(",")]
    summary = ex.lambda_sweep(lambdas, range(args.seeds),
                              progress=lambda r: print(f"  seed {r.seed} lambda={r.variant:<8} acc={r.accuracy:.3f}",
                                                       flush=True))
    print(summary.table().replace("variant", "lambda "))
    means = [summary.mean_accuracy(f"{lam:g}") for lam in lambdas]
    print(f"spread {100 * (max(means) - min(means)):.1f} points")


if __name__ == "__main__":
    main()
