"""Replicated compensator test for the size-biased process.

Compares the paper-style compensator (children inherit the parent's
fraction below alpha) with the exact expected gain of the straddling
interval, from cut points that either contain alpha or do not.
"""
import argparse

import numpy as np

from fragchoice.frag_sim import martingale_experiment
from fragchoice.rules import parse_rule


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--rule", default="max:2")
    ap.add_argument("--replicas", type=int, default=10_000)
    ap.add_argument("--steps", type=int, default=100)
    ap.add_argument("--seed", type=int, default=7)
    args = ap.parse_args()

    rule = parse_rule(args.rule)
    xs, alphas = [0.1, 0.3], [0.3, 1.0]
    for cuts in ([0.3, 0.75], [0.2, 0.5]):
        for exact in (False, True):
            rep = martingale_experiment(rule, cuts, args.steps, args.replicas, xs, alphas, args.seed, exact)
            print(f"cuts={cuts} exact_straddler={exact}: max|z|={rep.max_abs_z():.2f} pass={rep.passes()}")
            for a, row_m, row_s in zip(alphas, rep.mean, rep.stderr):
                cells = "  ".join(f"x={x}: {m:+.2e} +- {s:.1e}" for x, m, s in zip(xs, row_m, row_s))
                print(f"    alpha={a}: {cells}")


if __name__ == "__main__":
    np.set_printoptions(precision=3)
    main()
