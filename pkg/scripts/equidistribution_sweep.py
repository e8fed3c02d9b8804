"""Deviation |N^alpha/n - alpha| against n for several rules and seeds.

Prints one row per (rule, seed, snapshot) and a fitted decay exponent of the
worst deviation per rule, which is what decides whether a fixed tolerance is
reachable at a given n.
"""
import argparse

import numpy as np

from fragchoice import frag_sim
from fragchoice.rules import parse_rule

ALPHAS = (0.1, 0.25, 0.5, 0.75, 0.9)


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--rules", default="uniform,max:2,max:3,min:2")
    ap.add_argument("--steps", type=int, default=1_000_000)
    ap.add_argument("--seeds", type=int, default=5)
    ap.add_argument("--snapshots", type=int, default=13)
    args = ap.parse_args()

    marks = frag_sim.snapshot_schedule(args.steps, args.snapshots)
    marks = marks[marks >= 100]
    print("rule,seed,n,max_dev")
    for text in args.rules.split(","):
        rule = parse_rule(text)
        worst = np.zeros(marks.size)
        for seed in range(args.seeds):
            cfg = frag_sim.init_config(alphas=ALPHAS)
            stats = frag_sim.run(cfg, rule, args.steps, frag_sim.substream(seed, 0), marks, keep_cdfs=False)
            for i, snap in enumerate(stats.snapshots):
                dev = float(np.max(np.abs(snap.fractions - np.array(ALPHAS))))
                worst[i] = max(worst[i], dev)
                print(f"{text},{seed},{snap.step},{dev:.5f}")
        slope = np.polyfit(np.log(marks), np.log(worst), 1)[0]
        print(f"# {text}: worst deviation at n={marks[-1]} is {worst[-1]:.4f}, decay ~ n^{slope:.2f}")


if __name__ == "__main__":
    main()
