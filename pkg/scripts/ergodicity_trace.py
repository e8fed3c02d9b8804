"""Binned TV distance between the cell-process marginal and pi over time."""
import argparse

from fragchoice.acceptance import ergodicity_trace
from fragchoice.fixed_point import parse_rate, stationary_law


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--rate", default="const:1")
    ap.add_argument("--x0", default="0.1,1,3")
    ap.add_argument("--times", default="0.5,1,2,5,10,20")
    ap.add_argument("--paths", type=int, default=100_000)
    ap.add_argument("--seed", type=int, default=10)
    args = ap.parse_args()

    R = parse_rate(args.rate)
    pi = stationary_law(R)
    times = [float(t) for t in args.times.split(",")]
    print("x0,t,tv,sigma")
    for i, x0 in enumerate(float(v) for v in args.x0.split(",")):
        for t, (tv, sd) in zip(times, ergodicity_trace(R, pi, x0, times, args.paths, args.seed + i)):
            print(f"{x0},{t},{tv:.5f},{sd:.5f}")


if __name__ == "__main__":
    main()
