"""TV distance of the deterministic evolution to pi, and the stationary defect against dt."""
import argparse

import numpy as np

from fragchoice import linear_evolution as lin
from fragchoice.fixed_point import parse_rate, stationary_law
from fragchoice.measures import parse_grid


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--rate", default="const:1")
    ap.add_argument("--init", default="gamma:2:2")
    ap.add_argument("--grid", default="1e-4:50:4096")
    ap.add_argument("--tmax", type=float, default=12.0)
    ap.add_argument("--dt", type=float, default=1e-3)
    args = ap.parse_args()

    R = parse_rate(args.rate)
    grid = parse_grid(args.grid)
    pi = stationary_law(R, grid)
    every = max(1, int(round(1.0 / args.dt)))
    tr = lin.evolve_R(R, lin.parse_init(args.init, grid), args.tmax, args.dt, record_every=every)
    print("t,tv_to_pi,mass_drift")
    for s in tr.states:
        print(f"{s.t:.3f},{lin.tv_to(s, pi):.3e},{s.mass_drift:.2e}")

    # started at pi itself the only motion is discretisation error
    print("dt,stationary_defect")
    for dt in (4e-3, 2e-3, 1e-3, 5e-4):
        fin = lin.evolve_R(R, pi.cdf, 1.0, dt, record_every=10**9).final
        print(f"{dt:g},{np.max(np.abs(fin.F.values - pi.cdf.values)):.3e}")


if __name__ == "__main__":
    main()
