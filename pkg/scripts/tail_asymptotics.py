"""Tail fits of F^Psi for max-k (exp-linear) and min-k (power) rules."""
import argparse

from fragchoice.fixed_point import solve_FPsi, tail_fit
from fragchoice.rules import parse_rule


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--rules", default="max:2,max:3,max:4,min:2,min:3,min:4")
    args = ap.parse_args()
    print("rule,form,fitted,predicted,rms,points")
    for text in args.rules.split(","):
        rule = parse_rule(text)
        F = solve_FPsi(rule)
        if rule.kind == "max":
            form, predicted = "exp-linear", rule.k
        else:
            form, predicted = "power", 1.0 / (rule.k - 1.0)
        fit = tail_fit(F, form)
        print(f"{text},{form},{fit.rate:.4f},{predicted:.4f},{fit.residual:.2e},{fit.points}")


if __name__ == "__main__":
    main()
