"""Fixed-time bounds across the four regimes of the comparison inequality.

For each parameter set the closed-form time bound T and residual level are
printed next to the reach time of an RK4 integration started far away, so
the tightness of the bound can be read off directly.
"""

from tfcbf.fxt import ConvergenceError, FxTParams, comparison_ode_oracle, regime, residual_level, time_bound

CASES = [
    FxTParams(1.0, 1.0, -1.0, 2.0),
    FxTParams(1.0, 1.0, 0.0, 4.0),
    FxTParams(1.0, 1.0, 0.9741, 4.0),
    FxTParams(1.0, 1.0, 2.0, 2.0, kk=2.0),
    FxTParams(0.4, 0.4, 0.9713, 4.0),
    FxTParams(1.0, 1.0, 3.0, 2.0),
]


def main():
    print(f"{'alpha':>6} {'beta':>6} {'delta':>7} {'mu':>4}  {'T':>9} {'level':>10} {'reach(1e6)':>11}  regime")
    for p in CASES:
        T = time_bound(p)
        try:
            reach = f"{comparison_ode_oracle(p, 1e6)[0]:.5f}"
        except ConvergenceError:
            reach = "none"
        print(f"{p.alpha:6g} {p.beta:6g} {p.delta:7g} {p.mu:4g}  {T:9.5f} {residual_level(p):10.5g} {reach:>11}  {regime(p)}")


if __name__ == "__main__":
    main()
