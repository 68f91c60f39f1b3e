"""Three omnidirectional robots with coupled formation and reach tasks.

Runs both bundled scenarios (alpha = beta = 1 and alpha = beta = 0.4) and
prints the per-agent report: floor, minimum barrier value after the time
bound, slack usage and behaviour at the switching instants. Takes about
half a minute per scenario.
"""

import sys

from tfcbf.cli import _thresholds, format_report
from tfcbf.config import build_scenario, bundled


def main(names):
    for name in names:
        scen = build_scenario(bundled(name))
        traj, rep = scen.run()
        print(format_report(name, rep, _thresholds(rep, scen.thresholds)))
        print()


if __name__ == "__main__":
    main(sys.argv[1:] or ["paper_sec4_ab1", "paper_sec4_ab04"])
