"""Command-line batch runner.

    tfcbf run SCENARIO.json [--out DIR] [--seed N]
    tfcbf bounds --alpha A --beta B --delta D --mu M [--kk K]
    tfcbf check TRAJECTORY.csv --formula FILE

Exit codes: 0 success, 2 bad config or input, 3 simulation failure,
4 a declared threshold failed.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
from pathlib import Path

import numpy as np

from .barrier import DegeneratePointError
from .config import ConfigError, agent_slices, build_scenario, bundled
from .fxt import FxTParams, epsilon_max, regime, residual_level, time_bound
from .qp import SaturationError
from .sim import SimulationError, Trajectory
from .stl import FormulaError, HorizonError, SampledSignal, parse_formula, robustness

EXIT_OK, EXIT_INPUT, EXIT_SIM, EXIT_THRESHOLD = 0, 2, 3, 4


def _g(v) -> str:
    return "%.17g" % v


# ------------------------------------------------------------------ csv


def write_csv(path, traj: Trajectory) -> None:
    """One row per agent per sample: ``t, agent_id, x1..xn, u1..um, eps, H, delta, switch_flag``."""
    n = max(traj.dims)
    m = max(u.shape[1] for u in traj.u)
    head = ["t", "agent_id"] + [f"x{i + 1}" for i in range(n)] + [f"u{i + 1}" for i in range(m)]
    head += ["eps", "H", "delta", "switch_flag"]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(head)
        for i, t in enumerate(traj.t):
            for k, aid in enumerate(traj.agent_ids):
                xs = traj.x[i, traj.offsets[k] : traj.offsets[k] + traj.dims[k]]
                us = traj.u[k][i]
                row = [_g(t), str(aid)]
                row += [_g(v) for v in xs] + [""] * (n - len(xs))
                row += [_g(v) for v in us] + [""] * (m - len(us))
                row += [_g(traj.eps[i, k]), _g(traj.H[i, k]), _g(traj.delta[k]), str(int(traj.switch_flag[i, k]))]
                w.writerow(row)


def read_csv(path):
    """Rebuild the stacked signal from a trajectory CSV.

    Returns ``(signal, layout)`` with ``layout = [(agent_id, offset, n), ...]``
    in first-appearance order.
    """
    try:
        fh = open(path, newline="")
    except OSError as e:
        raise ConfigError(f"cannot read {path}: {e}") from e
    with fh:
        rows = list(csv.reader(fh))
    if not rows or rows[0][:2] != ["t", "agent_id"]:
        raise ConfigError(f"{path}: missing header row starting with t,agent_id")
    head = rows[0]
    xcols = [i for i, h in enumerate(head) if h.startswith("x") and h[1:].isdigit()]
    order, dims, data = [], {}, {}
    for r in rows[1:]:
        if not r:
            continue
        if len(r) != len(head):
            raise ConfigError(f"{path}: row with {len(r)} fields, header has {len(head)}")
        try:
            t, aid = float(r[0]), int(r[1])
            xs = [float(r[i]) for i in xcols if r[i] != ""]
        except ValueError as e:
            raise ConfigError(f"{path}: {e}") from e
        if aid not in dims:
            order.append(aid)
            dims[aid] = len(xs)
        elif dims[aid] != len(xs):
            raise ConfigError(f"{path}: agent {aid} changes state size")
        data.setdefault(t, {})[aid] = xs
    if not data:
        raise ConfigError(f"{path}: no samples")
    times = sorted(data)
    vals = []
    for t in times:
        if set(data[t]) != set(order):
            raise ConfigError(f"{path}: sample t = {t} is missing agents")
        vals.append(sum((data[t][a] for a in order), []))
    layout, off = [], 0
    for a in order:
        layout.append((a, off, dims[a]))
        off += dims[a]
    return SampledSignal(np.array(times), np.array(vals)), layout


# --------------------------------------------------------------- report


def _thresholds(rep, thr) -> list:
    """``[(name, agent_id, value, limit, passed), ...]`` for every declared threshold."""
    out = []
    for row in rep.agents:
        if "floor" not in row:
            continue
        aid = row["agent_id"]
        if "min_H_after_transient" in thr:
            v = row["min_H_after_transient"]
            out.append(("min_H_after_transient", aid, v, thr["min_H_after_transient"], v >= thr["min_H_after_transient"]))
        if "min_robustness" in thr and "robustness" in row:
            v = row["robustness"]
            out.append(("min_robustness", aid, v, thr["min_robustness"], v >= thr["min_robustness"]))
        if "max_solve_time_median" in thr:
            v = row["solve_time_median"]
            out.append(("max_solve_time_median", aid, v, thr["max_solve_time_median"], v <= thr["max_solve_time_median"]))
        if "max_eps" in thr:
            v = row["eps_max"]
            out.append(("max_eps", aid, v, thr["max_eps"], v <= thr["max_eps"]))
    return out


def format_report(name, rep, checks) -> str:
    lines = [f"scenario: {name}", f"samples: {rep.meta['samples']}  t_end: {rep.meta['t_end']:g} s", ""]
    for row in rep.agents:
        lines.append(f"agent {row['agent_id']} ({row['model']})  x0 = {row['x0']}")
        if "floor" in row:
            est = row["delta_estimate"]
            est_s = f"  (estimate {est:.4f})" if est is not None else ""
            lines += [
                f"  delta_k = {row['delta']:.4f}{est_s}",
                f"  time bound T = {row['time_bound']:.4f} s",
                f"  floor -eps_max = {row['floor']:.4g}",
                f"  min H = {row['min_H']:.4g}   min H after T = {row['min_H_after_transient']:.4g}",
                f"  eps: max {row['eps_max']:.4g}  mean {row['eps_mean']:.4g}  active {100 * row['eps_active_fraction']:.1f}%",
                f"  solve time: median {1e3 * row['solve_time_median']:.3f} ms  max {1e3 * row['solve_time_max']:.3f} ms",
                f"  post-hoc delta condition holds on {100 * row['delta_condition_fraction']:.1f}% of steps",
            ]
            for s in row["switches"]:
                lines.append(
                    f"  switch t = {s['t']:g}: H- = {s['H_left']:.4g}  H+ = {s['H_right']:.4g}  excursion {s['excursion']:.4g}"
                )
        if "robustness" in row:
            verdict = "satisfied" if row["robustness"] >= 0 else "violated"
            lines.append(f"  robustness = {row['robustness']:.6g} ({verdict})")
        lines.append("")
    if checks:
        lines.append("thresholds:")
        for name_, aid, v, lim, ok in checks:
            op = ">=" if name_.startswith("min") else "<="
            lines.append(f"  [{'PASS' if ok else 'FAIL'}] agent {aid} {name_} = {v:.6g} {op} {lim:g}")
    return "\n".join(lines)


# ------------------------------------------------------------- commands


def cmd_run(args) -> int:
    path = args.config
    if not Path(path).exists():
        try:
            path = bundled(path)
        except ConfigError:
            pass
    try:
        scen = build_scenario(path, seed=args.seed)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_INPUT
    try:
        traj, rep = scen.run()
    except (SimulationError, SaturationError, DegeneratePointError, FloatingPointError) as e:
        print(f"simulation error: {e}", file=sys.stderr)
        return EXIT_SIM
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    outputs = scen.cfg.get("outputs", {})
    write_csv(out / outputs.get("csv", "trajectory.csv"), traj)
    checks = _thresholds(rep, scen.thresholds)
    rep.meta.update({
        "scenario": scen.cfg.get("name", str(path)),
        "seed": scen.cfg["sim"].get("seed", 0) if args.seed is None else args.seed,
        "thresholds": [
            {"name": n, "agent_id": a, "value": v, "limit": l, "passed": bool(ok)} for n, a, v, l, ok in checks
        ],
        "profiles": [
            [{"kind": m.kind, "a": m.a, "b": m.b, "gamma0": m.profile.gamma0,
              "gamma_inf": m.profile.gamma_inf, "tstar": m.profile.tstar} for m in ag.controller.spec.members]
            for ag in scen.agents if ag.controller is not None
        ],
    })
    (out / outputs.get("report", "report.json")).write_text(json.dumps(rep.as_dict(), indent=2))
    print(format_report(rep.meta["scenario"], rep, checks))
    return EXIT_OK if all(c[-1] for c in checks) else EXIT_THRESHOLD


def cmd_bounds(args) -> int:
    try:
        p = FxTParams(args.alpha, args.beta, args.delta, args.mu, args.kk)
        T = time_bound(p)
    except (ValueError, ZeroDivisionError) as e:
        print(f"invalid parameters: {e}", file=sys.stderr)
        return EXIT_INPUT
    rows = [
        ("regime", regime(p)),
        ("time bound T", f"{T:.6g} s"),
        ("residual level", f"{residual_level(p):.6g}"),
        ("eps_max", f"{epsilon_max(p):.6g}"),
        ("barrier floor", f"{0.0 - epsilon_max(p):.6g}"),
    ]
    w = max(len(k) for k, _ in rows)
    print(f"alpha={p.alpha:g} beta={p.beta:g} delta={p.delta:g} mu={p.mu:g} kk={p.kk:g}")
    for k, v in rows:
        print(f"  {k:<{w}}  {v}")
    return EXIT_OK


def _read_formulas(path) -> list:
    try:
        text = Path(path).read_text()
    except OSError as e:
        raise ConfigError(f"cannot read {path}: {e}") from e
    out = []
    for i, line in enumerate(text.splitlines(), start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        label, _, body = line.partition(":") if ":" in line else (f"task{len(out) + 1}", "", line)
        out.append((label.strip(), body.strip()))
    if not out:
        raise ConfigError(f"{path}: no formulas")
    return out


def cmd_check(args) -> int:
    try:
        sig, layout = read_csv(args.csv)
        formulas = _read_formulas(args.formula)
        slices = agent_slices(layout)
        rows = []
        for label, text in formulas:
            phi = parse_formula(text, sig.dim, slices)
            rows.append((label, robustness(phi, sig, 0.0)))
    except (ConfigError, FormulaError, HorizonError) as e:
        print(f"input error: {e}", file=sys.stderr)
        return EXIT_INPUT
    for label, r in rows:
        print(f"{label}: robustness = {_g(r)} ({'satisfied' if r >= 0 else 'violated'})")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="tfcbf", description=__doc__.splitlines()[0])
    sub = ap.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", help="simulate a scenario file")
    r.add_argument("config", help="scenario JSON (or the name of a bundled scenario)")
    r.add_argument("--out", default="out", help="output directory")
    r.add_argument("--seed", type=int, default=None, help="override the scenario seed")
    r.set_defaults(func=cmd_run)

    b = sub.add_parser("bounds", help="print fixed-time bounds")
    b.add_argument("--alpha", type=float, required=True)
    b.add_argument("--beta", type=float, required=True)
    b.add_argument("--delta", type=float, required=True)
    b.add_argument("--mu", type=float, required=True)
    b.add_argument("--kk", type=float, default=1.2)
    b.set_defaults(func=cmd_bounds)

    c = sub.add_parser("check", help="robustness of formulas on a trajectory CSV")
    c.add_argument("csv")
    c.add_argument("--formula", required=True, help="file with one formula per line, optionally 'label: formula'")
    c.set_defaults(func=cmd_check)
    return ap


def main(argv=None) -> int:
    ap = build_parser()
    try:
        args = ap.parse_args(argv)
    except SystemExit as e:
        return EXIT_INPUT if e.code else EXIT_OK
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
