"""Scenario files: schema validation and construction of the closed loop."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import jsonschema
import numpy as np

from .barrier import AssumptionError, ProfileOptions, build_barrier
from .fxt import FxTParams
from .qp import Controller
from .sim import Agent, OmniRobotParams, coupling_disturbance, integrator, omni_robot, run_scenario
from .stl import Always, Eventually, FormulaError, Pred, Until, conjuncts, parse_formula

__all__ = ["ConfigError", "Scenario", "load_config", "build_scenario", "bundled", "agent_slices"]


class ConfigError(ValueError):
    """Scenario file is invalid or inconsistent."""


def _schema() -> dict:
    return json.loads(resources.files("tfcbf").joinpath("data/scenario.schema.json").read_text())


def bundled(name: str) -> Path:
    """Path of a scenario shipped with the package, e.g. ``paper_sec4_ab1``."""
    p = resources.files("tfcbf").joinpath("data", name if name.endswith(".json") else name + ".json")
    if not p.is_file():
        raise ConfigError(f"no bundled scenario {name!r}")
    return Path(str(p))


def load_config(source) -> dict:
    """Read (path) or accept (dict) a scenario and validate it against the schema."""
    if isinstance(source, dict):
        cfg = source
    else:
        try:
            cfg = json.loads(Path(source).read_text())
        except OSError as e:
            raise ConfigError(f"cannot read {source}: {e}") from e
        except json.JSONDecodeError as e:
            raise ConfigError(f"{source}: invalid JSON: {e}") from e
    try:
        jsonschema.validate(cfg, _schema())
    except jsonschema.ValidationError as e:
        where = "/".join(str(p) for p in e.absolute_path) or "<root>"
        raise ConfigError(f"schema violation at {where}: {e.message}") from e
    return cfg


def agent_slices(layout) -> dict:
    """``x<id>`` for every agent block and ``p<id>`` for its first two (or one) entries.

    ``layout`` is a list of ``(id, offset, n)``.
    """
    sl = {}
    for aid, off, n in layout:
        sl[f"x{aid}"] = list(range(off, off + n))
        sl[f"p{aid}"] = list(range(off, off + min(n, 2)))
    return sl


@dataclass
class Scenario:
    agents: list
    x0: np.ndarray
    dt: float
    t_end: float
    formulas: dict
    thresholds: dict
    slices: dict
    layout: list
    cfg: dict = field(repr=False, default_factory=dict)
    excursion_window: float = 10.0

    def run(self, progress=None):
        return run_scenario(self.agents, self.x0, self.dt, self.t_end, self.formulas,
                            self.excursion_window, progress)


def _model(a: dict):
    C = float(a.get("coupling_bound", 0.0))
    bounds = {k: np.asarray(a[k], dtype=float) for k in ("lower", "upper") if k in a}
    n0 = len(a["x0"])
    if a["model"] == "omni_robot":
        if n0 != 3:
            raise ConfigError(f"agent {a['id']}: omni_robot needs a 3-entry x0 (px, py, theta)")
        mdl = omni_robot(a["id"], OmniRobotParams(a.get("R", 0.02), a.get("L", 0.2)), C, **bounds)
    else:
        mdl = integrator(a["id"], n0, a.get("gain", 1.0), C, **bounds)
    for k, v in bounds.items():
        if v.shape != (mdl.m,):
            raise ConfigError(f"agent {a['id']}: {k} must have {mdl.m} entries")
    return mdl


def build_scenario(source, seed: int | None = None) -> Scenario:
    """Validate a scenario and assemble agents, barriers and controllers.

    Raises:
        ConfigError: schema, formula, layout or neighbour-set problems.
    """
    cfg = load_config(source)
    ids = [a["id"] for a in cfg["agents"]]
    if len(set(ids)) != len(ids):
        raise ConfigError("agent ids must be unique")
    models, layout, off = [], [], 0
    for a in cfg["agents"]:
        m = _model(a)
        models.append(m)
        layout.append((a["id"], off, m.n))
        off += m.n
    dim = off
    x0 = np.concatenate([np.asarray(a["x0"], dtype=float) for a in cfg["agents"]])
    slices = agent_slices(layout)
    for name, idx in cfg.get("slices", {}).items():
        if max(idx) >= dim:
            raise ConfigError(f"slice {name!r} indexes beyond the state dimension {dim}")
        slices[name] = list(idx)
    owner = np.empty(dim, dtype=int)
    for aid, o, n in layout:
        owner[o : o + n] = aid

    ctl = cfg["controller"]
    base = FxTParams(ctl["alpha"], ctl["beta"], 0.0, ctl["mu"], ctl.get("kk", 1.2))
    sim = cfg["sim"]
    seed = sim.get("seed", 0) if seed is None else seed
    kind = sim.get("disturbance", "zero")

    tasks = {}
    for task in cfg["tasks"]:
        if task["agent"] not in ids:
            raise ConfigError(f"task refers to unknown agent {task['agent']}")
        if task["agent"] in tasks:
            raise ConfigError(f"agent {task['agent']} has more than one task")
        tasks[task["agent"]] = task

    agents, formulas = [], {}
    for k, (a, mdl, (aid, o, n)) in enumerate(zip(cfg["agents"], models, layout)):
        task = tasks.get(aid)
        controller = spec = None
        if task is not None:
            try:
                phi = parse_formula(task["formula"], dim, slices)
            except FormulaError as e:
                raise ConfigError(f"task of agent {aid}: {e}") from e
            spec_cols = sorted({int(c) for c in _columns(phi)})
            used = {int(owner[c]) for c in spec_cols}
            allowed = {aid, *a.get("neighbors", [])}
            if not used <= allowed:
                missing = sorted(used - allowed)
                raise ConfigError(f"task of agent {aid} depends on non-neighbour agents {missing}")
            if aid not in used:
                raise ConfigError(f"task of agent {aid} does not depend on its own state")
            prof = ProfileOptions(**task.get("profile", {}))
            try:
                spec = build_barrier(phi, task.get("eta", 5.0), prof, x0=x0, eta_pred=task.get("eta_pred"),
                                     check=task.get("check_interior", True), seed=seed)
            except (FormulaError, AssumptionError) as e:
                raise ConfigError(f"task of agent {aid}: {e}") from e
            probe = None
            if "delta_probe" in ctl:
                dp = ctl["delta_probe"]
                lo, hi = np.asarray(dp["lower"], float), np.asarray(dp["upper"], float)
                if lo.shape != (spec.n_bar,) or hi.shape != (spec.n_bar,):
                    raise ConfigError(f"delta_probe box must have {spec.n_bar} entries for agent {aid}")
                probe = {"domain": (lo, hi), "times": dp["times"], "samples": dp.get("samples", 4096)}
            delta = ctl.get("delta")
            if delta is None and probe is None:
                raise ConfigError("controller needs either delta or delta_probe")
            controller = Controller(spec, mdl, base, o, mdl.coupling_bound, delta, probe)
            formulas[k] = phi
        coupling = coupling_disturbance(kind, mdl.coupling_bound, seed + k, n, spec, o) \
            if (kind != "worst-case-radial" or spec is not None) else None
        agents.append(Agent(mdl, o, controller, coupling))

    return Scenario(agents, x0, float(sim["dt"]), float(sim["t_end"]), formulas,
                    dict(cfg.get("thresholds", {})), slices, layout, cfg,
                    float(sim.get("excursion_window", 10.0)))


def _columns(phi):
    out = []

    def walk(node):
        if isinstance(node, Pred):
            out.extend(node.predicate.columns())
        elif isinstance(node, (Always, Eventually)):
            walk(node.child)
        elif isinstance(node, Until):
            walk(node.left)
            walk(node.right)
        else:
            for c in conjuncts(node):
                if c is not node:
                    walk(c)

    walk(phi)
    return out
