"""Scenario runner: control episodes, mid-run reconfiguration and traces.

A scenario file is JSON::

    {
      "id": "s13",
      "feeder": "ieee13.json",          # relative to the scenario file
      "model": "single" | "multi",
      "plant": "linear" | "ac",
      "horizon": 2000,
      "load_scale": 0.8,
      "pv_scale": 1.0,
      "hour": 12,                       # optional clear-day PV profile
      "pv_jitter": 0.0,                 # optional relative noise on PV output
      "seed": 0,
      "v0_squared": 1.1449,             # optional override
      "rules": [{"rule": "pgd", "mu_fraction": 0.1, "mu_bound": "lmax",
                 "restart": "auto", "tol": 1e-8, "label": "pgd"}]
    }

Switch events come from the feeder file. At an event iteration the matrices
are rebuilt for the new topology and the current injections carry over,
clamped to the (unchanged) inverter limits.
"""

from __future__ import annotations

import csv
import io
import json
import math
import time
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .acflow import compare_models
from .control import (ControlConfig, ControlState, Plant, Rule, c2, f2, h2, initial_state,
                      multiphase_step, prox, resolve_mu, step)
from .errors import ConfigError, NumericError, SolverError, ValidationError
from .feeder import Feeder, PvUnit, apply_switch_event, load_feeder, scale_injections
from .lindistflow import build_model

TRACE_COLUMNS = ("scenario", "rule", "t", "bus", "phase", "v", "q",
                 "f2", "c2", "h2", "rel_err", "contraction")
CONVERGED_REL_ERR = 1e-4
ORACLE_TOL = 1e-12
ORACLE_MAX_ITER = 1_000_000


@dataclass(frozen=True)
class RuleSpec:
    label: str
    config: ControlConfig


@dataclass(frozen=True)
class Scenario:
    id: str
    feeder: Feeder
    rules: tuple
    model: str = "single"
    plant: str = "linear"
    horizon: int = 1000
    load_scale: float = 1.0
    pv_scale: float = 1.0
    hour: float | None = None
    pv_jitter: float = 0.0
    seed: int = 0
    v0: float | None = None

    def __post_init__(self):
        if self.horizon < 1:
            raise ConfigError("horizon must be at least 1")
        if self.load_scale < 0 or self.pv_scale < 0 or self.pv_jitter < 0:
            raise ConfigError("scales must be nonnegative")
        if self.model not in ("single", "multi"):
            raise ConfigError(f"unknown model {self.model!r}")
        if self.plant not in ("linear", "ac"):
            raise ConfigError(f"unknown plant {self.plant!r}")
        if not self.rules:
            raise ConfigError("scenario lists no rules")


def clear_day(hour: float) -> float:
    """Normalized clear-sky PV output, zero outside 06:00-18:00."""
    x = (hour - 6.0) / 12.0
    return math.sin(math.pi * x) ** 1.5 if 0.0 < x < 1.0 else 0.0


def _rule_spec(raw: dict, pos: int) -> RuleSpec:
    if not isinstance(raw, dict) or "rule" not in raw:
        raise ConfigError(f"rules[{pos}] needs a 'rule' entry")
    restart = raw.get("restart", "auto")
    if restart == "off":
        restart = None
    droop = raw.get("droop")
    if isinstance(droop, dict):
        droop = (droop["e"], droop["q"])
    try:
        config = ControlConfig(
            rule=Rule(raw["rule"]),
            mu=raw.get("mu"),
            mu_fraction=float(raw.get("mu_fraction", 1.0)),
            mu_bound=raw.get("mu_bound", "lmax"),
            restart_every=restart,
            tol=float(raw.get("tol", 1e-8)),
            droop_curve=droop,
        )
    except ValueError as exc:
        raise ConfigError(f"rules[{pos}]: {exc}") from None
    return RuleSpec(raw.get("label", config.rule.value), config)


def parse_scenario(doc: dict, base_dir: Path | str = ".") -> Scenario:
    if not isinstance(doc, dict):
        raise ConfigError("scenario must be a JSON object")
    try:
        feeder_ref = doc["feeder"]
        rules = doc["rules"]
    except KeyError as exc:
        raise ConfigError(f"scenario is missing {exc.args[0]!r}") from None
    feeder = load_feeder(Path(base_dir) / feeder_ref)
    specs = tuple(_rule_spec(r, k) for k, r in enumerate(rules))
    labels = [s.label for s in specs]
    if len(set(labels)) != len(labels):
        raise ConfigError("rule labels must be unique")
    return Scenario(
        id=str(doc.get("id", Path(feeder_ref).stem)),
        feeder=feeder,
        rules=specs,
        model=doc.get("model", "single"),
        plant=doc.get("plant", "linear"),
        horizon=int(doc.get("horizon", 1000)),
        load_scale=float(doc.get("load_scale", 1.0)),
        pv_scale=float(doc.get("pv_scale", 1.0)),
        hour=doc.get("hour"),
        pv_jitter=float(doc.get("pv_jitter", 0.0)),
        seed=int(doc.get("seed", 0)),
        v0=doc.get("v0_squared"),
    )


def load_scenario(path) -> Scenario:
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except OSError as exc:
        raise ConfigError(f"cannot read scenario {path}: {exc}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"scenario {path} is not valid JSON: {exc}") from None
    return parse_scenario(doc, path.parent)


def operating_feeder(s: Scenario) -> Feeder:
    """Feeder with the scenario's load level, PV output and substation voltage."""
    pv_scale = s.pv_scale * (clear_day(s.hour) if s.hour is not None else 1.0)
    feeder = scale_injections(s.feeder, s.load_scale, pv_scale)
    if s.pv_jitter:
        rng = np.random.default_rng(s.seed)
        buses = []
        for b in feeder.buses:
            pv = {}
            for ph in sorted(b.pv):
                u = b.pv[ph]
                p = float(np.clip(u.p_gen * (1 + s.pv_jitter * rng.standard_normal()), 0, u.capacity_s))
                pv[ph] = PvUnit(u.capacity_s, p, u.cost_c)
            buses.append(replace(b, pv=pv))
        feeder = replace(feeder, buses=tuple(buses))
    if s.v0 is not None:
        feeder = feeder.with_v0(float(s.v0))
    return feeder


# ---------------------------------------------------------------------------
# reference optima
# ---------------------------------------------------------------------------

def best_known_optimum(plant: Plant, tol: float = ORACLE_TOL,
                       max_iter: int = ORACLE_MAX_ITER) -> tuple[np.ndarray, float]:
    """Minimizer of h2 over the capability box by PGD with step 1/lambda_max(X)."""
    mats = plant.mats
    mu = 1.0 / mats.eig.lambda_max
    base = plant.base - plant.v0
    thr = mu * plant.c
    q = np.zeros_like(plant.p)
    for _ in range(max_iter):
        q_next = prox(q - mu * (base + mats.X @ q), thr, plant.qbar)
        delta = np.max(np.abs(q_next - q), initial=0.0)
        q = q_next
        if delta < tol:
            return q, h2(plant, q)
    raise SolverError(f"optimum oracle did not converge in {max_iter} iterations", float(delta))


def coordinate_descent_optimum(plant: Plant, tol: float = 1e-13,
                               max_sweeps: int = 1_000_000) -> np.ndarray:
    """Independent solver: cyclic exact coordinate minimization of h2."""
    if plant.mats.kind != "single":
        raise ValidationError("coordinate descent needs a symmetric single-phase model")
    X = plant.mats.X
    g = plant.base - plant.v0
    q = np.zeros_like(plant.p)
    diag = np.diag(X)
    for _ in range(max_sweeps):
        biggest = 0.0
        for n in range(len(q)):
            grad = g[n] + X[n] @ q
            new = float(prox(q[n] - grad / diag[n], plant.c[n] / diag[n], plant.qbar[n]))
            biggest = max(biggest, abs(new - q[n]))
            q[n] = new
        if biggest < tol:
            return q
    raise SolverError("coordinate descent did not converge", biggest)


# ---------------------------------------------------------------------------
# traces
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class TraceRecord:
    scenario: str
    rule: str
    t: int
    bus: str
    phase: str
    v: float
    q: float
    f2: float
    c2: float
    h2: float
    rel_err: float | None
    contraction: float | None

    def row(self) -> list:
        def num(x):
            return "" if x is None else repr(float(x))
        return [self.scenario, self.rule, self.t, self.bus, self.phase, num(self.v), num(self.q),
                num(self.f2), num(self.c2), num(self.h2), num(self.rel_err), num(self.contraction)]


@dataclass
class RuleOutcome:
    label: str
    mu: float
    iterations: int
    converged: bool
    iterations_to_converge: int | None
    wall_clock: float
    final_rel_err: float | None
    events_applied: list = field(default_factory=list)
    error: str | None = None


@dataclass
class ScenarioResult:
    scenario: Scenario
    records: list
    outcomes: dict
    ac_error: float | None = None

    @property
    def aborted(self) -> bool:
        return any(o.error for o in self.outcomes.values())

    def summary(self) -> dict:
        base = self.outcomes.get("pgd")
        out = {"scenario": self.scenario.id, "model": self.scenario.model,
               "plant": self.scenario.plant, "max_linear_vs_ac_error": self.ac_error, "rules": {}}
        for label, o in self.outcomes.items():
            speedup = None
            if base and base.iterations_to_converge and o.iterations_to_converge:
                speedup = base.iterations_to_converge / o.iterations_to_converge
            out["rules"][label] = {
                "mu": o.mu,
                "iterations": o.iterations,
                "converged": o.converged,
                "iterations_to_converge": o.iterations_to_converge,
                "speedup_vs_pgd": speedup,
                "final_rel_err": o.final_rel_err,
                "wall_clock_s": o.wall_clock,
                "events_applied": o.events_applied,
                "error": o.error,
            }
        return out


def write_trace(records, stream) -> None:
    w = csv.writer(stream, lineterminator="\n")
    w.writerow(TRACE_COLUMNS)
    for rec in records:
        w.writerow(rec.row())


def trace_csv(records) -> str:
    buf = io.StringIO()
    write_trace(records, buf)
    return buf.getvalue()


class _Episode:
    """Plant plus cached reference optimum for one topology."""

    def __init__(self, feeder: Feeder, scenario: Scenario):
        self.feeder = feeder
        mats = build_model(feeder, scenario.model)
        self.plant = Plant.from_feeder(feeder, mats, ac=scenario.plant == "ac")
        self.h_opt = None
        if mats.kind == "single":
            self.h_opt = best_known_optimum(self.plant)[1]

    def rel_err(self, q) -> float | None:
        if self.h_opt is None:
            return None
        return abs(h2(self.plant, q) - self.h_opt) / max(abs(self.h_opt), 1e-300)


def _remap(vec, old_labels, new_labels, fill=0.0):
    lookup = dict(zip(old_labels, vec))
    return np.array([lookup.get(lab, fill) for lab in new_labels], dtype=float)


def run_scenario(s: Scenario, keep_trace: bool = True) -> ScenarioResult:
    """Run every rule of ``s`` under identical injections and events."""
    feeder0 = operating_feeder(s)
    episodes = {frozenset(feeder0.open_lines): _Episode(feeder0, s)}
    events = sorted(feeder0.events, key=lambda e: e.at_iteration)
    records, outcomes, final_q = [], {}, []

    for spec in s.rules:
        ep = episodes[frozenset(feeder0.open_lines)]
        config = spec.config
        mu = resolve_mu(config, ep.plant)
        config = replace(config, mu=mu)
        state = None
        pending = list(events)
        outcome = RuleOutcome(spec.label, mu, 0, False, None, 0.0, None)
        start = time.perf_counter()
        try:
            state = initial_state(ep.plant)
            while True:
                while pending and pending[0].at_iteration <= state.t:
                    ev = pending.pop(0)
                    ep, state = _switch(ep, ev, state, s, episodes)
                    mu = resolve_mu(spec.config, ep.plant)
                    config = replace(config, mu=mu)
                    outcome.events_applied.append(state.t)
                err = ep.rel_err(state.q)
                if keep_trace:
                    records.extend(_records(s.id, spec.label, state, ep, err))
                outcome.final_rel_err = err
                if (err is not None and err < CONVERGED_REL_ERR
                        and outcome.iterations_to_converge is None):
                    outcome.iterations_to_converge = state.t - 1
                if state.t > s.horizon or (state.converged and not pending):
                    break
                state = (multiphase_step if ep.plant.mats.kind == "multi" else step)(
                    state, ep.plant, config)
                if not np.all(np.isfinite(state.q)):
                    raise SolverError("control iterates became non-finite")
        except (NumericError, ValidationError) as exc:
            outcome.error = f"{type(exc).__name__}: {exc}"
        outcome.wall_clock = time.perf_counter() - start
        if state is None:
            outcomes[spec.label] = outcome
            continue
        outcome.iterations = state.t - 1
        outcome.converged = state.converged and outcome.error is None
        if ep.h_opt is None and outcome.converged and outcome.iterations_to_converge is None:
            outcome.iterations_to_converge = outcome.iterations
        outcomes[spec.label] = outcome
        if ep is episodes[frozenset(feeder0.open_lines)]:
            final_q.append(state.q)

    # linear-vs-AC gap at zero control and at each final operating point
    ac_error = None
    first = episodes[frozenset(feeder0.open_lines)].plant
    try:
        ac_error = max(compare_models(first, q).max_error for q in [None, *final_q])
    except NumericError:
        pass
    return ScenarioResult(s, records, outcomes, ac_error)


def _switch(ep: _Episode, ev, state: ControlState, s: Scenario, episodes: dict):
    feeder = apply_switch_event(ep.feeder, ev)
    key = frozenset(feeder.open_lines)
    if key not in episodes:
        episodes[key] = _Episode(feeder, s)
    new = episodes[key]
    old_labels, new_labels = ep.plant.mats.labels, new.plant.mats.labels
    q = _remap(state.q, old_labels, new_labels)
    q = np.clip(q, -new.plant.qbar, new.plant.qbar)
    y_prev = None if state.y_prev is None else _remap(state.y_prev, old_labels, new_labels)
    return new, replace(state, q=q, v=new.plant.voltages(q), y_prev=y_prev,
                        converged=False, dq_2=math.inf, dq_inf=math.inf,
                        contraction=math.nan)


def _records(sid, label, state: ControlState, ep: _Episode, err):
    plant = ep.plant
    cost_f, cost_c = f2(plant, state.q), c2(plant, state.q)
    multi = plant.mats.kind == "multi"
    ratio = state.contraction if multi and math.isfinite(state.contraction) else None
    for k, (bus, ph) in enumerate(plant.mats.labels):
        yield TraceRecord(sid, label, state.t, bus, ph if multi else "-",
                          float(state.v[k]), float(state.q[k]), cost_f, cost_c,
                          cost_f + cost_c, err, ratio)


def run_scenario_file(path, keep_trace: bool = True) -> ScenarioResult:
    return run_scenario(load_scenario(path), keep_trace)


# ---------------------------------------------------------------------------
# divergence probe
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ProbeRow:
    multiplier: float
    mu: float
    outcome: str          # converged / oscillating / diverged
    iterations: int
    final_dq: float

    @property
    def converged(self) -> bool:
        return self.outcome == "converged"


def _classify(dq_tail, q_norm, tol, cap) -> str:
    if q_norm >= cap or not np.all(np.isfinite(dq_tail)):
        return "diverged"
    if dq_tail[-1] < tol:
        return "converged"
    half = len(dq_tail) // 2
    if half and np.mean(dq_tail[half:]) > 2.0 * np.mean(dq_tail[:half]):
        return "diverged"
    return "oscillating"


def divergence_probe(plant: Plant, multipliers, iterations: int = 10_000, tail: int = 100,
                     tol: float = 1e-8, cap: float = 1e6) -> list[ProbeRow]:
    """Run the multiphase proximal rule at ``m * contraction_bound`` for each ``m``."""
    if plant.mats.kind != "multi":
        raise ValidationError("the divergence probe needs a multiphase model")
    bound = plant.mats.eig.contraction_bound
    rows = []
    for m in multipliers:
        mu = float(m) * bound
        config = ControlConfig(rule=Rule.PGD, mu=mu, tol=tol)
        state = initial_state(plant)
        history = []
        q_norm = 0.0
        for _ in range(iterations):
            state = multiphase_step(state, plant, config)
            history.append(state.dq_2)
            q_norm = float(np.linalg.norm(state.q))
            if state.converged or q_norm >= cap or not math.isfinite(q_norm):
                break
        dq_tail = np.array(history[-tail:])
        outcome = "converged" if state.converged else _classify(dq_tail, q_norm, tol, cap)
        rows.append(ProbeRow(float(m), mu, outcome, state.t - 1, float(history[-1])))
    return rows


def transition_multiplier(rows) -> float | None:
    """Smallest probed multiplier at which the rule no longer converges."""
    failing = [r.multiplier for r in rows if not r.converged]
    return min(failing) if failing else None
