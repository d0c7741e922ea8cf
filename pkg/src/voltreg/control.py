"""Local reactive-power control rules.

Every rule is a synchronous update: bus (phase) ``n`` reads its own squared
voltage ``v_n^t`` and its own memory, and sets its next injection ``q_n^{t+1}``.
The grid response to the injections comes from a ``Plant``.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field, replace
from functools import cached_property
from typing import Callable, Sequence

import numpy as np

from .acflow import solve_ac
from .errors import ConfigError, StateError, ValidationError
from .feeder import Feeder, PvUnit, to_single_phase
from .lindistflow import GridMatrices, analytic_inverses


class Rule(str, enum.Enum):
    UNCONSTRAINED = "unconstrained"
    PROJECTED = "projected"
    PGD = "pgd"
    DPGD = "dpgd"
    APGD = "apgd"
    IEEE1547 = "ieee1547"


MU_BOUNDS = ("conservative", "lmax", "contraction")


@dataclass(frozen=True)
class ControlConfig:
    """Rule selection and step-size policy.

    The step is ``mu`` when given, otherwise ``mu_fraction * bound`` with
    ``bound`` one of ``conservative`` (2 lambda_min / lambda_max^2, or its
    multiphase analogue 2 lambda_min(X_x) / lambda_max(X^T X)), ``lmax``
    (1 / lambda_max) or ``contraction`` (largest step keeping
    ||I - mu X||_2 < 1). ``restart_every`` is ``"auto"`` (ceil(2 sqrt(kappa))), an
    integer, or ``None`` for no restart.
    """

    rule: Rule = Rule.PGD
    mu: float | None = None
    mu_fraction: float = 1.0
    mu_bound: str = "lmax"
    restart_every: int | str | None = "auto"
    tol: float = 1e-8
    max_iter: int = 10_000
    scaling: np.ndarray | None = None
    droop_curve: object = None

    def __post_init__(self):
        object.__setattr__(self, "rule", Rule(self.rule))
        if self.mu is not None and not self.mu > 0:
            raise ConfigError("step size must be positive")
        if not self.mu_fraction > 0:
            raise ConfigError("mu_fraction must be positive")
        if self.mu_bound not in MU_BOUNDS:
            raise ConfigError(f"unknown step-size bound {self.mu_bound!r}")
        r = self.restart_every
        if not (r is None or r == "auto" or (isinstance(r, int) and r >= 1)):
            raise ConfigError(f"invalid restart policy {r!r}")
        if self.scaling is not None and np.any(np.asarray(self.scaling) <= 0):
            raise ConfigError("diagonal scaling must be positive")


@dataclass(frozen=True)
class ControlState:
    t: int
    q: np.ndarray
    v: np.ndarray
    y_prev: np.ndarray | None = None
    beta: float = 0.0
    converged: bool = False
    dq_inf: float = math.inf
    dq_2: float = math.inf
    contraction: float = math.nan


# ---------------------------------------------------------------------------
# plant
# ---------------------------------------------------------------------------

def capability_limits(units: Sequence[PvUnit | None]) -> np.ndarray:
    """Reactive limits sqrt(s^2 - p^2); zero where there is no PV."""
    out = np.zeros(len(units))
    for k, u in enumerate(units):
        if u is None:
            continue
        if u.p_gen > u.capacity_s * (1 + 1e-12):
            raise ValidationError("PV active output exceeds its apparent power rating")
        out[k] = u.q_limit
    return out


@dataclass(frozen=True)
class Plant:
    """Linear (or AC) grid response ``v(q)`` for controllable injections ``q``.

    ``p`` and ``q_fixed`` are the uncontrolled injections per served pair;
    the total reactive injection is ``q_fixed + q``.
    """

    mats: GridMatrices
    p: np.ndarray
    q_fixed: np.ndarray
    qbar: np.ndarray
    c: np.ndarray
    v0: float
    feeder: Feeder | None = None
    ac: bool = False

    @classmethod
    def from_feeder(cls, feeder: Feeder, mats: GridMatrices, ac: bool = False) -> "Plant":
        if mats.kind == "single" and any(b.phases != ("a",) for b in feeder.buses):
            feeder = to_single_phase(feeder)
        by_label = {b.id: b for b in feeder.buses}
        p, q, units, costs = [], [], [], []
        for label, ph in mats.labels:
            bus = by_label[label]
            pi, qi = bus.injection(ph)
            p.append(pi)
            q.append(qi)
            unit = bus.pv.get(ph)
            units.append(unit)
            costs.append(unit.cost_c if unit else 0.0)
        return cls(mats, np.array(p), np.array(q), capability_limits(units),
                   np.array(costs), feeder.v0, feeder, ac)

    @cached_property
    def base(self) -> np.ndarray:
        """Voltages with zero controllable injection."""
        return self.mats.R @ self.p + self.mats.X @ self.q_fixed + self.v0

    def voltages(self, q: np.ndarray) -> np.ndarray:
        if self.ac:
            return solve_ac(self.feeder, self.p, self.q_fixed + q, pairs=self.mats.pairs).v
        return self.base + self.mats.X @ q

    def linear_voltages(self, q: np.ndarray) -> np.ndarray:
        return self.base + self.mats.X @ q

    @cached_property
    def X_inv(self) -> np.ndarray:
        if self.mats.kind == "single":
            return analytic_inverses(self.mats)[1]
        return np.linalg.inv(self.mats.X_x)

    @cached_property
    def dpgd_scaling(self) -> np.ndarray:
        return 1.0 / np.diag(self.mats.X)

    def scaled_lambda_max(self, d: np.ndarray) -> float:
        s = np.sqrt(d)
        Xs = s[:, None] * self.mats.X * s[None, :]
        return float(np.linalg.eigvalsh((Xs + Xs.T) / 2)[-1])


# ---------------------------------------------------------------------------
# costs
# ---------------------------------------------------------------------------

def f2(plant: Plant, q: np.ndarray) -> float:
    """Rotated-norm voltage deviation cost 0.5 (v - v0)^T X^{-1} (v - v0).

    For multiphase models the symmetric part X_x stands in for X.
    """
    d = plant.linear_voltages(q) - plant.v0
    return 0.5 * float(d @ plant.X_inv @ d)


def f2_drops(plant: Plant, q: np.ndarray) -> float:
    """Same cost written over line voltage drops: (1/4) sum (v_parent - v_n)^2 / x_n."""
    mats = plant.mats
    v = plant.linear_voltages(q)
    drops = mats.A @ v + mats.a0 * plant.v0
    return 0.25 * float(np.sum(drops**2 / mats.x))


def c2(plant: Plant, q: np.ndarray) -> float:
    return float(np.sum(plant.c * np.abs(q)))


def h2(plant: Plant, q: np.ndarray) -> float:
    return f2(plant, q) + c2(plant, q)


def f1(plant: Plant, q: np.ndarray) -> float:
    d = plant.linear_voltages(q) - plant.v0
    return 0.5 * float(d @ d)


# ---------------------------------------------------------------------------
# closed form and proximal operator
# ---------------------------------------------------------------------------

def closed_form_qstar(mats: GridMatrices, p: np.ndarray, check: bool = True):
    """Unconstrained minimizer of 0.5 ||R p + X q||^2.

    Returns ``(q_solve, q_flow)``: the dense solve of -X^{-1} R p and the
    form built from line flows P = -F^T p, namely -A^T diag(r/x) P.
    """
    if mats.kind != "single":
        raise ValidationError("the closed-form minimizer exists only for single-phase models")
    p = np.asarray(p, dtype=float)
    q_solve = -np.linalg.solve(mats.X, mats.R @ p)
    P = -mats.F.T @ p
    q_flow = -mats.A.T @ ((mats.r / mats.x) * P)
    if check:
        scale = max(1.0, np.max(np.abs(q_solve)))
        if np.max(np.abs(q_solve - q_flow)) > 1e-10 * scale:
            raise ValidationError("closed-form minimizer: solve and flow forms disagree")
        resid = mats.R @ p + mats.X @ q_solve
        if np.max(np.abs(resid)) > 1e-10 * scale:
            raise ValidationError("closed-form minimizer does not restore v0")
    return q_solve, q_flow


def prox_scalar(y: float, mu: float, c: float, qbar: float) -> float:
    """argmin over |w| <= qbar of mu c |w| + (w - y)^2 / 2."""
    thr = mu * c
    if y > qbar + thr:
        return qbar
    if y > thr:
        return y - thr
    if y >= -thr:
        return 0.0
    if y >= -qbar - thr:
        return y + thr
    return -qbar


def prox(y, threshold, qbar):
    """Vectorized soft-threshold by ``threshold`` followed by clamping to ``[-qbar, qbar]``."""
    y = np.asarray(y, dtype=float)
    return np.sign(y) * np.minimum(np.maximum(np.abs(y) - threshold, 0.0), qbar)


def beta_schedule(t: int, restart_every: int | None = None) -> float:
    """Momentum weight (t' - 1) / (t' + 2), t' counted from the last restart."""
    if t < 1:
        raise ValidationError("iteration index starts at 1")
    if restart_every:
        t = (t - 1) % restart_every + 1
    return (t - 1) / (t + 2)


# ---------------------------------------------------------------------------
# step-size resolution
# ---------------------------------------------------------------------------

def restart_window(config: ControlConfig, mats: GridMatrices) -> int | None:
    if config.restart_every == "auto":
        return max(1, math.ceil(2 * math.sqrt(mats.eig.kappa)))
    return config.restart_every


def resolve_mu(config: ControlConfig, plant: Plant) -> float:
    if config.mu is not None:
        return config.mu
    eig = plant.mats.eig
    if config.mu_bound == "conservative":
        bound = eig.conservative_bound if plant.mats.kind == "single" else eig.conservative_bound_multi
    elif config.mu_bound == "contraction":
        bound = eig.contraction_bound
    elif config.rule is Rule.DPGD:
        bound = 1.0 / plant.scaled_lambda_max(dpgd_weights(config, plant))
    else:
        bound = eig.lmax_bound
    return config.mu_fraction * bound


def dpgd_weights(config: ControlConfig, plant: Plant) -> np.ndarray:
    if config.scaling is not None:
        d = np.asarray(config.scaling, dtype=float)
        if d.shape != plant.p.shape:
            raise ConfigError("scaling vector has the wrong length")
        return d
    return plant.dpgd_scaling


def default_droop(mu: float) -> Callable:
    """Deadband/saturation droop q = S(mu (v0 - v)) with threshold mu c."""
    def curve(e, c, qbar):
        return prox(mu * np.asarray(e), mu * c, qbar)
    return curve


def droop_from_points(e_points, q_fractions) -> Callable:
    """Piecewise-linear droop through (voltage error, q / qbar) breakpoints."""
    e_points = np.asarray(e_points, dtype=float)
    q_fractions = np.asarray(q_fractions, dtype=float)
    if e_points.shape != q_fractions.shape or e_points.ndim != 1 or len(e_points) < 2:
        raise ConfigError("droop curve needs matching breakpoint lists")
    if np.any(np.diff(e_points) <= 0) or np.any(np.diff(q_fractions) < 0):
        raise ConfigError("droop curve must be nondecreasing")

    def curve(e, c, qbar):
        return qbar * np.interp(e, e_points, q_fractions)
    return curve


def resolve_droop(config: ControlConfig, mu: float) -> Callable:
    curve = config.droop_curve
    if curve is None:
        raise ConfigError("the IEEE 1547 rule needs a droop curve")
    if isinstance(curve, str):
        if curve != "default":
            raise ConfigError(f"unknown droop curve {curve!r}")
        return default_droop(mu)
    if callable(curve):
        return curve
    try:
        e_points, q_fractions = curve
    except (TypeError, ValueError):
        raise ConfigError("droop curve must be 'default', a callable or (e, q/qbar) lists") from None
    return droop_from_points(e_points, q_fractions)


# ---------------------------------------------------------------------------
# iteration
# ---------------------------------------------------------------------------

def initial_state(plant: Plant, q0: np.ndarray | None = None) -> ControlState:
    q = np.zeros_like(plant.p) if q0 is None else np.asarray(q0, dtype=float).copy()
    return ControlState(t=1, q=q, v=plant.voltages(q))


def step(state: ControlState, plant: Plant, config: ControlConfig) -> ControlState:
    if state.q.shape != plant.p.shape:
        raise StateError("control state does not match the model dimension")
    rule = config.rule
    mu = resolve_mu(config, plant)
    q, dev = state.q, state.v - plant.v0
    y_prev, beta = state.y_prev, 0.0

    if rule is Rule.UNCONSTRAINED:
        q_next = q - mu * dev
    elif rule is Rule.PROJECTED:
        q_next = np.clip(q - mu * dev, -plant.qbar, plant.qbar)
    elif rule is Rule.PGD:
        q_next = prox(q - mu * dev, mu * plant.c, plant.qbar)
    elif rule is Rule.DPGD:
        d = dpgd_weights(config, plant)
        q_next = prox(q - mu * d * dev, mu * d * plant.c, plant.qbar)
    elif rule is Rule.APGD:
        y = q - mu * dev
        beta = beta_schedule(state.t, restart_window(config, plant.mats))
        if beta and y_prev is None:
            raise StateError("accelerated rule needs the previous y")
        y_tilde = y if not beta else (1 + beta) * y - beta * y_prev
        q_next = prox(y_tilde, mu * plant.c, plant.qbar)
        y_prev = y
    elif rule is Rule.IEEE1547:
        curve = resolve_droop(config, mu)
        q_next = np.asarray(curve(-dev, plant.c, plant.qbar), dtype=float)
    else:  # pragma: no cover
        raise ConfigError(f"unsupported rule {rule}")

    v_next = plant.voltages(q_next)
    dq = q_next - q
    dq_inf = float(np.max(np.abs(dq), initial=0.0))
    dq_2 = float(np.linalg.norm(dq))
    ratio = dq_2 / state.dq_2 if math.isfinite(state.dq_2) and state.dq_2 > 0 else math.nan
    return ControlState(t=state.t + 1, q=q_next, v=v_next, y_prev=y_prev, beta=beta,
                        converged=dq_inf < config.tol, dq_inf=dq_inf, dq_2=dq_2,
                        contraction=ratio)


def multiphase_step(state: ControlState, plant: Plant, config: ControlConfig) -> ControlState:
    """Proximal update on a multiphase model; ``contraction`` holds
    ||q^{t+1} - q^t||_2 / ||q^t - q^{t-1}||_2."""
    if plant.mats.kind != "multi":
        raise ValidationError("multiphase_step needs a multiphase model")
    if config.rule is not Rule.PGD:
        config = replace(config, rule=Rule.PGD)
    return step(state, plant, config)


@dataclass
class RunResult:
    states: list = field(default_factory=list)

    @property
    def final(self) -> ControlState:
        return self.states[-1]

    @property
    def iterations(self) -> int:
        return self.final.t - 1

    @property
    def converged(self) -> bool:
        return self.final.converged


def run(plant: Plant, config: ControlConfig, q0=None, max_iter: int | None = None,
        keep: bool = True) -> RunResult:
    """Iterate ``step`` until ``||dq||_inf < tol`` or the iteration cap."""
    limit = config.max_iter if max_iter is None else max_iter
    config = replace(config, mu=resolve_mu(config, plant))
    state = initial_state(plant, q0)
    result = RunResult([state])
    for _ in range(limit):
        state = step(state, plant, config)
        if keep:
            result.states.append(state)
        else:
            result.states[-1:] = [state]
        if state.converged:
            break
    return result


def fixed_point_residual(plant: Plant, q: np.ndarray, mu: float) -> float:
    """||q - prox(q - mu (v(q) - v0))||_inf for the multiphase proximal rule."""
    y = q - mu * (plant.voltages(q) - plant.v0)
    return float(np.max(np.abs(q - prox(y, mu * plant.c, plant.qbar))))
