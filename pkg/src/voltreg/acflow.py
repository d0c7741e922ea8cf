"""Forward-backward sweep AC power flow for radial multiphase feeders.

Used as ground truth for the linear model. Loads and PV are constant-power
injections per (bus, phase); every solve starts flat from the substation
voltage replicated with 0 / -120 / +120 degree angles.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .errors import SolverError, ValidationError
from .feeder import PHASE_INDEX, Feeder

AC_TOL = 1e-10
MAX_SWEEPS = 200
COLLAPSE = 1e-3


@dataclass(frozen=True)
class AcSolution:
    voltages: np.ndarray     # (N+1, 3) complex, bus-major, zero on unserved phases
    currents: np.ndarray     # (N+1, 3) complex; row n is line n, row 0 unused
    pairs: tuple
    v: np.ndarray            # |V|^2 for ``pairs``
    iterations: int
    mismatch: float


def _served_mask(feeder: Feeder) -> np.ndarray:
    mask = np.zeros((feeder.N + 1, 3), dtype=bool)
    for b in feeder.buses:
        for ph in b.phases:
            mask[b.index, PHASE_INDEX[ph]] = True
    return mask


def solve_ac(feeder: Feeder, p, q, pairs=None, tol: float = AC_TOL,
             max_sweeps: int = MAX_SWEEPS) -> AcSolution:
    """Solve the nonlinear branch flow equations for injections ``p + jq``.

    ``p`` and ``q`` are per-unit injections (generation positive) aligned with
    ``pairs`` (default: ``feeder.served_pairs()``).
    """
    pairs = tuple(feeder.served_pairs() if pairs is None else pairs)
    p = np.asarray(p, dtype=float)
    q = np.asarray(q, dtype=float)
    if p.shape != (len(pairs),) or q.shape != (len(pairs),):
        raise ValidationError("injection vectors do not match the served pairs")
    N = feeder.N
    mask = _served_mask(feeder)
    s = np.zeros((N + 1, 3), dtype=complex)
    for k, (n, ph) in enumerate(pairs):
        if not mask[n, PHASE_INDEX[ph]]:
            raise ValidationError(f"bus {n} does not serve phase {ph}")
        s[n, PHASE_INDEX[ph]] = p[k] + 1j * q[k]

    parent = np.array(feeder.parent)
    Z = np.zeros((N + 1, 3, 3), dtype=complex)
    for n in range(1, N + 1):
        Z[n] = feeder.line(n).z

    rot = np.exp(-2j * np.pi / 3 * np.arange(3))
    V = np.where(mask, np.sqrt(feeder.v0) * rot[None, :], 0.0)
    V[0] = np.sqrt(feeder.v0) * rot
    J = np.zeros((N + 1, 3), dtype=complex)
    mismatch = np.inf
    for sweep in range(1, max_sweeps + 1):
        # backward: line currents from injected currents
        inj = np.zeros_like(V)
        np.divide(s, V, out=inj, where=mask)
        inj = np.conj(inj)
        J = -inj
        for n in range(N, 0, -1):
            if parent[n] > 0:
                J[parent[n]] += J[n]
        # forward: voltage drops along each line
        V_new = V.copy()
        for n in range(1, N + 1):
            V_new[n] = np.where(mask[n], V_new[parent[n]] - Z[n] @ J[n], 0.0)
        if not np.all(np.isfinite(V_new)):
            raise SolverError("voltage iterates became non-finite", mismatch)
        if np.any(np.abs(V_new[mask]) < COLLAPSE):
            raise SolverError("voltage collapse during the sweep", mismatch)
        mismatch = float(np.max(np.abs(V_new - V)))
        V = V_new
        if mismatch < tol:
            break
    else:
        raise SolverError(f"no convergence after {max_sweeps} sweeps (last update {mismatch:.3e})",
                          mismatch)

    # currents consistent with the final voltages
    inj = np.zeros_like(V)
    np.divide(s, V, out=inj, where=mask)
    J = -np.conj(inj)
    for n in range(N, 0, -1):
        if parent[n] > 0:
            J[parent[n]] += J[n]
    v = np.array([abs(V[n, PHASE_INDEX[ph]]) ** 2 for n, ph in pairs])
    return AcSolution(V, J, pairs, v, sweep, mismatch)


def power_balance_residual(feeder: Feeder, sol: AcSolution, p, q) -> float:
    """Max |s_n - (sum_k S_k - S_n + (Z_n i_n) * conj(i_n))| over served pairs.

    ``S_n`` is the flow sent into line ``n`` from the parent bus.
    """
    V, J = sol.voltages, sol.currents
    parent = feeder.parent
    N = feeder.N
    S = np.zeros_like(V)
    loss = np.zeros_like(V)
    for n in range(1, N + 1):
        S[n] = V[parent[n]] * np.conj(J[n])
        loss[n] = (feeder.line(n).z @ J[n]) * np.conj(J[n])
    out = np.zeros_like(V)
    for n in range(1, N + 1):
        if parent[n] > 0:
            out[parent[n]] += S[n]
    worst = 0.0
    for k, (n, ph) in enumerate(sol.pairs):
        i = PHASE_INDEX[ph]
        s_n = p[k] + 1j * q[k]
        balance = out[n, i] - S[n, i] + loss[n, i]
        worst = max(worst, abs(s_n - balance))
    return worst


@dataclass(frozen=True)
class ComparisonReport:
    labels: tuple
    v_linear: np.ndarray
    v_ac: np.ndarray

    @property
    def errors(self) -> np.ndarray:
        return np.abs(self.v_linear - self.v_ac)

    @property
    def max_error(self) -> float:
        return float(self.errors.max(initial=0.0))

    @property
    def mean_error(self) -> float:
        return float(self.errors.mean()) if self.errors.size else 0.0

    def to_dict(self) -> dict:
        return {
            "max_abs_error": self.max_error,
            "mean_abs_error": self.mean_error,
            "entries": [
                {"bus": lab, "phase": ph, "v_linear": float(a), "v_ac": float(b), "abs_error": float(e)}
                for (lab, ph), a, b, e in zip(self.labels, self.v_linear, self.v_ac, self.errors)
            ],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1)

    @classmethod
    def from_dict(cls, doc: dict) -> "ComparisonReport":
        entries = doc["entries"]
        return cls(tuple((e["bus"], e["phase"]) for e in entries),
                   np.array([e["v_linear"] for e in entries]),
                   np.array([e["v_ac"] for e in entries]))


def compare_models(plant, q=None) -> ComparisonReport:
    """Linear versus AC squared voltage magnitudes at controllable injection ``q``."""
    q = np.zeros_like(plant.p) if q is None else np.asarray(q, dtype=float)
    v_lin = plant.linear_voltages(q)
    sol = solve_ac(plant.feeder, plant.p, plant.q_fixed + q, pairs=plant.mats.pairs)
    return ComparisonReport(plant.mats.labels, v_lin, sol.v)
