"""LinDistFlow matrices for single-phase and multiphase radial feeders.

Single-phase:  v = R p + X q + v0 1, with R = 2 F diag(r) F^T, X = 2 F diag(x) F^T
and F = -A^{-1}.

Multiphase (bus-major stacking of served (bus, phase) pairs):
v = R p + X q + v0 1, with R = 2 M bdiag(Re Zt_n) M^T, X = 2 M bdiag(Im Zt_n) M^T,
M = T (I3 kron F) T^T and Zt_n = diag(conj(alpha)) Z_n diag(alpha).
Pairs of non-served phases are dropped from every matrix.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import asdict, dataclass, field, replace

import numpy as np
from scipy.linalg import solve_triangular

from .errors import LookupFailure, ModelError, NumericError, ValidationError
from .feeder import PHASE_INDEX, PHASES, Feeder, to_single_phase

ALPHA = np.exp(-2j * np.pi / 3)
ALPHA_VEC = np.array([1.0, ALPHA, ALPHA**2])
SQRT3_2 = math.sqrt(3) / 2

# ordered phase pairs for which an injection lowers the other phase's voltage
PRECEDING = {("a", "b"), ("b", "c"), ("c", "a")}


@dataclass(frozen=True)
class IncidencePair:
    A: np.ndarray
    a0: np.ndarray

    @property
    def full(self) -> np.ndarray:
        return np.column_stack([self.a0, self.A])


@dataclass(frozen=True)
class EigenSummary:
    lambda_min: float
    lambda_max: float
    kappa: float
    lambda_max_XtX: float
    conservative_bound: float
    conservative_bound_multi: float
    contraction_bound: float

    @property
    def lmax_bound(self) -> float:
        return 1.0 / self.lambda_max

    def to_dict(self) -> dict:
        out = asdict(self)
        out["lmax_bound"] = self.lmax_bound
        return out


@dataclass(frozen=True)
class GridMatrices:
    kind: str                      # "single" or "multi"
    A: np.ndarray
    a0: np.ndarray
    F: np.ndarray
    R: np.ndarray
    X: np.ndarray
    pairs: tuple                   # served (bus index, phase), bus-major
    labels: tuple                  # matching (bus id, phase)
    eig: EigenSummary
    r: np.ndarray | None = None    # single-phase line parameters
    x: np.ndarray | None = None
    X_x: np.ndarray | None = None  # multiphase symmetric / anti-symmetric parts
    X_r: np.ndarray | None = None
    T: np.ndarray | None = None
    M: np.ndarray | None = None
    ztilde: np.ndarray | None = None   # (N, 3, 3) complex, multiphase only
    warnings: tuple = field(default=())

    @property
    def size(self) -> int:
        return len(self.pairs)

    def position(self, bus: int, phase: str) -> int:
        try:
            return self.pairs.index((bus, phase))
        except ValueError:
            raise LookupFailure(f"bus {bus} phase {phase} is not served") from None

    def to_dict(self) -> dict:
        def arr(a):
            return None if a is None else np.asarray(a).tolist()

        return {
            "kind": self.kind,
            "phase_mask": [{"bus": lab, "index": int(i), "phase": ph}
                           for (i, ph), (lab, _) in zip(self.pairs, self.labels)],
            "F": arr(self.F),
            "R": arr(self.R),
            "X": arr(self.X),
            "X_x": arr(self.X_x),
            "X_r": arr(self.X_r),
            "eig": self.eig.to_dict(),
            "warnings": list(self.warnings),
        }


# ---------------------------------------------------------------------------
# incidence and F
# ---------------------------------------------------------------------------

def build_incidence(tree) -> IncidencePair:
    """Reduced branch-bus incidence matrix.

    ``tree`` is a canonical ``Feeder`` or a parent sequence ``parent[n]`` for
    ``n = 0..N`` (entry 0 ignored). Row ``n`` (line ``n``) has +1 at the parent
    column and -1 at column ``n``; the feeder column is returned separately.
    """
    parent = tree.parent if isinstance(tree, Feeder) else tuple(tree)
    N = len(parent) - 1
    A = np.zeros((N, N))
    a0 = np.zeros(N)
    for n in range(1, N + 1):
        p = parent[n]
        if not 0 <= p < n:
            raise ValidationError(f"bus {n}: parent {p} violates canonical numbering")
        A[n - 1, n - 1] = -1.0
        if p == 0:
            a0[n - 1] = 1.0
        else:
            A[n - 1, p - 1] = 1.0
    return IncidencePair(A, a0)


def build_F(inc: IncidencePair) -> np.ndarray:
    A = inc.A
    N = A.shape[0]
    if np.any(np.triu(A, 1) != 0):
        raise ModelError("incidence matrix is not lower triangular")
    if np.any(np.diag(A) == 0):
        raise ModelError("incidence matrix is singular")
    F = -solve_triangular(A, np.eye(N), lower=True)
    if F.min(initial=0.0) < -1e-12:
        raise ModelError("F has negative entries")
    if np.max(np.abs(F @ inc.a0 - 1.0), initial=0.0) > 1e-12:
        raise ModelError("F a0 differs from the all-ones vector")
    return F


def path_matrix(parent) -> np.ndarray:
    """F by path enumeration: entry (n, k) is 1 iff line k is on the feeder-to-n path."""
    N = len(parent) - 1
    F = np.zeros((N, N))
    for n in range(1, N + 1):
        k = n
        while k != 0:
            F[n - 1, k - 1] = 1.0
            k = parent[k]
    return F


# ---------------------------------------------------------------------------
# eigen summaries
# ---------------------------------------------------------------------------

def contraction_bound(X: np.ndarray) -> float:
    """Largest step for which ||I - mu X||_2 < 1 is guaranteed.

    With X X^T = U L U^T this is lambda_min(L^{-1/2} U^T (X + X^T) U L^{-1/2}).
    """
    lam, U = np.linalg.eigh(X @ X.T)
    if lam.min() <= 0:
        raise NumericError("X X^T is singular")
    W = U / np.sqrt(lam)
    B = W.T @ (X + X.T) @ W
    return float(np.linalg.eigvalsh((B + B.T) / 2).min())


def eigen_summary(X: np.ndarray, X_sym: np.ndarray | None = None) -> EigenSummary:
    """Spectral quantities that set the admissible step sizes.

    ``X_sym`` defaults to the symmetric part of ``X``; ``kappa`` and the
    extreme eigenvalues refer to it.
    """
    X = np.asarray(X, dtype=float)
    if X_sym is None:
        X_sym = (X + X.T) / 2
    try:
        lam = np.linalg.eigvalsh(X_sym)
        lam_xtx = np.linalg.eigvalsh(X.T @ X)
    except np.linalg.LinAlgError as exc:
        raise NumericError(f"eigensolver failed: {exc}") from None
    lmin, lmax = float(lam[0]), float(lam[-1])
    lmax_xtx = float(lam_xtx[-1])
    return EigenSummary(
        lambda_min=lmin,
        lambda_max=lmax,
        kappa=lmax / lmin if lmin > 0 else math.inf,
        lambda_max_XtX=lmax_xtx,
        conservative_bound=2 * lmin / lmax**2,
        conservative_bound_multi=2 * lmin / lmax_xtx,
        contraction_bound=contraction_bound(X),
    )


# ---------------------------------------------------------------------------
# single phase
# ---------------------------------------------------------------------------

def line_parameters(feeder: Feeder) -> tuple[np.ndarray, np.ndarray]:
    """Per-line (r, x) of a single-phase feeder, indexed by child bus."""
    z = np.array([feeder.line(n).z[0, 0] for n in range(1, feeder.N + 1)])
    return z.real.copy(), z.imag.copy()


def build_single_phase(inc: IncidencePair, r, x, F=None) -> GridMatrices:
    r = np.asarray(r, dtype=float)
    x = np.asarray(x, dtype=float)
    if np.any(r <= 0) or np.any(x <= 0):
        raise ValidationError("line resistances and reactances must be positive")
    if F is None:
        F = build_F(inc)
    R = 2 * (F * r) @ F.T
    X = 2 * (F * x) @ F.T
    N = len(r)
    pairs = tuple((n, "a") for n in range(1, N + 1))
    labels = tuple((str(n), "a") for n in range(1, N + 1))
    return GridMatrices("single", inc.A, inc.a0, F, R, X, pairs, labels,
                        eigen_summary(X), r=r, x=x)


def single_phase_model(feeder: Feeder) -> GridMatrices:
    if any(len(b.phases) != 1 or b.phases != ("a",) for b in feeder.buses):
        feeder = to_single_phase(feeder)
    inc = build_incidence(feeder)
    r, x = line_parameters(feeder)
    mats = build_single_phase(inc, r, x)
    labels = tuple((b.id, "a") for b in feeder.buses[1:])
    return _relabel(mats, labels)


def analytic_inverses(mats: GridMatrices) -> tuple[np.ndarray, np.ndarray]:
    """R^{-1} and X^{-1} as (1/2) A^T diag(1/r) A and (1/2) A^T diag(1/x) A."""
    A = mats.A
    return 0.5 * A.T @ (A / mats.r[:, None]), 0.5 * A.T @ (A / mats.x[:, None])


# ---------------------------------------------------------------------------
# multiphase
# ---------------------------------------------------------------------------

def build_T(N: int) -> np.ndarray:
    """Permutation taking phase-major stacking to bus-major stacking."""
    if N < 1:
        raise ValidationError("need at least one bus")
    E = np.eye(N)
    return np.vstack([np.kron(np.eye(3), E[n][None, :]) for n in range(N)])


def build_ztilde(z: np.ndarray, phases=PHASES):
    """Rotated impedance diag(conj(alpha)) Z diag(alpha) and Im-part split.

    Returns ``(Zt, Xt, Rt)`` restricted to ``phases`` where ``Xt`` is the
    symmetric part built from reactances and ``Rt`` the anti-symmetric part
    built from mutual resistances; ``Im(Zt) == Xt + Rt``.
    """
    z = np.asarray(z, dtype=complex)
    Zt = np.conj(ALPHA_VEC)[:, None] * z * ALPHA_VEC[None, :]
    r, x = z.real, z.imag
    Xt = -x / 2
    np.fill_diagonal(Xt, np.diag(x))
    sign = np.array([[0, -1, 1], [1, 0, -1], [-1, 1, 0]])
    Rt = SQRT3_2 * sign * r
    idx = [PHASE_INDEX[ph] for ph in phases]
    sub = np.ix_(idx, idx)
    return Zt[sub], Xt[sub], Rt[sub]


def multiphase_model(feeder: Feeder) -> GridMatrices:
    inc = build_incidence(feeder)
    F = build_F(inc)
    N = feeder.N
    T = build_T(N)
    M = T @ np.kron(np.eye(3), F) @ T.T

    zt = np.zeros((N, 3, 3), dtype=complex)
    xt = np.zeros((N, 3, 3))
    rt = np.zeros((N, 3, 3))
    for n in range(1, N + 1):
        zt[n - 1], xt[n - 1], rt[n - 1] = build_ztilde(feeder.line(n).z)

    def assemble(blocks):
        B = np.zeros((3 * N, 3 * N))
        for k in range(N):
            B[3 * k:3 * k + 3, 3 * k:3 * k + 3] = blocks[k]
        return 2 * M @ B @ M.T

    pairs = tuple(feeder.served_pairs())
    keep = np.array([3 * (n - 1) + PHASE_INDEX[ph] for n, ph in pairs])
    sub = np.ix_(keep, keep)
    R = assemble(zt.real)[sub]
    X = assemble(zt.imag)[sub]
    X_x = assemble(xt)[sub]
    X_r = assemble(rt)[sub]

    notes = []
    lam_sym = np.linalg.eigvalsh(X_x)
    if lam_sym[0] <= 0:
        msg = "symmetric part of X is not positive definite; step-size guarantees do not apply"
        warnings.warn(msg, RuntimeWarning, stacklevel=2)
        notes.append(msg)
    labels = tuple((feeder.buses[n].id, ph) for n, ph in pairs)
    return GridMatrices("multi", inc.A, inc.a0, F, R, X, pairs, labels,
                        eigen_summary(X, X_x), X_x=X_x, X_r=X_r, T=T, M=M,
                        ztilde=zt, warnings=tuple(notes))


def _relabel(mats: GridMatrices, labels) -> GridMatrices:
    return replace(mats, labels=tuple(labels))


# ---------------------------------------------------------------------------
# inter-phase coupling
# ---------------------------------------------------------------------------

def case_tag(phi_i: str, phi_j: str) -> str:
    if phi_i == phi_j:
        return "c1"
    return "c2" if (phi_i, phi_j) in PRECEDING else "c3"


def coupling_entry(i, j, mats: GridMatrices) -> tuple[float, str]:
    """Sensitivity of v at pair ``i`` to reactive injection at pair ``j``.

    Evaluated line by line over the common upstream path; equals ``X[i, j]``.
    """
    if mats.kind != "multi":
        raise ValidationError("coupling analysis needs a multiphase model")
    (ni, pi), (nj, pj) = i, j
    mats.position(ni, pi)
    mats.position(nj, pj)
    a, b = PHASE_INDEX[pi], PHASE_INDEX[pj]
    F = mats.F
    total = 0.0
    for k in range(1, min(ni, nj) + 1):
        w = F[ni - 1, k - 1] * F[nj - 1, k - 1]
        if w:
            total += mats.ztilde[k - 1, a, b].imag * w
    return 2.0 * total, case_tag(pi, pj)


def phase_major(mats: GridMatrices):
    """X reordered phase-major (the matrix X-check) with its pair legend."""
    order = sorted(range(mats.size), key=lambda k: (PHASE_INDEX[mats.pairs[k][1]], mats.pairs[k][0]))
    idx = np.array(order)
    return mats.X[np.ix_(idx, idx)], [mats.labels[k] for k in order], [mats.pairs[k] for k in order]


@dataclass(frozen=True)
class BlockReport:
    phase_i: str
    phase_j: str
    case: str
    classification: str   # positive / negative / indefinite
    min_entry: float
    max_entry: float
    count: int
    offending: tuple      # ((bus_i, bus_j, value), ...) violating the expected sign


def coupling_report(mats: GridMatrices, normalize: bool = True) -> list[BlockReport]:
    """Sign classification of every phase-pair block of X-check."""
    X = mats.X / np.abs(mats.X).max() if normalize else mats.X
    out = []
    for pi in PHASES:
        rows = [k for k, (_, ph) in enumerate(mats.pairs) if ph == pi]
        for pj in PHASES:
            cols = [k for k, (_, ph) in enumerate(mats.pairs) if ph == pj]
            if not rows or not cols:
                continue
            block = X[np.ix_(rows, cols)]
            tag = case_tag(pi, pj)
            if np.all(block > 0):
                cls = "positive"
            elif np.all(block < 0):
                cls = "negative"
            else:
                cls = "indefinite"
            offending = []
            if tag != "c3":
                bad = block <= 0 if tag == "c1" else block >= 0
                for r_, c_ in zip(*np.nonzero(bad)):
                    offending.append((mats.labels[rows[r_]][0], mats.labels[cols[c_]][0],
                                      float(block[r_, c_])))
            out.append(BlockReport(pi, pj, tag, cls, float(block.min()), float(block.max()),
                                   block.size, tuple(offending)))
    return out


def build_model(feeder: Feeder, kind: str) -> GridMatrices:
    if kind == "single":
        return single_phase_model(feeder)
    if kind == "multi":
        return multiphase_model(feeder)
    raise ValidationError(f"unknown model kind {kind!r}")
