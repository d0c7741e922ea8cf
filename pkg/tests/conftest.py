from pathlib import Path

import numpy as np
import pytest

import voltreg
from voltreg.feeder import load_feeder, parse_feeder

DATA = Path(voltreg.__file__).parent / "data"
BUNDLED = ("chain", "ieee13", "feeder123")


def random_parents(rng, N):
    """Canonical parent sequence (entry 0 unused) of a random tree on N+1 buses."""
    return [-1] + [int(rng.integers(0, n)) for n in range(1, N + 1)]


def single_phase_doc(parents, r, x, p=None, q=None, pv=None, v0=1.0):
    """Per-unit single-phase feeder document from a parent sequence."""
    N = len(parents) - 1
    buses = [{"id": "0", "phases": "a"}]
    for n in range(1, N + 1):
        bus = {"id": str(n), "phases": "a"}
        if p is not None:
            bus["load"] = {"a": [float(-p[n - 1]), float(-(q[n - 1] if q is not None else 0.0))]}
        if pv is not None and pv[n - 1] is not None:
            s, pg, c = pv[n - 1]
            bus["pv"] = {"a": {"s": s, "p": pg, "c": c}}
        buses.append(bus)
    lines = [{"id": f"L{n}", "from": str(parents[n]), "to": str(n),
              "z": {"aa": [float(r[n - 1]), float(x[n - 1])]}} for n in range(1, N + 1)]
    return {"base_kva": 1.0, "base_kv": 1.0, "per_unit": True, "v0_squared": v0,
            "buses": buses, "lines": lines}


def random_single_feeder(rng, N, v0=1.0, with_pv=True):
    parents = random_parents(rng, N)
    r = rng.uniform(0.005, 0.05, N)
    x = rng.uniform(0.005, 0.05, N)
    p = -rng.uniform(0.0, 0.05, N)
    q = -rng.uniform(0.0, 0.02, N)
    pv = None
    if with_pv:
        pv = []
        for _ in range(N):
            if rng.random() < 0.6:
                s = rng.uniform(0.02, 0.08)
                pv.append((s, rng.uniform(0, 0.9) * s, rng.uniform(0, 0.01)))
            else:
                pv.append(None)
    return parse_feeder(single_phase_doc(parents, r, x, p, q, pv, v0))


@pytest.fixture(scope="session")
def data_dir():
    return DATA


@pytest.fixture(scope="session")
def chain():
    return load_feeder(DATA / "chain.json")


@pytest.fixture(scope="session")
def ieee13():
    return load_feeder(DATA / "ieee13.json")


@pytest.fixture(scope="session")
def feeder123():
    return load_feeder(DATA / "feeder123.json")


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


# one line per acceptance criterion, filled in by test_acceptance.py
ACCEPTANCE_LINES = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE_LINES):
        parts = ACCEPTANCE_LINES[n]
        status = "PASS" if all(ok for ok, _ in parts) else "FAIL"
        detail = " | ".join(d for _, d in parts)
        terminalreporter.write_line(f"criterion {n:2d}: {status}  {detail}")
