"""Feeder descriptions: parsing, validation and canonical numbering.

A feeder file is JSON::

    {
      "name": "...",                      optional
      "base_kva": 5000, "base_kv": 4.16,  three-phase kVA, line-to-line kV
      "per_unit": false,                  optional; true if values are already p.u.
      "v0_squared": 1.0,
      "source": "650",                    optional; defaults to the first bus
      "buses": [{"id": "632", "phases": "abc",
                 "load": {"a": [p, q], ...},
                 "pv": {"a": {"s": ..., "p": ..., "c": ...}, ...}}],
      "lines": [{"id": "L1", "from": "650", "to": "632",
                 "units": "ohm" | "pu",   optional, overrides per_unit
                 "z": {"aa": [r, x], "ab": [r, x], ...}}],
      "normally_open": ["tie1"],
      "events": [{"t": 20, "open": "sw1", "close": "tie1"}]
    }

Powers are in kW/kvar/kVA per phase unless ``per_unit`` is set; the per-phase
power base is ``base_kva / 3`` and the impedance base is
``1000 * base_kv**2 / base_kva`` ohm. Absent phase keys mean the phase is not
served.
"""

from __future__ import annotations

import json
import math
import re
from collections import deque
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .errors import FeederParseError, TopologyError, ValidationError

PHASES = ("a", "b", "c")
PHASE_INDEX = {ph: i for i, ph in enumerate(PHASES)}

SYMMETRY_TOL = 1e-9


@dataclass(frozen=True)
class PvUnit:
    capacity_s: float
    p_gen: float
    cost_c: float = 0.0

    def __post_init__(self):
        if self.capacity_s < 0 or self.p_gen < 0:
            raise ValidationError("PV capacity and generation must be nonnegative")
        if self.p_gen > self.capacity_s * (1 + 1e-12):
            raise ValidationError(
                f"PV generation {self.p_gen} exceeds apparent power capacity {self.capacity_s}"
            )
        if self.cost_c < 0:
            raise ValidationError("reactive compensation cost must be nonnegative")

    @property
    def q_limit(self) -> float:
        return math.sqrt(max(self.capacity_s**2 - self.p_gen**2, 0.0))


@dataclass(frozen=True)
class Bus:
    id: str
    index: int
    phases: tuple[str, ...]
    load_p: dict = field(default_factory=dict)
    load_q: dict = field(default_factory=dict)
    pv: dict = field(default_factory=dict)

    def injection(self, phase: str) -> tuple[float, float]:
        """Net (p, q) injection on ``phase`` before any reactive control."""
        p = -self.load_p.get(phase, 0.0)
        q = -self.load_q.get(phase, 0.0)
        if phase in self.pv:
            p += self.pv[phase].p_gen
        return p, q


@dataclass(frozen=True)
class Line:
    id: str
    from_bus: str
    to_bus: str
    z: np.ndarray  # 3x3 complex, per-unit; zero rows/cols on unserved phases
    phases: tuple[str, ...]

    def block(self) -> np.ndarray:
        idx = [PHASE_INDEX[ph] for ph in self.phases]
        return self.z[np.ix_(idx, idx)]


@dataclass(frozen=True)
class SwitchEvent:
    at_iteration: int
    open_line: str | None = None
    close_line: str | None = None

    def inverse(self) -> "SwitchEvent":
        return SwitchEvent(self.at_iteration, self.close_line, self.open_line)


@dataclass(frozen=True)
class Feeder:
    """Radial feeder in canonical numbering.

    ``buses[n].index == n``; bus 0 is the substation. ``parent[n]`` is the
    parent of bus ``n`` (``parent[0] == -1``) and ``branch[n]`` is the id of
    the line feeding bus ``n`` (line ``n``). ``permutation`` maps the index a
    bus had before the last canonicalization to its current index.
    """

    name: str
    buses: tuple[Bus, ...]
    lines: dict
    open_lines: frozenset
    events: tuple[SwitchEvent, ...]
    v0: float
    base_kva: float
    base_kv: float
    parent: tuple[int, ...]
    branch: tuple[str | None, ...]
    permutation: dict

    @property
    def N(self) -> int:
        return len(self.buses) - 1

    @property
    def closed_lines(self) -> list[str]:
        return [lid for lid in self.lines if lid not in self.open_lines]

    def bus_index(self, label: str) -> int:
        for bus in self.buses:
            if bus.id == label:
                return bus.index
        raise KeyError(label)

    def line(self, n: int) -> Line:
        """Line feeding bus ``n`` (1-based)."""
        return self.lines[self.branch[n]]

    def served_pairs(self) -> list[tuple[int, str]]:
        """Served (bus, phase) pairs of non-feeder buses, bus-major."""
        return [(b.index, ph) for b in self.buses[1:] for ph in PHASES if ph in b.phases]

    def with_v0(self, v0: float) -> "Feeder":
        return replace(self, v0=float(v0))


def natural_key(label: str):
    return tuple((0, int(tok), "") if tok.isdigit() else (1, 0, tok)
                 for tok in re.findall(r"\d+|\D+", label))


# ---------------------------------------------------------------------------
# parsing
# ---------------------------------------------------------------------------

def _require(obj, key, where):
    if not isinstance(obj, dict) or key not in obj:
        raise FeederParseError(f"{where}.{key}", "missing required field")
    return obj[key]


def _number(value, where):
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise FeederParseError(where, f"expected a number, got {value!r}")
    if not math.isfinite(value):
        raise FeederParseError(where, "must be finite")
    return float(value)


def _parse_phases(value, where):
    if not isinstance(value, str) or not value:
        raise FeederParseError(where, "expected a non-empty subset of 'abc'")
    phases = tuple(ph for ph in PHASES if ph in value)
    if len(phases) != len(value) or set(value) - set(PHASES):
        raise FeederParseError(where, f"invalid phase string {value!r}")
    return phases


def _parse_bus(raw, pos, power_base):
    where = f"buses[{pos}]"
    label = str(_require(raw, "id", where))
    phases = _parse_phases(raw.get("phases", "abc"), f"{where}.phases")
    load_p, load_q, pv = {}, {}, {}
    for ph, pq in (raw.get("load") or {}).items():
        w = f"{where}.load.{ph}"
        if ph not in phases:
            raise FeederParseError(w, "load on a phase the bus does not serve")
        if not isinstance(pq, (list, tuple)) or len(pq) != 2:
            raise FeederParseError(w, "expected [p, q]")
        load_p[ph] = _number(pq[0], w + "[0]") / power_base
        load_q[ph] = _number(pq[1], w + "[1]") / power_base
    for ph, unit in (raw.get("pv") or {}).items():
        w = f"{where}.pv.{ph}"
        if ph not in phases:
            raise FeederParseError(w, "PV on a phase the bus does not serve")
        s = _number(_require(unit, "s", w), w + ".s") / power_base
        p = _number(unit.get("p", 0.0), w + ".p") / power_base
        c = _number(unit.get("c", 0.0), w + ".c")
        try:
            pv[ph] = PvUnit(s, p, c)
        except ValidationError as exc:
            raise FeederParseError(w, str(exc)) from None
    return Bus(label, pos, phases, load_p, load_q, pv)


def _parse_line(raw, pos, z_base):
    where = f"lines[{pos}]"
    lid = str(_require(raw, "id", where))
    src = str(_require(raw, "from", where))
    dst = str(_require(raw, "to", where))
    zraw = _require(raw, "z", where)
    if not isinstance(zraw, dict) or not zraw:
        raise FeederParseError(f"{where}.z", "expected a mapping of phase pairs")
    units = raw.get("units")
    scale = 1.0 if units == "pu" else z_base
    if units not in (None, "pu", "ohm"):
        raise FeederParseError(f"{where}.units", f"unknown unit {units!r}")
    z = np.zeros((3, 3), dtype=complex)
    seen = np.zeros((3, 3), dtype=bool)
    for key, rx in zraw.items():
        w = f"{where}.z.{key}"
        if len(key) != 2 or key[0] not in PHASE_INDEX or key[1] not in PHASE_INDEX:
            raise FeederParseError(w, "expected a phase pair like 'ab'")
        if not isinstance(rx, (list, tuple)) or len(rx) != 2:
            raise FeederParseError(w, "expected [r, x]")
        val = complex(_number(rx[0], w + "[0]"), _number(rx[1], w + "[1]")) / scale
        i, j = PHASE_INDEX[key[0]], PHASE_INDEX[key[1]]
        if seen[i, j]:
            raise FeederParseError(w, "duplicate entry")
        z[i, j] = val
        seen[i, j] = True
    for i in range(3):
        for j in range(3):
            if seen[i, j] and not seen[j, i]:
                z[j, i] = z[i, j]
                seen[j, i] = True
    phases = tuple(ph for ph in PHASES if seen[PHASE_INDEX[ph], PHASE_INDEX[ph]])
    if not phases:
        raise FeederParseError(f"{where}.z", "no self-impedance given")
    if np.max(np.abs(z - z.T)) > SYMMETRY_TOL * max(1.0, np.max(np.abs(z))):
        raise ValidationError(f"line {lid}: phase impedance matrix is not symmetric")
    served = np.array([ph in phases for ph in PHASES])
    if np.any(np.abs(z[~served, :]) > 0) or np.any(np.abs(z[:, ~served]) > 0):
        raise ValidationError(f"line {lid}: mutual impedance references an unserved phase")
    for ph in phases:
        k = PHASE_INDEX[ph]
        if not z[k, k].imag > 0:
            raise ValidationError(f"line {lid}: self reactance on phase {ph} must be positive")
    return Line(lid, src, dst, z, phases)


def parse_feeder(doc: dict) -> Feeder:
    base_kva = _number(_require(doc, "base_kva", "feeder"), "base_kva")
    base_kv = _number(_require(doc, "base_kv", "feeder"), "base_kv")
    if base_kva <= 0 or base_kv <= 0:
        raise FeederParseError("base_kva", "bases must be positive")
    per_unit = bool(doc.get("per_unit", False))
    power_base = 1.0 if per_unit else base_kva / 3.0
    z_base = 1.0 if per_unit else 1000.0 * base_kv**2 / base_kva
    v0 = _number(_require(doc, "v0_squared", "feeder"), "v0_squared")
    if v0 <= 0:
        raise FeederParseError("v0_squared", "must be positive")

    raw_buses = _require(doc, "buses", "feeder")
    raw_lines = _require(doc, "lines", "feeder")
    if not isinstance(raw_buses, list) or not raw_buses:
        raise FeederParseError("buses", "expected a non-empty list")
    if not isinstance(raw_lines, list):
        raise FeederParseError("lines", "expected a list")
    buses = [_parse_bus(b, i, power_base) for i, b in enumerate(raw_buses)]
    labels = [b.id for b in buses]
    if len(set(labels)) != len(labels):
        raise FeederParseError("buses", "duplicate bus id")
    source = str(doc.get("source", labels[0]))
    if source not in labels:
        raise FeederParseError("source", f"unknown bus {source!r}")
    if source != labels[0]:
        k = labels.index(source)
        buses.insert(0, buses.pop(k))
        buses = [replace(b, index=i) for i, b in enumerate(buses)]

    lines = {}
    for i, raw in enumerate(raw_lines):
        line = _parse_line(raw, i, z_base)
        if line.id in lines:
            raise FeederParseError(f"lines[{i}].id", f"duplicate line id {line.id!r}")
        for end in (line.from_bus, line.to_bus):
            if end not in labels:
                raise FeederParseError(f"lines[{i}]", f"unknown bus {end!r}")
        if line.from_bus == line.to_bus:
            raise TopologyError(f"line {line.id} is a self-loop")
        lines[line.id] = line

    open_lines = frozenset(str(x) for x in doc.get("normally_open", []))
    for lid in open_lines:
        if lid not in lines:
            raise FeederParseError("normally_open", f"unknown line {lid!r}")

    events = []
    for i, ev in enumerate(doc.get("events", [])):
        w = f"events[{i}]"
        t = _require(ev, "t", w)
        if isinstance(t, bool) or not isinstance(t, int) or t < 0:
            raise FeederParseError(w + ".t", "expected a nonnegative integer")
        op, cl = ev.get("open"), ev.get("close")
        for lid in (op, cl):
            if lid is not None and str(lid) not in lines:
                raise FeederParseError(w, f"unknown line {lid!r}")
        events.append(SwitchEvent(t, None if op is None else str(op),
                                  None if cl is None else str(cl)))

    # each bus may be the receiving end of at most one closed line as written
    receiving = {}
    for lid, line in lines.items():
        if lid in open_lines:
            continue
        if line.to_bus in receiving:
            raise TopologyError(
                f"bus {line.to_bus} has two parents (lines {receiving[line.to_bus]} and {lid})"
            )
        receiving[line.to_bus] = lid
    if source in receiving:
        raise TopologyError(f"source bus {source} cannot have a parent")

    feeder = Feeder(
        name=str(doc.get("name", "feeder")),
        buses=tuple(buses),
        lines=lines,
        open_lines=open_lines,
        events=tuple(sorted(events, key=lambda e: e.at_iteration)),
        v0=v0,
        base_kva=base_kva,
        base_kv=base_kv,
        parent=(),
        branch=(),
        permutation={},
    )
    return canonicalize(feeder)


def load_feeder(path) -> Feeder:
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise FeederParseError(str(path), f"invalid JSON: {exc}") from None
    except OSError as exc:
        raise FeederParseError(str(path), f"cannot read file: {exc.strerror}") from None
    if not isinstance(doc, dict):
        raise FeederParseError(str(path), "top level must be an object")
    return parse_feeder(doc)


# ---------------------------------------------------------------------------
# topology
# ---------------------------------------------------------------------------

class _UnionFind:
    def __init__(self, n):
        self.parent = list(range(n))

    def find(self, a):
        while self.parent[a] != a:
            self.parent[a] = self.parent[self.parent[a]]
            a = self.parent[a]
        return a

    def union(self, a, b):
        ra, rb = self.find(a), self.find(b)
        if ra == rb:
            return False
        self.parent[ra] = rb
        return True


def check_spanning_tree(labels, edges):
    """Raise ``TopologyError`` unless ``edges`` (line id -> label pair) span ``labels`` as a tree."""
    pos = {lab: i for i, lab in enumerate(labels)}
    if len(edges) != len(labels) - 1:
        raise TopologyError(
            f"{len(edges)} closed lines for {len(labels)} buses; a radial feeder needs {len(labels) - 1}"
        )
    uf = _UnionFind(len(labels))
    for lid, (u, v) in edges.items():
        if not uf.union(pos[u], pos[v]):
            raise TopologyError(f"closing line {lid} creates a loop")


def canonicalize(feeder: Feeder) -> Feeder:
    """Renumber buses breadth-first from the source so that parent < child.

    Children are visited in natural label order, so the result does not depend
    on the input order and the operation is idempotent.
    """
    labels = [b.id for b in feeder.buses]
    closed = {lid: (ln.from_bus, ln.to_bus) for lid, ln in feeder.lines.items()
              if lid not in feeder.open_lines}
    check_spanning_tree(labels, closed)

    adj = {lab: [] for lab in labels}
    for lid, (u, v) in closed.items():
        adj[u].append((v, lid))
        adj[v].append((u, lid))
    for lab in adj:
        adj[lab].sort(key=lambda item: natural_key(item[0]))

    root = feeder.buses[0].id
    order, parent_label, via = [root], {root: None}, {root: None}
    queue = deque([root])
    while queue:
        u = queue.popleft()
        for v, lid in adj[u]:
            if v not in parent_label:
                parent_label[v] = u
                via[v] = lid
                order.append(v)
                queue.append(v)
    if len(order) != len(labels):
        raise TopologyError("closed lines leave some buses disconnected")

    new_index = {lab: i for i, lab in enumerate(order)}
    by_label = {b.id: b for b in feeder.buses}
    buses = tuple(replace(by_label[lab], index=new_index[lab]) for lab in order)
    parent = tuple(-1 if parent_label[lab] is None else new_index[parent_label[lab]]
                   for lab in order)
    branch = tuple(via[lab] for lab in order)

    for n in range(1, len(buses)):
        line = feeder.lines[branch[n]]
        child, par = buses[n], buses[parent[n]]
        if not set(child.phases) <= set(line.phases):
            raise TopologyError(
                f"bus {child.id} serves phases {''.join(child.phases)} "
                f"but its feeding line {line.id} carries {''.join(line.phases)}"
            )
        if not set(line.phases) <= set(par.phases):
            raise TopologyError(
                f"line {line.id} carries phases absent at upstream bus {par.id}"
            )

    permutation = {b.index: new_index[b.id] for b in feeder.buses}
    return replace(feeder, buses=buses, parent=parent, branch=branch,
                   permutation=permutation)


def apply_switch_event(feeder: Feeder, event: SwitchEvent) -> Feeder:
    open_lines = set(feeder.open_lines)
    for lid in (event.open_line, event.close_line):
        if lid is not None and lid not in feeder.lines:
            raise TopologyError(f"switch event references unknown line {lid!r}")
    if event.open_line is not None:
        open_lines.add(event.open_line)
    if event.close_line is not None:
        open_lines.discard(event.close_line)
    return canonicalize(replace(feeder, open_lines=frozenset(open_lines)))


# ---------------------------------------------------------------------------
# single-phase equivalent
# ---------------------------------------------------------------------------

def to_single_phase(feeder: Feeder) -> Feeder:
    """Balanced single-phase equivalent of a multiphase feeder.

    Line impedance is the mean of the served self-impedances; loads and PV
    ratings are summed across phases and expressed per phase of a balanced
    three-phase system (hence divided by three); PV costs are averaged.
    """
    buses = []
    for b in feeder.buses:
        p = sum(b.load_p.values()) / 3.0
        q = sum(b.load_q.values()) / 3.0
        pv = {}
        if b.pv:
            units = list(b.pv.values())
            pv["a"] = PvUnit(sum(u.capacity_s for u in units) / 3.0,
                             sum(u.p_gen for u in units) / 3.0,
                             float(np.mean([u.cost_c for u in units])))
        buses.append(Bus(b.id, b.index, ("a",), {"a": p} if p else {},
                         {"a": q} if q else {}, pv))
    lines = {}
    for lid, ln in feeder.lines.items():
        idx = [PHASE_INDEX[ph] for ph in ln.phases]
        zs = np.mean(np.diag(ln.z)[idx])
        z = np.zeros((3, 3), dtype=complex)
        z[0, 0] = zs
        lines[lid] = Line(lid, ln.from_bus, ln.to_bus, z, ("a",))
    return replace(feeder, name=feeder.name + "-1ph", buses=tuple(buses), lines=lines)


def scale_injections(feeder: Feeder, load_scale=1.0, pv_scale=1.0) -> Feeder:
    """Scale every load and every PV active output (PV ratings unchanged)."""
    buses = []
    for b in feeder.buses:
        pv = {ph: PvUnit(u.capacity_s, min(u.p_gen * pv_scale, u.capacity_s), u.cost_c)
              for ph, u in b.pv.items()}
        buses.append(replace(
            b,
            load_p={ph: v * load_scale for ph, v in b.load_p.items()},
            load_q={ph: v * load_scale for ph, v in b.load_q.items()},
            pv=pv,
        ))
    return replace(feeder, buses=tuple(buses))


def scale_impedances(feeder: Feeder, factor: float) -> Feeder:
    lines = {lid: replace(ln, z=ln.z * factor) for lid, ln in feeder.lines.items()}
    return replace(feeder, lines=lines)
