import copy
import json

import numpy as np
import pytest

from voltreg.errors import FeederParseError, TopologyError, ValidationError
from voltreg.feeder import (PvUnit, SwitchEvent, apply_switch_event, check_spanning_tree,
                            load_feeder, natural_key, parse_feeder, scale_impedances,
                            scale_injections, to_single_phase)

from conftest import DATA, single_phase_doc


def three_bus():
    return single_phase_doc([-1, 0, 1], [1.0, 1.0], [1.0, 1.0])


def test_bundled_feeders_parse():
    sizes = {"chain": 2, "ieee13": 12, "feeder123": 122}
    for name, N in sizes.items():
        f = load_feeder(DATA / f"{name}.json")
        assert f.N == N
        assert f.parent[0] == -1
        assert all(0 <= f.parent[n] < n for n in range(1, N + 1))


def test_ieee13_structure(ieee13):
    assert ieee13.buses[0].id == "650"
    by_id = {b.id: b for b in ieee13.buses}
    assert by_id["611"].phases == ("c",)
    assert by_id["684"].phases == ("a", "c")
    assert by_id["645"].phases == ("b", "c")
    assert len(ieee13.served_pairs()) == 29


def test_per_unit_conversion():
    doc = {"base_kva": 300.0, "base_kv": 2.0, "v0_squared": 1.0,
           "buses": [{"id": "s", "phases": "a"},
                     {"id": "b", "phases": "a", "load": {"a": [50.0, 20.0]},
                      "pv": {"a": {"s": 30.0, "p": 10.0, "c": 0.1}}}],
           "lines": [{"id": "l", "from": "s", "to": "b", "z": {"aa": [0.4, 0.8]}}]}
    f = parse_feeder(doc)
    bus = f.buses[1]
    assert bus.load_p["a"] == pytest.approx(0.5)       # per-phase base 100 kVA
    assert bus.load_q["a"] == pytest.approx(0.2)
    assert bus.pv["a"].capacity_s == pytest.approx(0.3)
    z_base = 1000 * 2.0**2 / 300.0
    assert f.line(1).z[0, 0] == pytest.approx(complex(0.4, 0.8) / z_base)


def test_line_units_override():
    doc = three_bus()
    doc["per_unit"] = False
    doc["base_kva"], doc["base_kv"] = 1000.0, 1.0
    doc["lines"][0]["units"] = "pu"
    f = parse_feeder(doc)
    assert f.line(1).z[0, 0] == pytest.approx(1 + 1j)
    assert f.line(2).z[0, 0] == pytest.approx(1 + 1j)   # z_base is 1 ohm here


def test_injection_sign():
    doc = three_bus()
    doc["buses"][1]["load"] = {"a": [0.3, 0.1]}
    doc["buses"][1]["pv"] = {"a": {"s": 0.5, "p": 0.4}}
    f = parse_feeder(doc)
    assert f.buses[1].injection("a") == pytest.approx((0.1, -0.1))


@pytest.mark.parametrize("mutate, field", [
    (lambda d: d.pop("base_kva"), "feeder.base_kva"),
    (lambda d: d["buses"][1].update(phases="ax"), "buses[1].phases"),
    (lambda d: d["buses"][1].update(load={"b": [1, 1]}), "buses[1].load.b"),
    (lambda d: d["lines"][0]["z"].update(aa=["x", 1]), "lines[0].z.aa[0]"),
    (lambda d: d["lines"][0].update(to="nowhere"), "lines[0]"),
    (lambda d: d["buses"][2].update(pv={"a": {"s": 0.1, "p": 0.2}}), "buses[2].pv.a"),
])
def test_parse_errors_name_the_field(mutate, field):
    doc = three_bus()
    mutate(doc)
    with pytest.raises(FeederParseError) as info:
        parse_feeder(doc)
    assert info.value.field == field


def test_asymmetric_impedance_rejected():
    doc = three_bus()
    for b in doc["buses"]:
        b["phases"] = "ab"
    doc["lines"][0]["z"] = {"aa": [1, 1], "bb": [1, 1], "ab": [0.1, 0.2], "ba": [0.1, 0.3]}
    doc["lines"][1]["z"] = {"aa": [1, 1], "bb": [1, 1]}
    with pytest.raises(ValidationError, match="symmetric"):
        parse_feeder(doc)


def test_nonpositive_reactance_rejected():
    doc = three_bus()
    doc["lines"][1]["z"]["aa"] = [1.0, 0.0]
    with pytest.raises(ValidationError, match="reactance"):
        parse_feeder(doc)


def test_cycle_rejected():
    doc = single_phase_doc([-1, 0, 1, 1], [1, 1, 1], [1, 1, 1])
    doc["lines"].append({"id": "loop", "from": "2", "to": "3", "z": {"aa": [1, 1]}})
    with pytest.raises(TopologyError):
        parse_feeder(doc)


def test_disconnected_rejected():
    doc = three_bus()
    doc["buses"].append({"id": "island", "phases": "a"})
    with pytest.raises(TopologyError):
        parse_feeder(doc)


def test_spanning_tree_check():
    labels = ["a", "b", "c"]
    check_spanning_tree(labels, {"1": ("a", "b"), "2": ("b", "c")})
    with pytest.raises(TopologyError):
        check_spanning_tree(labels, {"1": ("a", "b")})
    with pytest.raises(TopologyError):
        check_spanning_tree(labels, {"1": ("a", "b"), "2": ("b", "c"), "3": ("c", "a")})
    with pytest.raises(TopologyError):
        check_spanning_tree(labels, {"1": ("a", "b"), "2": ("b", "a")})


def test_phase_mismatch_rejected():
    doc = three_bus()
    doc["buses"][2]["phases"] = "b"
    doc["lines"][1]["z"] = {"bb": [1, 1]}
    with pytest.raises(TopologyError):
        parse_feeder(doc)


def test_canonical_numbering_is_order_independent():
    doc = single_phase_doc([-1, 0, 0, 1, 1, 2], [1] * 5, [1] * 5)
    f1 = parse_feeder(doc)
    shuffled = copy.deepcopy(doc)
    shuffled["buses"] = [shuffled["buses"][0]] + shuffled["buses"][:0:-1]
    shuffled["lines"] = shuffled["lines"][::-1]
    f2 = parse_feeder(shuffled)
    assert [b.id for b in f1.buses] == [b.id for b in f2.buses]
    assert f1.parent == f2.parent


def test_natural_ordering():
    labels = ["10", "2", "1", "b3", "b10"]
    assert sorted(labels, key=natural_key) == ["1", "2", "10", "b3", "b10"]


def test_switch_event_round_trip(feeder123):
    ev = feeder123.events[0]
    after = apply_switch_event(feeder123, ev)
    assert ev.open_line in after.open_lines
    assert ev.close_line not in after.open_lines
    assert after.parent != feeder123.parent
    back = apply_switch_event(after, ev.inverse())
    assert back.parent == feeder123.parent
    assert [b.id for b in back.buses] == [b.id for b in feeder123.buses]


def test_switch_event_unknown_line(feeder123):
    with pytest.raises(TopologyError):
        apply_switch_event(feeder123, SwitchEvent(1, "nope", None))


def test_switch_event_creating_island(feeder123):
    with pytest.raises(TopologyError):
        apply_switch_event(feeder123, SwitchEvent(1, "sw97-197", None))


def test_single_phase_equivalent(ieee13):
    single = to_single_phase(ieee13)
    assert all(b.phases == ("a",) for b in single.buses)
    total = sum(sum(b.load_p.values()) for b in ieee13.buses)
    assert 3 * sum(b.load_p.get("a", 0.0) for b in single.buses) == pytest.approx(total)
    ln = ieee13.lines["632-645"]
    assert single.lines["632-645"].z[0, 0] == pytest.approx(np.mean([ln.z[1, 1], ln.z[2, 2]]))


def test_scaling_helpers(ieee13):
    scaled = scale_injections(ieee13, 0.5, 0.0)
    b0, b1 = ieee13.buses[1], scaled.buses[1]
    assert b1.load_p["a"] == pytest.approx(0.5 * b0.load_p["a"])
    assert all(u.p_gen == 0 for b in scaled.buses for u in b.pv.values())
    z = scale_impedances(ieee13, 3.0)
    assert z.line(1).z == pytest.approx(3.0 * ieee13.line(1).z)


def test_pv_unit_limits():
    assert PvUnit(0.5, 0.3).q_limit == pytest.approx(0.4)
    with pytest.raises(ValidationError):
        PvUnit(0.1, 0.2)
    with pytest.raises(ValidationError):
        PvUnit(0.1, 0.05, -1.0)


def test_bad_json(tmp_path):
    path = tmp_path / "bad.json"
    path.write_text("{not json")
    with pytest.raises(FeederParseError):
        load_feeder(path)
    path.write_text(json.dumps([1, 2]))
    with pytest.raises(FeederParseError):
        load_feeder(path)
