import json

import numpy as np
import pytest

from voltreg.acflow import ComparisonReport, compare_models, power_balance_residual, solve_ac
from voltreg.control import Plant
from voltreg.errors import SolverError, ValidationError
from voltreg.feeder import parse_feeder, scale_impedances, scale_injections
from voltreg.lindistflow import build_model


def plant_for(feeder, kind="multi"):
    return Plant.from_feeder(feeder, build_model(feeder, kind))


def test_zero_injection_gives_flat_profile(ieee13):
    f = ieee13.with_v0(1.05)
    pairs = f.served_pairs()
    sol = solve_ac(f, np.zeros(len(pairs)), np.zeros(len(pairs)))
    assert np.allclose(sol.v, 1.05, atol=1e-14)
    report = compare_models(plant_for(scale_injections(f, 0.0, 0.0)))
    assert report.max_error < 1e-14


def test_slack_angles(ieee13):
    pairs = ieee13.served_pairs()
    sol = solve_ac(ieee13, np.zeros(len(pairs)), np.zeros(len(pairs)))
    angles = np.degrees(np.angle(sol.voltages[0]))
    assert np.allclose(angles, [0, -120, 120])


def test_single_line_matches_quadratic():
    r, x, P, Q, v0 = 0.02, 0.05, 0.8, 0.3, 1.02
    doc = {"base_kva": 1, "base_kv": 1, "per_unit": True, "v0_squared": v0,
           "buses": [{"id": "0", "phases": "a"}, {"id": "1", "phases": "a"}],
           "lines": [{"id": "l", "from": "0", "to": "1", "z": {"aa": [r, x]}}]}
    f = parse_feeder(doc)
    sol = solve_ac(f, np.array([-P]), np.array([-Q]))
    b = v0 - 2 * (r * P + x * Q)
    v1 = (b + np.sqrt(b * b - 4 * (r * r + x * x) * (P * P + Q * Q))) / 2
    assert sol.v[0] == pytest.approx(v1, abs=1e-10)


@pytest.mark.parametrize("name", ["ieee13", "feeder123"])
def test_power_balance(name, request):
    f = scale_injections(request.getfixturevalue(name), 0.8, 1.0)
    plant = plant_for(f)
    sol = solve_ac(f, plant.p, plant.q_fixed, pairs=plant.mats.pairs)
    assert sol.mismatch < 1e-10
    assert power_balance_residual(f, sol, plant.p, plant.q_fixed) < 1e-8


def test_deterministic(ieee13):
    plant = plant_for(scale_injections(ieee13, 0.8, 1.0))
    a = solve_ac(ieee13, plant.p, plant.q_fixed, pairs=plant.mats.pairs)
    b = solve_ac(ieee13, plant.p, plant.q_fixed, pairs=plant.mats.pairs)
    assert a.voltages.tobytes() == b.voltages.tobytes()
    assert a.iterations == b.iterations


def test_vanishing_impedance_closes_gap(ieee13):
    f = scale_injections(ieee13, 0.8, 1.0)
    errors = [compare_models(plant_for(scale_impedances(f, eps))).max_error
              for eps in (1.0, 0.1, 0.01)]
    assert errors[0] > errors[1] > errors[2]
    # the residual is second order in the impedance scale
    assert errors[2] / errors[1] < 0.02


def test_error_grows_with_load(chain):
    errors = [compare_models(plant_for(scale_injections(chain, s, s), "single")).max_error
              for s in (0.2, 0.5, 1.0)]
    assert errors[0] < errors[1] < errors[2]


def test_report_round_trip(ieee13):
    report = compare_models(plant_for(scale_injections(ieee13, 0.8, 1.0)))
    back = ComparisonReport.from_dict(json.loads(report.to_json()))
    assert back.labels == report.labels
    assert np.array_equal(back.v_ac, report.v_ac)
    assert back.max_error == report.max_error
    assert report.mean_error <= report.max_error


def test_sweep_limit_reports_mismatch(ieee13):
    plant = plant_for(scale_injections(ieee13, 0.8, 1.0))
    with pytest.raises(SolverError) as info:
        solve_ac(ieee13, plant.p, plant.q_fixed, pairs=plant.mats.pairs, max_sweeps=2)
    assert info.value.mismatch > 0


def test_overload_fails(ieee13):
    plant = plant_for(scale_injections(ieee13, 200.0, 0.0))
    with pytest.raises(SolverError):
        solve_ac(ieee13, plant.p, plant.q_fixed, pairs=plant.mats.pairs)


def test_injection_shape_checked(ieee13):
    with pytest.raises(ValidationError):
        solve_ac(ieee13, np.zeros(3), np.zeros(3))
    with pytest.raises(ValidationError):
        solve_ac(ieee13, np.zeros(1), np.zeros(1), pairs=[(ieee13.bus_index("611"), "a")])
