import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from voltreg.acflow import solve_ac
from voltreg.control import (ControlConfig, ControlState, Plant, beta_schedule, c2,
                             capability_limits, closed_form_qstar, default_droop,
                             droop_from_points, f1, f2, f2_drops, fixed_point_residual, h2,
                             initial_state, multiphase_step, prox, prox_scalar, resolve_mu,
                             restart_window, run, step)
from voltreg.errors import ConfigError, StateError, ValidationError
from voltreg.experiment import coordinate_descent_optimum
from voltreg.feeder import PvUnit, scale_injections
from voltreg.lindistflow import build_model, single_phase_model

from conftest import random_single_feeder


def plant_for(feeder, kind="single", **kw):
    return Plant.from_feeder(feeder, build_model(feeder, kind), **kw)


@pytest.fixture(scope="module")
def small_plant():
    return plant_for(random_single_feeder(np.random.default_rng(5), 8))


@pytest.fixture(scope="module")
def p13(ieee13):
    f = scale_injections(ieee13.with_v0(1.07**2), 0.8, 1.0)
    return plant_for(f)


# ---------------------------------------------------------------- prox

def brute_prox(y, mu, c, qbar, step=1e-4):
    w = np.arange(-qbar, qbar + step / 2, step)
    return w[np.argmin(mu * c * np.abs(w) + 0.5 * (w - y) ** 2)]


@settings(max_examples=300, deadline=None)
@given(st.floats(-3, 3), st.floats(0.01, 2), st.floats(0, 1), st.floats(0, 1.5))
def test_prox_matches_brute_force(y, mu, c, qbar):
    assert abs(prox_scalar(y, mu, c, qbar) - brute_prox(y, mu, c, qbar)) < 5e-4 + 1e-12


def test_prox_vector_matches_scalar(rng):
    y = rng.uniform(-2, 2, 500)
    thr = rng.uniform(0, 0.5, 500)
    qbar = rng.uniform(0, 1, 500)
    vec = prox(y, thr, qbar)
    scal = [prox_scalar(a, 1.0, b, c) for a, b, c in zip(y, thr, qbar)]
    assert np.allclose(vec, scal, atol=0)


def test_prox_special_cases():
    assert prox_scalar(0.7, 1.0, 0.2, 0.0) == 0.0
    assert prox_scalar(0.7, 1.0, 0.0, 0.5) == 0.5
    assert prox_scalar(-0.3, 1.0, 0.0, 0.5) == -0.3
    assert prox_scalar(0.1, 1.0, 0.2, 1.0) == 0.0
    assert prox_scalar(-0.5, 1.0, 0.2, 1.0) == pytest.approx(-0.3)


# ---------------------------------------------------------------- costs

def test_gradient_of_f2_is_voltage_deviation(small_plant, rng):
    plant, h = small_plant, 1e-6
    for _ in range(10):
        q = rng.uniform(-0.05, 0.05, plant.p.size)
        grad = plant.linear_voltages(q) - plant.v0
        fd = np.array([(f2(plant, q + h * e) - f2(plant, q - h * e)) / (2 * h)
                       for e in np.eye(q.size)])
        assert np.linalg.norm(fd - grad) / np.linalg.norm(grad) < 1e-6


def test_f2_two_forms(small_plant, rng):
    for _ in range(10):
        q = rng.uniform(-0.05, 0.05, small_plant.p.size)
        assert f2(small_plant, q) == pytest.approx(f2_drops(small_plant, q), rel=1e-9, abs=1e-12)


def test_cost_pieces(small_plant):
    q = np.full(small_plant.p.size, 0.01)
    assert c2(small_plant, q) == pytest.approx(0.01 * small_plant.c.sum())
    assert h2(small_plant, q) == pytest.approx(f2(small_plant, q) + c2(small_plant, q))
    d = small_plant.linear_voltages(q) - small_plant.v0
    assert f1(small_plant, q) == pytest.approx(0.5 * d @ d)


def test_capability_limits():
    units = [PvUnit(0.5, 0.3), None, PvUnit(0.2, 0.2)]
    assert np.allclose(capability_limits(units), [0.4, 0.0, 0.0])


# ---------------------------------------------------------------- closed form

def test_closed_form_restores_v0(rng):
    for seed in range(5):
        f = random_single_feeder(np.random.default_rng(seed), 12, with_pv=False)
        mats = single_phase_model(f)
        p = rng.uniform(-0.05, 0.05, 12)
        q_solve, q_flow = closed_form_qstar(mats, p)
        assert np.allclose(q_solve, q_flow, atol=1e-10)
        assert np.allclose(mats.R @ p + mats.X @ q_solve, 0, atol=1e-10)


def test_closed_form_single_phase_only(ieee13):
    mats = build_model(ieee13, "multi")
    with pytest.raises(ValidationError):
        closed_form_qstar(mats, np.zeros(mats.size))


# ---------------------------------------------------------------- schedules and steps

def test_beta_schedule():
    assert beta_schedule(1) == 0
    assert beta_schedule(2) == pytest.approx(1 / 4)
    assert beta_schedule(3) == pytest.approx(2 / 5)
    assert beta_schedule(6, restart_every=5) == 0
    assert beta_schedule(7, restart_every=5) == pytest.approx(1 / 4)
    with pytest.raises(ValidationError):
        beta_schedule(0)


def test_restart_window(p13):
    auto = restart_window(ControlConfig(rule="apgd"), p13.mats)
    assert auto == math.ceil(2 * math.sqrt(p13.mats.eig.kappa))
    assert restart_window(ControlConfig(rule="apgd", restart_every=7), p13.mats) == 7
    assert restart_window(ControlConfig(rule="apgd", restart_every=None), p13.mats) is None


def test_resolve_mu(p13, ieee13):
    eig = p13.mats.eig
    assert resolve_mu(ControlConfig(mu=0.3), p13) == 0.3
    assert resolve_mu(ControlConfig(mu_fraction=0.1), p13) == pytest.approx(0.1 / eig.lambda_max)
    conservative = resolve_mu(ControlConfig(mu_bound="conservative"), p13)
    assert conservative == pytest.approx(eig.conservative_bound)
    d = p13.dpgd_scaling
    expect = 1 / p13.scaled_lambda_max(d)
    assert resolve_mu(ControlConfig(rule="dpgd"), p13) == pytest.approx(expect)
    multi = plant_for(ieee13, "multi")
    assert resolve_mu(ControlConfig(mu_bound="conservative"), multi) == pytest.approx(
        multi.mats.eig.conservative_bound_multi)


@pytest.mark.parametrize("kwargs", [
    {"mu": -1.0}, {"mu_fraction": 0}, {"mu_bound": "nope"}, {"restart_every": 0},
    {"scaling": np.array([1.0, -1.0])},
])
def test_config_validation(kwargs):
    with pytest.raises(ConfigError):
        ControlConfig(**kwargs)


def test_unknown_rule():
    with pytest.raises(ValueError):
        ControlConfig(rule="newton")


def test_unconstrained_rule_reaches_closed_form(rng):
    f = random_single_feeder(rng, 6, with_pv=False)
    plant = plant_for(f)
    res = run(plant, ControlConfig(rule="unconstrained", tol=1e-13, max_iter=200000))
    assert res.converged
    q_star = -np.linalg.solve(plant.mats.X, plant.base - plant.v0)
    assert np.allclose(res.final.q, q_star, atol=1e-9)


def test_projected_rule_respects_limits(p13):
    res = run(p13, ControlConfig(rule="projected", max_iter=300))
    for s in res.states:
        assert np.all(np.abs(s.q) <= p13.qbar + 1e-15)


@pytest.mark.parametrize("rule", ["pgd", "dpgd", "apgd"])
def test_proximal_rules_reach_optimum(small_plant, rule):
    res = run(small_plant, ControlConfig(rule=rule, tol=1e-12, max_iter=200000))
    assert res.converged
    q_cd = coordinate_descent_optimum(small_plant)
    assert np.allclose(res.final.q, q_cd, atol=1e-8)


def test_dpgd_custom_scaling(small_plant):
    d = np.linspace(1, 2, small_plant.p.size)
    res = run(small_plant, ControlConfig(rule="dpgd", scaling=d, tol=1e-12, max_iter=200000))
    assert np.allclose(res.final.q, coordinate_descent_optimum(small_plant), atol=1e-8)
    with pytest.raises(ConfigError):
        run(small_plant, ControlConfig(rule="dpgd", scaling=np.ones(3)))


def test_apgd_needs_memory(small_plant):
    state = initial_state(small_plant)
    state = ControlState(t=3, q=state.q, v=state.v)
    with pytest.raises(StateError):
        step(state, small_plant, ControlConfig(rule="apgd"))


def test_state_dimension_checked(small_plant):
    bad = ControlState(t=1, q=np.zeros(2), v=np.zeros(2))
    with pytest.raises(StateError):
        step(bad, small_plant, ControlConfig())


def test_ieee1547_requires_curve(small_plant):
    state = initial_state(small_plant)
    with pytest.raises(ConfigError):
        step(state, small_plant, ControlConfig(rule="ieee1547"))
    with pytest.raises(ConfigError):
        step(state, small_plant, ControlConfig(rule="ieee1547", droop_curve="wiggly"))


def test_ieee1547_default_curve(small_plant):
    state = initial_state(small_plant)
    config = ControlConfig(rule="ieee1547", droop_curve="default", mu=0.5)
    nxt = step(state, small_plant, config)
    expect = prox(0.5 * (small_plant.v0 - state.v), 0.5 * small_plant.c, small_plant.qbar)
    assert np.allclose(nxt.q, expect)
    assert np.allclose(default_droop(0.5)(small_plant.v0 - state.v, small_plant.c,
                                          small_plant.qbar), expect)


def test_ieee1547_piecewise_curve(small_plant):
    curve = ([-0.05, -0.01, 0.01, 0.05], [-1.0, 0.0, 0.0, 1.0])
    state = initial_state(small_plant)
    nxt = step(state, small_plant, ControlConfig(rule="ieee1547", droop_curve=curve))
    assert np.all(np.abs(nxt.q) <= small_plant.qbar + 1e-15)
    with pytest.raises(ConfigError):
        droop_from_points([0.0, -1.0], [0.0, 1.0])


def test_ac_plant_uses_power_flow(ieee13):
    f = scale_injections(ieee13, 0.8, 1.0)
    plant = plant_for(f, "multi", ac=True)
    q = np.zeros_like(plant.p)
    sol = solve_ac(f, plant.p, plant.q_fixed, pairs=plant.mats.pairs)
    assert np.allclose(plant.voltages(q), sol.v)
    assert not np.allclose(plant.voltages(q), plant.linear_voltages(q))


def test_multiphase_step(ieee13, small_plant):
    plant = plant_for(scale_injections(ieee13, 0.8, 1.0), "multi")
    config = ControlConfig(rule="apgd", mu_bound="contraction", mu_fraction=0.99, tol=1e-10)
    state = initial_state(plant)
    for _ in range(3000):
        state = multiphase_step(state, plant, config)
        if state.converged:
            break
    assert state.converged
    assert fixed_point_residual(plant, state.q, resolve_mu(config, plant)) < 1e-8
    with pytest.raises(ValidationError):
        multiphase_step(initial_state(small_plant), small_plant, ControlConfig())


def test_run_records_and_stops(small_plant):
    res = run(small_plant, ControlConfig(rule="pgd", tol=1e-6))
    assert res.converged
    assert res.iterations == len(res.states) - 1
    lean = run(small_plant, ControlConfig(rule="pgd", tol=1e-6), keep=False)
    assert len(lean.states) == 1
    assert lean.iterations == res.iterations
