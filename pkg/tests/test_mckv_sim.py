import json
import math

import numpy as np
import pytest

from mfc_equilibrium.equilibrium import AffinePerturbation
from mfc_equilibrium.errors import DomainViolation, ModelError, SimulationDiverged
from mfc_equilibrium.examples import NonLQModel, NonLQParams
from mfc_equilibrium.mckv_sim import (CostSpec, InitLaw, StrategySpec, estimate_cost, estimate_cost_difference,
                                      path_costs, simulate, spike, write_cost_json)
from mfc_equilibrium.model import LQModel

from conftest import zero_model

ZERO = StrategySpec.affine_override(AffinePerturbation([[0.0]], [0.0]))
INIT = InitLaw.gaussian([1.0], [[0.25]])


def sr_strategy(sr_eq):
    return StrategySpec.lq_feedback(sr_eq["feedback"])


def test_zero_dynamics_keep_state_constant():
    ens = simulate(zero_model(), ZERO, INIT, 0.0, 50, 3, 0.05, seed=1, keep_every=1, keep_particles=50)
    X = ens.snapshots["X"]
    assert np.array_equal(X, np.repeat(X[:, :1], X.shape[1], axis=1))
    assert np.array_equal(ens.xbar, np.repeat(ens.xbar[:, :1], ens.xbar.shape[1], axis=1))


def test_linear_drift_matches_ode_with_first_order_bias():
    m = LQModel.build(1, 1, 1, 1, 1.0, B=-0.5, R=1.0)
    errs = []
    for dt in (1e-2, 1e-3):
        ens = simulate(m, ZERO, INIT, 0.0, 200, 4, dt, seed=3)
        exact = ens.xbar[:, 0, 0] * math.exp(-0.5)
        errs.append(float(np.max(np.abs(ens.xbar[:, -1, 0] - exact))))
    assert errs[0] <= 0.1 * 1e-2 and errs[1] <= 0.1 * 1e-3
    assert 8 < errs[0] / errs[1] < 12


def test_conditional_mean_follows_common_noise(sr_params, sr_model, sr_eq):
    p = sr_params
    N = 2000
    ens = simulate(sr_model, sr_strategy(sr_eq), INIT, 0.0, N, 8, 1e-3, seed=5)
    drift_free = ens.xbar[:, 0, 0][:, None] + p.sigma * p.rho * np.cumsum(ens.dW0[:, :, 0], axis=1)
    gap = np.abs(ens.xbar[:, 1:, 0] - drift_free)
    band = 1e-3 + 4 * p.sigma * math.sqrt(1 - p.rho ** 2) * math.sqrt(p.T) / math.sqrt(N)
    assert np.max(gap) <= band


def test_conditional_mean_error_shrinks_like_root_n(sr_params, sr_model, sr_eq):
    p = sr_params
    rms = []
    for N in (1000, 2000):
        ens = simulate(sr_model, sr_strategy(sr_eq), INIT, 0.0, N, 64, 1 / 100, seed=11)
        gap = ens.xbar[:, -1, 0] - ens.xbar[:, 0, 0] - p.sigma * p.rho * ens.dW0[:, :, 0].sum(axis=1)
        rms.append(math.sqrt(float(np.mean(gap ** 2))))
    assert 0.75 * math.sqrt(2) < rms[0] / rms[1] < 1.33 * math.sqrt(2)


def test_zero_costs_give_zero_estimate():
    ens = simulate(zero_model(), ZERO, INIT, 0.0, 20, 4, 0.1, seed=0)
    assert estimate_cost(ens, CostSpec(0.0, LQModel.build(1, 1, 1, 1, 1.0))) == {"mean": 0.0, "stderr": 0.0}


def test_spike_validation():
    with pytest.raises(ModelError):
        spike(ZERO, ZERO, 0.5, 0.0)
    with pytest.raises(ModelError):
        spike(ZERO, ZERO, 0.95, 0.1, T=1.0)
    with pytest.raises(ModelError):
        spike(ZERO, ZERO, -0.1, 0.1)


def test_spike_with_base_reproduces_base_paths(sr_model, sr_eq):
    base = sr_strategy(sr_eq)
    a = simulate(sr_model, base, INIT, 0.0, 100, 3, 1 / 100, seed=2)
    b = simulate(sr_model, spike(base, base, 0.3, 0.1, 1.0), INIT, 0.0, 100, 3, 1 / 100, seed=2)
    assert np.array_equal(a.xbar, b.xbar) and np.array_equal(a.final, b.final)


def test_spike_diverges_then_follows_base_rule(sr_params, sr_model, sr_eq):
    p, fb = sr_params, sr_eq["feedback"]
    base = sr_strategy(sr_eq)
    v = StrategySpec.affine_override(AffinePerturbation([[0.0]], [1.0]))
    N, dt = 40, 1 / 400
    kw = dict(keep_every=1, keep_particles=N)
    eb = simulate(sr_model, base, INIT, 0.0, N, 2, dt, seed=4, **kw)
    es = simulate(sr_model, spike(base, v, 0.25, 0.1, 1.0), INIT, 0.0, N, 2, dt, seed=4, **kw)
    Xb, Xs = eb.snapshots["X"][:, :, 0], es.snapshots["X"][:, :, 0]
    assert np.array_equal(Xb[:, :101], Xs[:, :101])
    assert np.all(Xb[:, 101] != Xs[:, 101])
    assert np.all(es.abar[:, 100:140, 0] == 1.0)

    def drift(X, t):
        mu = X.mean(axis=-1, keepdims=True)
        Th, Tb, c = fb.gains(t)
        a = -Th[0, 0] * (X - mu) - Tb[0, 0] * mu - c[0]
        return -p.k * X + p.k * mu + a

    for s in range(141, 400, 37):
        t = eb.times[s]
        noise_b = Xb[:, s + 1] - Xb[:, s] - drift(Xb[:, s], t) * dt
        noise_s = Xs[:, s + 1] - Xs[:, s] - drift(Xs[:, s], t) * dt
        assert np.max(np.abs(noise_b - noise_s)) <= 1e-12
        assert np.max(np.abs(Xb[:, s] - Xs[:, s])) > 1e-6


def test_threads_do_not_change_results(mv_model, mv_closed):
    st = StrategySpec.lq_feedback(mv_closed["feedback"])
    a = simulate(mv_model, st, INIT, 0.0, 100, 6, 1 / 50, seed=9)
    b = simulate(mv_model, st, INIT, 0.0, 100, 6, 1 / 50, seed=9, threads=3)
    for key in ("xbar", "Exx", "abar", "dW0", "final"):
        assert np.array_equal(getattr(a, key), getattr(b, key)), key


def test_common_random_numbers_reduce_variance(mv_model, mv_closed):
    base = StrategySpec.lq_feedback(mv_closed["feedback"])
    v = StrategySpec.affine_override(AffinePerturbation([[0.0]], [0.5]))
    sp = spike(base, v, 0.5, 0.1, 1.0)
    cost = CostSpec(0.5, mv_model)
    run = lambda st, seed: simulate(mv_model, st, INIT, 0.5, 1000, 32, 1 / 200, seed=seed)
    paired = estimate_cost_difference(run(sp, 1), run(base, 1), cost)
    indep = estimate_cost_difference(run(sp, 1), run(base, 2), cost)
    assert paired["stderr"] ** 2 < indep["stderr"] ** 2 / 4


def test_input_validation(mv_model):
    st = StrategySpec.affine_override(AffinePerturbation([[0.0]], [0.0]))
    with pytest.raises(ModelError):
        simulate(mv_model, st, INIT, 0.0, 1, 2, 0.1, seed=0)
    with pytest.raises(ModelError):
        simulate(mv_model, st, INIT, 0.0, 10, 2, 0.3, seed=0)
    with pytest.raises(ModelError):
        simulate(mv_model, st, InitLaw.point([1.0, 2.0]), 0.0, 10, 2, 0.1, seed=0)
    with pytest.raises(ModelError):
        CostSpec(1.5, mv_model)


def test_divergence_reported():
    m = LQModel.build(1, 1, 1, 1, 1.0, B=1e200, R=1.0)
    with pytest.raises(SimulationDiverged), np.errstate(over="ignore", invalid="ignore"):
        simulate(m, ZERO, InitLaw.point([1.0]), 0.0, 4, 1, 0.1, seed=0)


def test_power_utility_needs_positive_wealth():
    m = NonLQModel(NonLQParams())
    st = StrategySpec.scalar_linear(0.5)
    with pytest.raises(DomainViolation):
        simulate(m, st, InitLaw.gaussian([0.0], [[1.0]]), 0.0, 10, 1, 0.1, seed=0)
    with pytest.raises(ModelError):
        simulate(m, ZERO, InitLaw.point([1.0]), 0.0, 10, 1, 0.1, seed=0)
    ens = simulate(m, st, InitLaw.lognormal([0.0], [0.2]), 0.0, 50, 2, 0.1, seed=0)
    assert np.all(ens.final > 0)


def test_control_variate_is_subtracted(mv_model, mv_closed):
    st = StrategySpec.lq_feedback(mv_closed["feedback"])
    ctl = lambda t, X, mu: np.ones_like(X)
    ens = simulate(mv_model, st, INIT, 0.0, 50, 4, 0.1, seed=0, control=ctl)
    cost = CostSpec(0.0, mv_model)
    assert np.any(ens.control != 0)
    assert np.allclose(path_costs(ens, cost), path_costs(ens, cost, use_control=False) - ens.control)


def test_cost_json_keys(tmp_path, mv_model, mv_closed):
    st = StrategySpec.lq_feedback(mv_closed["feedback"])
    ens = simulate(mv_model, st, INIT, 0.0, 20, 3, 0.1, seed=0)
    path = tmp_path / "cost.json"
    write_cost_json(str(path), estimate_cost(ens, CostSpec(0.0, mv_model)), ens)
    doc = json.loads(path.read_text())
    assert set(doc) == {"mean", "stderr", "N", "M", "dt", "seed"}


def test_paths_csv(tmp_path, mv_model, mv_closed):
    st = StrategySpec.lq_feedback(mv_closed["feedback"])
    ens = simulate(mv_model, st, INIT, 0.0, 20, 2, 0.1, seed=0)
    with pytest.raises(ModelError):
        ens.write_paths_csv(str(tmp_path / "p.csv"))
    ens = simulate(mv_model, st, INIT, 0.0, 20, 2, 0.1, seed=0, keep_every=3, keep_particles=4)
    ens.write_paths_csv(str(tmp_path / "p.csv"))
    lines = (tmp_path / "p.csv").read_text().splitlines()
    assert lines[0] == "path,particle,t,x_0"
    assert len(lines) == 1 + 2 * 4 * len(ens.snapshots["steps"])


def test_init_law_round_trip():
    for law in (INIT, InitLaw.point([1.0, 2.0]), InitLaw.lognormal([0.0], [0.3])):
        assert InitLaw.from_dict(law.to_dict()) == law
    with pytest.raises(ModelError):
        InitLaw.from_dict({"kind": "cauchy", "mean": [0.0]})
    mo = InitLaw.lognormal([0.0], [0.5]).moments()
    assert mo.mean[0] == pytest.approx(math.exp(0.125))
