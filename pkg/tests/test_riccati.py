import numpy as np
import pytest

from mfc_equilibrium.errors import ConditionsViolated, ModelError, NotConverged
from mfc_equilibrium.examples import SystemicRiskParams
from mfc_equilibrium.model import DiscountFn, LQModel, TwoTimeFn
from mfc_equilibrium.riccati import (RiccatiSolution, TriangularGrid, classical_riccati, fine_times, residual,
                                     residual_table, solve_fixed_point, solve_partition, solve_systemic_risk,
                                     systemic_risk_constants, systemic_risk_residual, uwszy)

from conftest import random_model, zero_model

BLOCKS = ("lam", "beta", "gamma", "kappa")


def sup_diff(a, b):
    return max(float(np.nanmax(np.abs(a.nodes_table(k) - b.nodes_table(k)))) for k in BLOCKS)


def test_grid_validation():
    with pytest.raises(ModelError):
        TriangularGrid([0.0, 1.0])
    with pytest.raises(ModelError):
        TriangularGrid([0.1, 0.5, 1.0])
    with pytest.raises(ModelError):
        TriangularGrid.uniform(1.0, 1)
    g = TriangularGrid.uniform(2.0, 4)
    assert g.N == 4 and g.T == 2.0


def test_fine_times_layout():
    tf, th = fine_times(np.array([0.0, 0.5, 1.0]), 4)
    assert len(tf) == 9 and len(th) == 17
    assert np.allclose(th[1::2], 0.5 * (tf[:-1] + tf[1:]))


def test_uwszy_mean_variance(mv_model, mv_partition, mv_params):
    p = mv_params
    for j in (0, 77, 200):
        t = mv_partition.grid.nodes[j]
        L = mv_partition.diag_slice(j)[0][0, 0]
        th, th0 = float(p.theta(t)), float(p.theta0(t))
        blk = uwszy(mv_model, mv_partition.diag_slice(j), t, t)
        assert blk.U[0, 0] == pytest.approx((th ** 2 + th0 ** 2) * L, rel=1e-12)
        assert blk.W[0, 0] == pytest.approx(th ** 2 * L, rel=1e-12)


def test_uwszy_systemic_risk(sr_model, sr_eq):
    sol = sr_eq["solution"]
    for j in (0, 100, 200):
        t = sol.grid.nodes[j]
        blk = uwszy(sr_model, sol.diag_slice(j), t, t)
        assert blk.U[0, 0] == pytest.approx(0.5, abs=1e-12)
        assert blk.W[0, 0] == pytest.approx(0.5, abs=1e-12)


def test_uwszy_zero_dynamics():
    r = np.array([0.3, -0.2])
    m = LQModel.build(2, 2, 1, 1, 1.0, R=TwoTimeFn.constant(np.eye(2), symmetric=True),
                      r=TwoTimeFn.constant(r), rbar=TwoTimeFn.constant(2 * r))
    blk = uwszy(m, (np.eye(2), np.eye(2), np.ones(2)), 0.2, 0.5)
    assert np.array_equal(blk.U, np.eye(2)) and np.array_equal(blk.W, np.eye(2))
    assert not np.any(blk.S) and not np.any(blk.Z)
    assert np.allclose(blk.Y, 3 * r)


def test_partition_matches_mean_variance_closed_form(mv_partition, mv_closed):
    cf = mv_closed["solution"]
    L, Lc = mv_partition.nodes_table("lam"), cf.nodes_table("lam")
    assert np.nanmax(np.abs(L - Lc) / np.abs(Lc)) <= 1e-4
    assert np.nanmax(np.abs(mv_partition.nodes_table("beta"))) <= 1e-8


def test_fixed_point_matches_partition_on_mean_variance(mv_partition, mv_fixed):
    assert sup_diff(mv_partition, mv_fixed) <= 1e-6


def test_tau_independent_kernels_give_tau_independent_solution():
    m0 = random_model(2)
    kw = {}
    for key in ("Q", "Qbar", "R", "Rbar", "q", "qbar", "r", "rbar"):
        K = m0.costs[key]
        kw[key] = TwoTimeFn("tau-independent", base=K.base, symmetric=K.symmetric)
    costs = dict(m0.costs, **kw)
    term = {key: type(F)("plain", F.base, F.T, symmetric=F.symmetric) for key, F in m0.terminal.items()}
    m = LQModel(m0.d, m0.m, m0.n, m0.k, m0.T, m0.dynamics, costs, term)
    sol = solve_partition(m, 40)
    L = sol.nodes_table("lam")
    for j in range(0, 41, 8):
        col = L[:j + 1, j]
        assert np.max(np.abs(col - col[-1])) <= 1e-10


def test_zero_cost_model_gives_zero_solution():
    sol = solve_fixed_point(zero_model(2, 2, 0.5), 20)
    for k in BLOCKS:
        assert np.nanmax(np.abs(sol.nodes_table(k))) == 0.0


def test_single_picard_iteration_when_diagonal_does_not_feed_back():
    # with C = F = F0 = 0 the feedback gain vanishes, so the first pass is already the solution
    m0 = random_model(4)
    dyn = dict(m0.dynamics)
    for key in ("C", "Cbar", "F", "Fbar", "F0", "F0bar"):
        dyn[key] = type(dyn[key]).zeros(dyn[key].shape)
    costs = dict(m0.costs, r=TwoTimeFn.constant(np.zeros(m0.m)), rbar=TwoTimeFn.constant(np.zeros(m0.m)))
    m = LQModel(m0.d, m0.m, m0.n, m0.k, m0.T, dyn, costs, m0.terminal, m0.discount)
    sol = solve_fixed_point(m, 20)
    assert max(sol.info["iterations"]["lam"]) <= 2
    assert sup_diff(sol, solve_partition(m, 20)) <= 1e-12


def test_terminal_conditions_exact():
    m = random_model(1)
    for sol in (solve_partition(m, 20), solve_fixed_point(m, 20)):
        nodes = sol.grid.nodes
        assert np.array_equal(sol.lam[:, -1], m.term("P", nodes))
        assert np.array_equal(sol.beta[:, -1], m.term("P", nodes) + m.term("Pbar", nodes))
        assert np.array_equal(sol.gamma[:, -1], m.term("p", nodes) + m.term("pbar", nodes))
        assert np.all(sol.kappa[:, -1] == 0.0)


def test_symmetry_of_stored_blocks(rand_fixed):
    for k in ("lam", "beta"):
        A = rand_fixed.nodes_table(k)
        assert np.nanmax(np.abs(A - np.swapaxes(A, -1, -2))) <= 1e-10


def test_uniform_bound_reported():
    m = random_model(6)
    for N in (25, 50):
        b = solve_partition(m, N).info["bound"]
        assert b["max_norm"] <= b["limit"]


def test_conditions_gate():
    m = LQModel.build(1, 1, 1, 1, 1.0, Q=-1.0, R=1.0)
    with pytest.raises(ConditionsViolated) as exc:
        solve_partition(m, 10)
    assert exc.value.report.min_eigs["Q"] == pytest.approx(-1.0)
    with pytest.raises(ConditionsViolated):
        solve_fixed_point(m, 10)


def test_not_converged_after_halving():
    m = random_model(0)
    with pytest.raises(NotConverged) as exc:
        solve_fixed_point(m, 20, max_iter=2, tol=1e-14)
    assert exc.value.window == 0


def test_residuals_of_closed_form(mv_closed):
    sol, m = mv_closed["solution"], mv_closed["model"]
    pairs = [(i, j) for i in range(0, 200, 23) for j in range(i + 1, 200, 17)]
    for i, j, r in residual_table(m, sol, pairs):
        L = float(np.linalg.norm(sol.slice_at(i, j)[0]))
        assert max(r.values()) <= 1e-6 * (1 + L), (i, j, r)


def test_residuals_zero_model():
    m = zero_model(2, 1)
    sol = solve_fixed_point(m, 10)
    assert residual(m, sol, 0.2, 0.5) == {"rLambda": 0.0, "rbeta": 0.0, "rgamma": 0.0, "rkappa": 0.0}


def test_residual_detects_perturbation(mv_closed):
    sol, m = mv_closed["solution"], mv_closed["model"]
    bumped = RiccatiSolution(**{**sol.__dict__, "lam": sol.lam + 0.1, "lam_mid": sol.lam_mid + 0.1})
    assert residual(m, bumped, sol.grid.nodes[40], sol.grid.nodes[120])["rLambda"] > 1e-2


def test_residual_needs_ordered_pair(rand_fixed):
    with pytest.raises(ValueError):
        residual(rand_fixed.model, rand_fixed, 0.5, 0.2)


def _sr(lam, **kw):
    p = dict(k=80.0, q=1.0, c=1.0, eta=2.0, lam=lam, T=1.0)
    p.update(kw)
    return p


def test_systemic_risk_terminal():
    lam = DiscountFn("power", exponent=-0.1)
    sol = solve_systemic_risk(_sr(lam), 50, substeps=8)
    nodes = sol.grid.nodes
    assert np.allclose(sol.lam[:, -1], 0.5 * lam(1.0 - nodes), rtol=0, atol=1e-14)


def test_systemic_risk_constant_discount_matches_classical():
    lam = DiscountFn("exponential", rate=0.0)
    p = _sr(lam)
    sol = solve_systemic_risk(p, 200, substeps=8)
    L = sol.nodes_table()
    orc = classical_riccati(80.0, 1.0, 1.0, 2.0, 1.0, sol.grid.nodes)
    assert np.nanmax(np.abs(L - orc[None, :])) <= 1e-6


def test_systemic_risk_zero_costs():
    sol = solve_systemic_risk(_sr(DiscountFn("power", exponent=-0.1), q=0.0, c=0.0, eta=0.0), 20)
    assert np.nanmax(np.abs(sol.nodes_table())) == 0.0


def test_systemic_risk_precondition_advisory():
    lam = DiscountFn("power", exponent=-0.1)
    with pytest.warns(RuntimeWarning):
        sol = solve_systemic_risk(_sr(lam, k=5.0), 20, substeps=8)
    assert not sol.precondition
    assert systemic_risk_residual(_sr(lam, k=5.0), sol) < 1e-3


def test_systemic_risk_bound_under_precondition():
    lam = SystemicRiskParams().discount
    c = systemic_risk_constants(lam, 1.0, 1.0, 2.0, 1.0)
    sol = solve_systemic_risk(_sr(lam), 50, substeps=16)
    assert sol.precondition and c["k_min"] < 80
    assert sol.max_tilde <= 2 * c["C"]
