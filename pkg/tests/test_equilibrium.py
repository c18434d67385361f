import csv
import math

import numpy as np
import pytest

from mfc_equilibrium.equilibrium import (AffinePerturbation, FeedbackStrategy, MeasureMoments, _diag,
                                         equilibrium_map, feedback, g_functional, g_hat, gamma, gamma_quadratic,
                                         gamma_scan, master_residual, value)
from mfc_equilibrium.errors import ModelError
from mfc_equilibrium.examples import SystemicRiskParams, systemic_risk_equilibrium
from mfc_equilibrium.riccati import solve_fixed_point, solve_partition, uwszy

from conftest import random_model, zero_model


def random_moments(g, d):
    A = g.normal(size=(d, d))
    return MeasureMoments(g.normal(size=d), A @ A.T / d + 0.1 * np.eye(d))


def test_moments_validation():
    with pytest.raises(ModelError):
        MeasureMoments([0.0, 1.0], [[1.0]])
    with pytest.raises(ModelError):
        MeasureMoments([0.0], [[-1.0]])
    with pytest.raises(ModelError):
        MeasureMoments([0.0, 0.0], [[1.0, 0.5], [0.0, 1.0]])
    mo = MeasureMoments.from_samples(np.array([[1.0], [3.0]]))
    assert mo.mean[0] == 2.0 and mo.cov[0, 0] == 1.0
    assert mo.second_moment == 5.0


def test_perturbation_validation():
    with pytest.raises(ModelError):
        AffinePerturbation([[1.0, 0.0]], [0.0, 1.0])
    with pytest.raises(ModelError):
        AffinePerturbation([[np.nan]], [0.0])
    v = AffinePerturbation([[2.0]], [1.0])
    assert v(np.array([[3.0]]))[0, 0] == 7.0


def test_mean_variance_feedback_values(mv_closed, mv_model, mv_partition):
    fb = FeedbackStrategy.from_solution(mv_model, mv_partition)
    mo = MeasureMoments.point([1.0])
    a0 = feedback(fb, 0.0, np.array([1.0]), mo)[0]
    a1 = feedback(fb, 0.0, np.array([2.0]), mo)[0]
    assert a0 == pytest.approx(0.2 / 0.09 * math.exp(0.4), abs=1e-6)
    assert a0 == pytest.approx(3.31516, abs=1e-5)
    assert a1 == pytest.approx(a0 - 2.0, abs=1e-9)


def test_systemic_risk_feedback_zero_at_mean(sr_model, sr_eq):
    fb = FeedbackStrategy.from_solution(sr_model, sr_eq["solution"])
    for t in (0.0, 0.37, 0.9):
        a = fb.action(t, np.array([[0.4]]), np.array([0.4]))
        assert abs(a[0, 0]) <= 1e-14


def test_feedback_serialisation(rand_fixed):
    fb = FeedbackStrategy.from_solution(rand_fixed.model, rand_fixed)
    fb2 = FeedbackStrategy.from_dict(fb.to_dict())
    x, mu = np.ones(fb.d), np.zeros(fb.d)
    assert np.allclose(fb.action(0.33, x, mu), fb2.action(0.33, x, mu))


def test_value_point_mass_no_idiosyncratic_noise():
    p = SystemicRiskParams(rho=1.0)
    sol = systemic_risk_equilibrium(p, 40, substeps=16)["solution"]
    nodes = sol.grid.nodes
    for i, j in ((0, 0), (5, 20), (10, 39)):
        assert value(sol, nodes[i], nodes[j], MeasureMoments.point([0.7])) == 0.0


def test_value_zero_model():
    sol = solve_fixed_point(zero_model(2, 2), 10)
    assert value(sol, 0.1, 0.5, MeasureMoments(np.ones(2), np.eye(2))) == 0.0


def test_value_mean_variance_closed_form(mv_partition, mv_closed):
    forms = mv_closed["forms"]
    v = value(mv_partition, 0.0, 0.0, MeasureMoments([0.0], [[1.0]]))
    assert v == pytest.approx(np.ravel(forms.lam(0.0, 0.0))[0] + np.ravel(forms.kappa(0.0, 0.0))[0], rel=1e-8)


def test_value_terminal_identity(rand_fixed):
    m = rand_fixed.model
    g = np.random.default_rng(3)
    for tau in rand_fixed.grid.nodes[::25]:
        mo = random_moments(g, m.d)
        assert value(rand_fixed, tau, m.T, mo) == pytest.approx(g_hat(m, tau, mo), rel=1e-13, abs=1e-13)


def test_g_zero_model():
    m = zero_model(2, 2)
    sol = solve_fixed_point(m, 10)
    g = np.random.default_rng(0)
    mo = random_moments(g, 2)
    v = AffinePerturbation(g.normal(size=(2, 2)), g.normal(size=2))
    want = np.trace(v.A @ mo.cov @ v.A.T) + np.sum((v.A @ mo.mean + v.c) ** 2)
    assert g_functional(m, sol, 0.2, 0.5, mo, v) == pytest.approx(want, rel=1e-12)


def test_g_gradient_vanishes_at_equilibrium(rand_fixed):
    m, sol = rand_fixed.model, rand_fixed
    g = np.random.default_rng(1)
    h = 1e-5
    for t in sol.grid.nodes[[0, 30, 77]]:
        mo = random_moments(g, m.d)
        ah = equilibrium_map(m, sol, t, mo)
        base = np.concatenate([ah.A.ravel(), ah.c])

        def G(z):
            return g_functional(m, sol, t, t, mo, AffinePerturbation(z[:ah.A.size].reshape(ah.A.shape),
                                                                      z[ah.A.size:]))
        grad = np.array([(G(base + h * e) - G(base - h * e)) / (2 * h) for e in np.eye(len(base))])
        assert np.linalg.norm(grad) <= 1e-6 * (1 + abs(G(base)))


def test_g_against_sampled_integrand(rand_fixed):
    m, sol = rand_fixed.model, rand_fixed
    g = np.random.default_rng(11)
    tau, t = sol.grid.nodes[20], sol.grid.nodes[60]
    mo = random_moments(g, m.d)
    v = AffinePerturbation(g.normal(size=(m.m, m.d)), g.normal(size=m.m))
    blk = uwszy(m, sol.slice_at(20, 60)[:3], tau, t)
    n = 10 ** 6
    X = g.multivariate_normal(mo.mean, mo.cov, size=n)
    a = v(X)
    abar = a.mean(axis=0)
    mv = mo.mean
    # per-sample integrand of the defining formula; the push-forward mean is the sample mean
    da = a - abar
    h = (np.einsum("ni,ij,nj->n", da, blk.U, da) + 2 * np.einsum("ni,ij,nj->n", X - mv, blk.S, a))
    est = h.mean() + abar @ blk.W @ abar + 2 * mv @ blk.Z @ abar + blk.Y @ abar
    se = h.std(ddof=1) / math.sqrt(n)
    # the sample-mean terms add variance too; bound it by a second pass over an independent batch
    X2 = g.multivariate_normal(mo.mean, mo.cov, size=n)
    a2 = v(X2).mean(axis=0)
    lin = lambda b: b @ blk.W @ b + 2 * mv @ blk.Z @ b + blk.Y @ b
    se = math.hypot(se, abs(lin(a2) - lin(abar)))
    assert abs(g_functional(m, sol, tau, t, mo, v) - est) <= 3 * se


def _g_hat_explicit(model, sol, i, j, mo):
    # closed form of G(tau; t, alpha_hat) written with inverse blocks
    tau, t = sol.grid.nodes[i], sol.grid.nodes[j]
    b = uwszy(model, sol.slice_at(i, j)[:3], tau, t)
    d = uwszy(model, _diag(sol, t), t, t)
    Ui, Wi = np.linalg.inv(d.U), np.linalg.inv(d.W)
    mu, cov = mo.mean, mo.cov
    VS = d.S @ Ui @ b.U @ Ui @ d.S.T - b.S @ Ui @ d.S.T - d.S @ Ui @ b.S.T
    VZ = d.Z @ Wi @ b.W @ Wi @ d.Z.T - b.Z @ Wi @ d.Z.T - d.Z @ Wi @ b.Z.T
    lin = d.Y @ Wi @ b.W @ Wi @ d.Z.T - d.Y @ Wi @ b.Z.T - b.Y @ Wi @ d.Z.T
    const = 0.25 * d.Y @ Wi @ b.W @ Wi @ d.Y - 0.5 * b.Y @ Wi @ d.Y
    return float(np.trace(VS @ cov) + mu @ VZ @ mu + lin @ mu + const)


def test_g_at_equilibrium_two_routes(rand_fixed):
    m, sol = rand_fixed.model, rand_fixed
    g = np.random.default_rng(4)
    for i, j in ((0, 0), (10, 50), (33, 90)):
        mo = random_moments(g, m.d)
        t = sol.grid.nodes[j]
        ah = equilibrium_map(m, sol, t, mo)
        direct = g_functional(m, sol, sol.grid.nodes[i], t, mo, ah)
        assert direct == pytest.approx(_g_hat_explicit(m, sol, i, j, mo), rel=1e-10, abs=1e-12)


def test_gamma_zero_at_equilibrium(rand_fixed):
    m, sol = rand_fixed.model, rand_fixed
    g = np.random.default_rng(5)
    for t in sol.grid.nodes[::20]:
        mo = random_moments(g, m.d)
        assert abs(gamma(m, sol, t, mo, equilibrium_map(m, sol, t, mo))) <= 1e-10


def test_gamma_positive_and_matches_quadratic(rand_fixed):
    m, sol = rand_fixed.model, rand_fixed
    g = np.random.default_rng(6)
    t = sol.grid.nodes[45]
    mo = random_moments(g, m.d)
    for _ in range(50):
        v = AffinePerturbation(g.normal(size=(m.m, m.d)), g.normal(size=m.m))
        G1, G2 = gamma(m, sol, t, mo, v), gamma_quadratic(m, sol, t, mo, v)
        assert G1 > 0
        assert G1 == pytest.approx(G2, rel=1e-9, abs=1e-12)


def test_gamma_scales_with_covariance(rand_fixed):
    m, sol = rand_fixed.model, rand_fixed
    g = np.random.default_rng(7)
    t = sol.grid.nodes[10]
    mo = random_moments(g, m.d)
    mo4 = MeasureMoments(mo.mean, 4 * mo.cov)
    ah, ah4 = equilibrium_map(m, sol, t, mo), equilibrium_map(m, sol, t, mo4)
    dA = g.normal(size=ah.A.shape)
    # keep the push-forward mean fixed so only the covariance term moves
    v = AffinePerturbation(ah.A + dA, ah.c - dA @ mo.mean)
    v4 = AffinePerturbation(ah4.A + dA, ah4.c - dA @ mo.mean)
    assert gamma(m, sol, t, mo4, v4) == pytest.approx(4 * gamma(m, sol, t, mo, v), rel=1e-9)


def test_cost_scaling_keeps_gains():
    m = random_model(8)
    m3 = m.scaled_costs(3.0)
    s1, s2 = solve_fixed_point(m, 40), solve_fixed_point(m3, 40)
    f1, f2 = FeedbackStrategy.from_solution(m, s1), FeedbackStrategy.from_solution(m3, s2)
    assert np.allclose(f1.Theta, f2.Theta, atol=1e-9) and np.allclose(f1.Thetabar, f2.Thetabar, atol=1e-9)
    assert np.allclose(f1.c, f2.c, atol=1e-9)
    g = np.random.default_rng(0)
    mo = random_moments(g, m.d)
    v = AffinePerturbation(g.normal(size=(m.m, m.d)), g.normal(size=m.m))
    t = s1.grid.nodes[13]
    assert gamma(m3, s2, t, mo, v) == pytest.approx(3 * gamma(m, s1, t, mo, v), rel=1e-8)


def test_master_residual_mean_variance(mv_closed):
    sol, m = mv_closed["solution"], mv_closed["model"]
    g = np.random.default_rng(9)
    nodes = sol.grid.nodes
    for _ in range(40):
        i, j = sorted(g.integers(0, 200, 2))
        mo = MeasureMoments([g.normal()], [[g.uniform(0.1, 2.0)]])
        r = master_residual(m, sol, nodes[i], nodes[j], mo)
        assert r <= 1e-5 * (1 + abs(value(sol, nodes[i], nodes[j], mo)))


def test_master_residual_zero_model():
    m = zero_model(1, 1)
    sol = solve_partition(m, 10)
    assert master_residual(m, sol, 0.2, 0.5, MeasureMoments([1.0], [[1.0]])) == 0.0


def test_gamma_scan_csv(tmp_path, rand_fixed):
    m, sol = rand_fixed.model, rand_fixed
    mo = MeasureMoments(np.zeros(m.d), np.eye(m.d))
    vs = [equilibrium_map(m, sol, 0.5, mo), AffinePerturbation(np.zeros((m.m, m.d)), np.ones(m.m))]
    rows = gamma_scan(m, sol, [0.5], mo, vs, path=str(tmp_path / "g.csv"))
    with open(tmp_path / "g.csv") as fh:
        table = list(csv.reader(fh))
    assert table[0] == ["t", "perturbation_id", "gamma", "analytic_min_check"]
    assert len(table) == 3 and abs(rows[0][2]) <= 1e-10 and rows[1][2] > 0
