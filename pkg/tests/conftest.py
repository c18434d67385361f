import numpy as np
import pytest

from mfc_equilibrium.examples import (MeanVarianceParams, SystemicRiskParams, mean_variance_closed_form,
                                      mean_variance_model, systemic_risk_equilibrium, systemic_risk_model)
from mfc_equilibrium.model import DiscountFn, LQModel, TerminalFn, TimeFn, TwoTimeFn
from mfc_equilibrium.riccati import solve_fixed_point, solve_partition


def const(v):
    return TimeFn.constant(np.array(v, dtype=float))


def random_model(seed, scale=1.0):
    """A random model with hyperbolic discount that passes the positivity and monotonicity checks."""
    g = np.random.default_rng(seed)
    d, m = int(g.integers(1, 4)), int(g.integers(1, 4))
    lam = DiscountFn("hyperbolic", a=g.uniform(0.5, 2.0), b=1.0)

    def psd(k, lo=0.0):
        A = g.normal(size=(k, k)) * 0.5
        return A @ A.T / k + lo * np.eye(k)

    def sep(v, sym=True):
        return TwoTimeFn("separable", base=const(v), lam=lam, symmetric=sym)

    def term(v, sym=True):
        return TerminalFn("separable", const(v), 1.0, lam, sym)

    Q0, R0, P0 = psd(d), psd(m, 0.5), psd(d)
    kw = dict(B=g.normal(size=(d, d)) * 0.3 * scale, Bbar=g.normal(size=(d, d)) * 0.2 * scale,
              C=g.normal(size=(d, m)) * 0.5, Cbar=g.normal(size=(d, m)) * 0.2, b0=g.normal(size=d) * 0.2,
              theta=g.normal(size=(1, d)) * 0.3, D=g.normal(size=(1, d, d)) * 0.2, F=g.normal(size=(1, d, m)) * 0.3,
              Dbar=g.normal(size=(1, d, d)) * 0.1, Fbar=g.normal(size=(1, d, m)) * 0.1,
              theta0=g.normal(size=(1, d)) * 0.2, D0=g.normal(size=(1, d, d)) * 0.2, F0=g.normal(size=(1, d, m)) * 0.2,
              Q=sep(Q0), Qbar=sep(psd(d) * 0.5 - 0.3 * Q0), R=sep(R0), Rbar=sep(psd(m) * 0.3),
              q=sep(g.normal(size=d) * 0.3, False), qbar=sep(g.normal(size=d) * 0.3, False),
              r=sep(g.normal(size=m) * 0.3, False), rbar=sep(g.normal(size=m) * 0.2, False),
              P=term(P0), Pbar=term(psd(d) * 0.3), p=term(g.normal(size=d) * 0.3, False),
              pbar=term(g.normal(size=d) * 0.2, False))
    return LQModel.build(d, m, 1, 1, 1.0, discount=lam, name=f"random-{seed}", **kw)


def zero_model(d=1, m=1, R=1.0):
    """All dynamics and costs zero except R = R * I."""
    return LQModel.build(d, m, 1, 1, 1.0, R=TwoTimeFn.constant(R * np.eye(m), symmetric=True))


@pytest.fixture(scope="session")
def mv_params():
    return MeanVarianceParams()


@pytest.fixture(scope="session")
def mv_model(mv_params):
    return mean_variance_model(mv_params)


@pytest.fixture(scope="session")
def mv_closed(mv_params):
    return mean_variance_closed_form(mv_params, 200)


@pytest.fixture(scope="session")
def mv_partition(mv_model):
    return solve_partition(mv_model, 200)


@pytest.fixture(scope="session")
def mv_fixed(mv_model):
    return solve_fixed_point(mv_model, 200)


@pytest.fixture(scope="session")
def sr_params():
    return SystemicRiskParams()


@pytest.fixture(scope="session")
def sr_model(sr_params):
    return systemic_risk_model(sr_params)


@pytest.fixture(scope="session")
def sr_eq(sr_params):
    return systemic_risk_equilibrium(sr_params, 200)


@pytest.fixture(scope="session")
def rand_fixed():
    return solve_fixed_point(random_model(0), 100)
