"""Closed-form oracles and model builders for three worked problems.

* mean-variance portfolio selection with a non-exponential discount (LQ, no mean-field drift),
* inter-bank systemic risk with mean reversion towards the conditional mean (LQ, scalar),
* relative-performance power/log utility with controls linear in wealth (non-LQ).
"""
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.integrate import fixed_quad, quad
from scipy.interpolate import CubicSpline

from .equilibrium import FeedbackStrategy
from .errors import ModelError
from .model import DiscountFn, LQModel, TerminalFn, TimeFn, TwoTimeFn
from .riccati import RiccatiSolution, TriangularGrid, solve_systemic_risk

QUAD_TOL = 1e-10


def _as_fn(x):
    if isinstance(x, TimeFn):
        if x.shape != ():
            raise ModelError("scalar time function expected")
        return x
    return TimeFn.constant(float(x))


def _reshape(fn, shape):
    return TimeFn([(a, b, c.reshape(c.shape[:1] + shape)) for a, b, c in fn.segments], shape)


def _tail(g, ts, T):
    """Integral of g over [t, T] for every t in ts (adaptive quadrature between sorted points)."""
    ts = np.asarray(ts, dtype=float)
    u = np.unique(np.append(ts.ravel(), T))
    seg = np.array([quad(g, a, b, epsabs=QUAD_TOL * 1e-3, epsrel=QUAD_TOL)[0] for a, b in zip(u[:-1], u[1:])])
    cum = np.append(np.cumsum(seg[::-1])[::-1], 0.0)
    return cum[np.searchsorted(u, ts)]


# ------------------------------------------------------------------ mean-variance portfolio

@dataclass(frozen=True)
class MeanVarianceParams:
    r: object = 0.0
    rho: object = 0.2
    theta: object = 0.3
    theta0: object = 0.1
    eta: float = 1.0
    discount: DiscountFn = field(default_factory=lambda: DiscountFn("hyperbolic", a=1.0, b=1.0))
    T: float = 1.0

    def __post_init__(self):
        for key in ("r", "rho", "theta", "theta0"):
            object.__setattr__(self, key, _as_fn(getattr(self, key)))
        if not self.eta > 0:
            raise ModelError("eta must be positive")
        if not self.T > 0:
            raise ModelError("horizon must be positive")
        s = np.linspace(0.0, self.T, 1001)
        if np.any(self.theta(s) <= 0) or np.any(self.theta0(s) < 0):
            raise ModelError("need theta > 0 and theta0 >= 0")
        self.discount.check(self.T)
        if abs(float(self.discount(0.0)) - 1.0) > 1e-12:
            raise ModelError("discount must equal 1 at 0")


def mean_variance_model(p):
    lam, T = p.discount, p.T
    sep = lambda v: TerminalFn("separable", TimeFn.constant(np.asarray(v, dtype=float)), T, lam,
                               symmetric=np.ndim(v) == 2)
    return LQModel.build(1, 1, 1, 1, T, discount=lam, name="mean-variance",
                         B=_reshape(p.r, (1, 1)), C=_reshape(p.rho, (1, 1)),
                         F=_reshape(p.theta, (1, 1, 1)), F0=_reshape(p.theta0, (1, 1, 1)),
                         P=sep([[p.eta / 2]]), Pbar=sep([[-p.eta / 2]]), pbar=sep([-1.0]))


class _MeanVarianceForms:
    """Vectorised closed forms X(tau, t); tail integrals are memoised per time value."""

    def __init__(self, p):
        self.p = p
        self.k2v = lambda s: p.rho(s) ** 2 / (p.theta(s) ** 2 + p.theta0(s) ** 2)
        self.k2 = lambda s: float(self.k2v(s))
        self.r = lambda s: float(p.r(s))
        self.src = lambda s: float(p.rho(s) ** 2 / p.theta(s) ** 2)
        self._memo = {}

    def _compute(self, u):
        T = self.p.T
        knots = np.append(u, T) if u[-1] < T else u
        Ek_knots = _tail(self.k2, knots, T)
        Er = _tail(self.r, u, T)
        # kappa integrand rho^2/theta^2 * exp(int_s^T k2); the inner integral is local to each cell
        cells = []
        for a, b, eb in zip(knots[:-1], knots[1:], Ek_knots[1:]):
            inner = lambda s, b=b, eb=eb: eb + fixed_quad(self.k2v, s, b, n=12)[0]
            cells.append(quad(lambda s: self.src(s) * math.exp(inner(s)), a, b,
                              epsabs=QUAD_TOL * 1e-3, epsrel=QUAD_TOL)[0])
        cum = np.append(np.cumsum(np.array(cells)[::-1])[::-1], 0.0)
        for i, x in enumerate(u):
            self._memo[float(x)] = (Ek_knots[i], Er[i], cum[i])

    def _tails(self, t):
        t = np.asarray(t, dtype=float)
        u = np.unique(t)
        missing = np.array([x for x in u if float(x) not in self._memo])
        if len(missing):
            self._compute(missing)
        table = np.array([self._memo[float(x)] for x in u])
        idx = np.searchsorted(u, t)
        return table[idx, 0], table[idx, 1], table[idx, 2]

    def all(self, tau, t):
        tau, t = np.broadcast_arrays(np.asarray(tau, dtype=float), np.asarray(t, dtype=float))
        t = np.maximum(t, tau)
        Ek, Er, Ks = self._tails(t)
        w = self.p.discount(self.p.T - tau)
        lam = 0.5 * self.p.eta * w * np.exp(2 * Er - Ek)
        gam = -w * np.exp(Er)
        kap = -w * Ks / (2 * self.p.eta)
        return lam, gam, kap

    def lam(self, tau, t):
        return self.all(tau, t)[0][..., None, None]

    def gamma(self, tau, t):
        return self.all(tau, t)[1][..., None]

    def beta(self, tau, t):
        return np.zeros(np.broadcast(np.asarray(tau), np.asarray(t)).shape + (1, 1))

    def kappa(self, tau, t):
        return self.all(tau, t)[2]

    def gains(self, t):
        """(Theta, intercept) with a = -Theta (x - mean) + intercept."""
        t = np.asarray(t, dtype=float)
        rho, th, th0 = self.p.rho(t), self.p.theta(t), self.p.theta0(t)
        Ek, Er, _ = self._tails(t)
        return rho / (th ** 2 + th0 ** 2), rho / (self.p.eta * th ** 2) * np.exp(Ek - Er)


def mean_variance_closed_form(p, N=200, substeps=4):
    """Closed-form (Lambda, beta, gamma, kappa) sampled on the solver layout, plus the feedback."""
    forms = _MeanVarianceForms(p)
    grid = TriangularGrid.uniform(p.T, N)
    model = mean_variance_model(p)
    sol = RiccatiSolution.from_functions(model, grid, substeps, forms.lam, forms.beta, forms.gamma, forms.kappa)
    Th, icpt = forms.gains(grid.nodes)
    n1 = N + 1
    fb = FeedbackStrategy(grid.nodes, Th.reshape(n1, 1, 1), np.zeros((n1, 1, 1)), -icpt.reshape(n1, 1))
    return {"solution": sol, "feedback": fb, "model": model, "forms": forms}


def mean_variance_action(p, t, x, mean):
    """Equilibrium amount in the risky asset at (t, x) given the conditional mean."""
    Th, icpt = _MeanVarianceForms(p).gains(np.asarray([t], dtype=float))
    return float(-Th[0] * (x - mean) + icpt[0])


# ------------------------------------------------------------------ inter-bank systemic risk

@dataclass(frozen=True)
class SystemicRiskParams:
    k: float = 80.0
    sigma: float = 0.5
    rho: float = 0.5
    q: float = 1.0
    eta: float = 2.0
    c: float = 1.0
    discount: DiscountFn = field(default_factory=lambda: DiscountFn("power", exponent=-0.1))
    T: float = 1.0

    def __post_init__(self):
        if self.k < 0 or not self.sigma > 0 or not 0 <= self.rho <= 1:
            raise ModelError("need k >= 0, sigma > 0, rho in [0, 1]")
        if not (self.q > 0 and self.eta > 0 and self.c > 0):
            raise ModelError("q, eta, c must be positive")
        if not self.T > 0:
            raise ModelError("horizon must be positive")
        self.discount.check(self.T)
        s = np.linspace(0.0, self.T, 2001)
        if abs(float(self.discount(0.0)) - 1.0) > 1e-12:
            raise ModelError("discount must equal 1 at 0")
        if np.any(np.diff(self.discount(s)) < -1e-14):
            raise ModelError("discount must be non-decreasing for this model")

    def as_dict(self):
        return {"k": self.k, "q": self.q, "c": self.c, "eta": self.eta, "sigma": self.sigma,
                "rho": self.rho, "lam": self.discount, "T": self.T}


def systemic_risk_model(p):
    lam, T = p.discount, p.T
    sep = lambda v, sym=True: TwoTimeFn("separable", base=TimeFn.constant(np.asarray(v, dtype=float)),
                                        lam=lam, symmetric=sym)
    term = lambda v: TerminalFn("separable", TimeFn.constant(np.asarray(v, dtype=float)), T, lam, symmetric=True)
    return LQModel.build(1, 1, 1, 1, T, discount=lam, name="systemic-risk",
                         B=-p.k, Bbar=p.k, C=1.0,
                         theta=[[p.sigma * math.sqrt(1 - p.rho ** 2)]], theta0=[[p.sigma * p.rho]],
                         Q=sep([[p.eta / 2]]), Qbar=sep([[-p.eta / 2]]), R=sep([[0.5]]),
                         M=sep([[p.q / 2]], False), Mbar=sep([[-p.q / 2]], False),
                         P=term([[p.c / 2]]), Pbar=term([[-p.c / 2]]))


def _simpson_tail(f, m, tf):
    """Backward cumulative integral of a row given fine values f and Hermite midpoints m (NaN-prefixed)."""
    h = np.diff(tf)
    cell = np.where(np.isnan(f[:-1]), 0.0, h / 6 * (f[:-1] + 4 * m + f[1:]))
    out = np.append(np.cumsum(cell[::-1])[::-1], 0.0)
    out[np.isnan(f)] = np.nan
    return out


def systemic_risk_equilibrium(p, grid=200, tol=1e-10, substeps=32, max_iter=200, window=None):
    """Lambda from the scalar solver; beta = gamma = 0; kappa = sigma^2 (1 - rho^2) int Lambda."""
    sr = solve_systemic_risk(p.as_dict(), grid, tol=tol, max_iter=max_iter, window=window, substeps=substeps)
    g = sr.grid
    nodes = g.nodes
    N = g.N
    s = sr.substeps
    scale = p.sigma ** 2 * (1 - p.rho ** 2)
    kappa = np.vstack([scale * _simpson_tail(sr.lam[i], sr.lam_mid[i], sr.tf) for i in range(N + 1)])
    diag = sr.diag()
    spline = CubicSpline(nodes, diag)
    model = systemic_risk_model(p)
    th = sr.th
    dv = spline(th)
    js = np.arange(N * s)
    dg = np.stack([dv[2 * js], dv[2 * js + 1], dv[2 * js + 2]], axis=1)[..., None, None]
    zero_f = np.where(np.isnan(sr.lam), np.nan, 0.0)[..., None, None]
    zero_m = np.where(np.isnan(sr.lam_mid), np.nan, 0.0)[..., None, None]
    sol = RiccatiSolution(model, g, s, sr.tf, th, sr.lam[..., None, None], sr.lam_mid[..., None, None],
                          zero_f, zero_m, zero_f[..., 0], zero_m[..., 0], kappa,
                          dg, np.zeros_like(dg), np.zeros_like(dg[..., 0]), "systemic-risk",
                          {"constants": sr.constants, "precondition": bool(sr.precondition),
                           "max_tilde": sr.max_tilde, "iterations": sr.iterations})
    gain = 2 * (diag + p.q / 2)
    fb = FeedbackStrategy(nodes, gain.reshape(N + 1, 1, 1), np.zeros((N + 1, 1, 1)), np.zeros((N + 1, 1)))
    return {"raw": sr, "solution": sol, "feedback": fb, "lam": sr.nodes_table(), "kappa": kappa[:, ::s],
            "beta": np.zeros_like(sr.nodes_table()), "gamma": np.zeros_like(sr.nodes_table())}


# ------------------------------------------------------------------ relative-performance utility

@dataclass(frozen=True)
class NonLQParams:
    mu: object = 0.1
    sigma: object = 0.3
    sigma0: object = 0.2
    theta: float = 0.5
    delta: float = 2.0
    discount: DiscountFn = field(default_factory=lambda: DiscountFn("hyperbolic", a=1.0, b=1.0))
    T: float = 1.0

    def __post_init__(self):
        for key in ("mu", "sigma", "sigma0"):
            object.__setattr__(self, key, _as_fn(getattr(self, key)))
        if not 0 < self.theta <= 1:
            raise ModelError("theta must lie in (0, 1]")
        if not self.delta > 0:
            raise ModelError("delta must be positive")
        if not self.T > 0:
            raise ModelError("horizon must be positive")
        self.discount.check(self.T)
        s = np.linspace(0.0, self.T, 1001)
        if np.any(_kfac(self, s) <= 0):
            raise ModelError("sigma^2 + (1-theta)(1-theta+delta theta) sigma0^2 must be positive")


def _kfac(p, t):
    th, dl = p.theta, p.delta
    return p.sigma(t) ** 2 + (1 - th) * (1 - th + dl * th) * p.sigma0(t) ** 2


class NonLQModel:
    """Wealth dX = a (mu dt + sigma dB + sigma0 dW0) with a = abar(t) X and cost
    -lambda(T - tau) E[U(X_T / E[X_T | W0]^theta)], U(y) = y^p / p (p = 1 - 1/delta) or log y."""

    def __init__(self, p):
        self.params = p
        self.T = p.T
        self.theta = p.theta
        self.delta = p.delta
        self.power = 1.0 - 1.0 / p.delta
        self.log = abs(p.delta - 1.0) < 1e-14
        self._tail_cache = {}

    def mu(self, t):
        return self.params.mu(t)

    def sigma(self, t):
        return self.params.sigma(t)

    def sigma0(self, t):
        return self.params.sigma0(t)

    def K(self, t):
        return _kfac(self.params, t)

    def abar_hat(self, t):
        return self.delta * (1 - self.theta) * self.mu(t) / self.K(t)

    def _growth_tail(self, t):
        """int_t^T (1 - theta)^2 mu^2 / K ds."""
        g = lambda s: float((1 - self.theta) ** 2 * self.mu(s) ** 2 / self.K(s))
        t = np.asarray(t, dtype=float)
        return _tail(g, t, self.T)

    def A(self, tau, t):
        tau, t = np.broadcast_arrays(np.asarray(tau, dtype=float), np.asarray(t, dtype=float))
        w = self.params.discount(self.T - tau)
        if self.log:
            return -w + 0.0 * t
        return -w * np.exp(0.5 * (self.delta - 1.0) * self._growth_tail(t))

    def B(self, tau, t):
        tau, t = np.broadcast_arrays(np.asarray(tau, dtype=float), np.asarray(t, dtype=float))
        if not self.log:
            return np.zeros(tau.shape)
        return -self.params.discount(self.T - tau) * 0.5 * self._growth_tail(t)

    def utility(self, y):
        return np.log(y) if self.log else y ** self.power / self.power

    def terminal_utility(self, tau, XT):
        """Per-path cost from final states (M, N): the conditional mean is the path's particle mean."""
        XT = np.asarray(XT, dtype=float)
        mbar = XT.mean(axis=1, keepdims=True)
        return -self.params.discount(self.T - tau) * self.utility(XT / mbar ** self.theta).mean(axis=1)

    def value_samples(self, tau, t, X):
        """A E[U(x / mean^theta)] + B for one empirical measure."""
        X = np.asarray(X, dtype=float)
        y = X / X.mean() ** self.theta
        return float(self.A(tau, t) * self.utility(y).mean() + self.B(tau, t))

    def law_moments(self, init):
        """(E[U(Y)], E[U'(Y) Y]) with Y = x / mean^theta for a point or lognormal initial law."""
        if init.kind == "point":
            x0 = float(init.mean[0])
            y = x0 ** (1 - self.theta)
            return float(self.utility(y)), (1.0 if self.log else y ** self.power)
        if init.kind == "lognormal":
            m, s = float(init.mean[0]), float(init.log_sd[0])
            logbar = m + 0.5 * s * s
            if self.log:
                return m - self.theta * logbar, 1.0
            pw = self.power
            eyp = math.exp(pw * m + 0.5 * pw * pw * s * s - self.theta * pw * logbar)
            return eyp / pw, eyp
        raise ModelError("initial law for the utility model must be point or lognormal")

    def value(self, tau, t, init):
        eu, _ = self.law_moments(init)
        return float(self.A(tau, t) * eu + self.B(tau, t))

    def delta_analytic(self, t, v, init):
        """First-order gain of switching to the constant ratio v on [t, t + eps), evaluated at tau = t."""
        _, eyp = self.law_moments(init)
        dv = v - float(self.abar_hat(t))
        return float(-self.A(t, t) * self.K(t) / (2 * self.delta) * dv * dv * eyp)

    def measure_gradient(self, tau):
        """Control variate integrand: the measure derivative of V(tau; s, .) at the particles."""
        def grad(s, X, mean):
            A = float(self.A(tau, s))
            mb = mean[:, :, None]
            if self.log:
                return A * (1.0 / X - self.theta / mb)
            pw = self.power
            eyp = ((X / mb ** self.theta) ** pw).mean(axis=2, keepdims=True)
            return A * (X ** (pw - 1) * mb ** (-self.theta * pw) - self.theta * eyp / mb)
        return grad

    def ode_residual(self, tau, ts, h=1e-4):
        """max |(1/p) A' + (delta/2)(1-theta)^2 mu^2 / K A| over ts (for delta != 1) by central differences."""
        return float(np.max(self.ode_residuals(tau, ts, h)))

    def ode_residuals(self, tau, ts, h=1e-4):
        """Pointwise version of ``ode_residual``."""
        ts = np.asarray(ts, dtype=float)
        dA = (self.A(tau, ts + h) - self.A(tau, ts - h)) / (2 * h)
        A = self.A(tau, ts)
        g = (1 - self.theta) ** 2 * self.mu(ts) ** 2 / self.K(ts)
        if self.log:
            r = dA
        else:
            r = dA / self.power + 0.5 * self.delta * g * A
        return np.abs(r)


def nonlq_solution(p, times=None):
    """(A(tau; t) on the node triangle, abar_hat at the nodes)."""
    model = NonLQModel(p)
    times = np.linspace(0.0, p.T, 101) if times is None else np.asarray(times, dtype=float)
    tau, t = np.meshgrid(times, times, indexing="ij")
    A = np.where(t >= tau, model.A(tau, t), np.nan)
    return {"model": model, "times": times, "A": A, "abar": model.abar_hat(times),
            "B": np.where(t >= tau, model.B(tau, t), np.nan)}


def nonlq_verify(p, N=2000, M=32, dt=1 / 400, seed=0, eps_list=None, t0=0.0, init=None, bump=0.3, threads=1,
                 N_value=10000):
    """Particle check of the value under abar_hat and first-order spike tests within the linear class.

    The value check uses ``N_value`` particles: the empirical conditional mean carries an O(1/N) bias
    that the control variate would otherwise expose.  Spike differences share their noise and use N.
    """
    from .mckv_sim import CostSpec, InitLaw, StrategySpec, estimate_cost, simulate
    from .verifier import delta_probe

    model = NonLQModel(p)
    init = init or InitLaw.point([1.0])
    base = StrategySpec.scalar_linear(model.abar_hat)
    control = model.measure_gradient(t0)
    est = estimate_cost(simulate(model, base, init, t0, N_value, M, dt, seed, threads=threads, control=control),
                        CostSpec(t0, model))
    ens = simulate(model, base, init, t0, N, M, dt, seed, threads=threads, control=control)
    V = model.value(t0, t0, init)
    value_ok = abs(est["mean"] - V) <= 3 * est["stderr"]
    ah = float(model.abar_hat(t0))
    probes = []
    for pid, (label, v) in enumerate((("abar_hat", None), (f"abar_hat+{bump:g}", ah + bump))):
        spec = base if v is None else StrategySpec.scalar_linear(v)
        gam = 0.0 if v is None else model.delta_analytic(t0, v, init)
        rep = delta_probe(model, base, spec, t0, init, eps_list, N, M, dt, seed, CostSpec(t0, model),
                          control, gam, perturbation_id=pid, label=label, base_ensemble=ens, threads=threads)
        probes.append(rep)
    return {"value": {"mc_mean": est["mean"], "mc_stderr": est["stderr"], "ansatz": V, "passed": bool(value_ok)},
            "abar_hat_t0": ah, "probes": probes,
            "passed": bool(value_ok and all(r.passed for r in probes))}
