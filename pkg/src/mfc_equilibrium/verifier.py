"""Monte Carlo tests of the equilibrium property against the analytic gap.

A spike replaces the base strategy by v on [t, t + eps).  With common random
numbers the paired cost difference divided by eps estimates the first-order
gain; a two-point linear extrapolation in eps removes the O(eps) remainder.
"""
import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .equilibrium import (AffinePerturbation, FeedbackStrategy, _diag, _G, _gains, equilibrium_map, gamma,
                          gamma_quadratic)
from .errors import ModelError
from .mckv_sim import CostSpec, StrategySpec, _lin, _linv, path_costs, simulate, spike
from .riccati import uwszy

SIGMAS = 3.0
DEFAULT_EPS = (0.2, 0.1, 0.05, 0.025)


@dataclass
class DeltaReport:
    t: float
    moments: dict
    perturbation_id: int
    label: str
    eps: list
    eps_effective: list
    estimates: list
    stderrs: list
    extrapolated: float
    extrapolated_stderr: float
    gamma: float
    flags: dict = field(default_factory=dict)
    passed: bool = False

    def __post_init__(self):
        if len(self.eps) < 3 or any(b >= a for a, b in zip(self.eps, self.eps[1:])):
            raise ModelError("eps list must be strictly decreasing with at least 3 entries")

    def to_dict(self):
        return asdict(self)


def default_eps(T, t):
    return [f * (T - t) for f in DEFAULT_EPS]


def _window_steps(times, t, eps):
    # number of simulation steps whose left point lies in [t, t + eps)
    left = times[:-1]
    return int(np.count_nonzero((left >= t - 1e-12) & (left < t + eps - 1e-12)))


def _mean_se(x):
    x = np.asarray(x, dtype=float)
    se = float(np.std(x, ddof=1) / math.sqrt(len(x))) if len(x) > 1 else float("nan")
    return float(np.mean(x)), se


def delta_probe(model, base, v_spec, t, init, eps_list, N, M, dt, seed, cost, control, gamma_value,
                perturbation_id=0, label="", base_ensemble=None, threads=1, zero_tol=1e-10):
    """Spike test of one perturbation; works for any simulable model and cost."""
    T = float(model.T)
    eps_list = default_eps(T, t) if eps_list is None else [float(e) for e in eps_list]
    if len(eps_list) < 3 or any(b >= a for a, b in zip(eps_list, eps_list[1:])):
        raise ModelError("eps list must be strictly decreasing with at least 3 entries")
    if not t + eps_list[0] < T + 1e-12:
        raise ModelError("largest spike window must end before T")
    ens_b = base_ensemble
    if ens_b is None:
        ens_b = simulate(model, base, init, t, N, M, dt, seed, threads=threads, control=control)
    cb = path_costs(ens_b, cost)
    per_path, eff = [], []
    for eps in eps_list:
        n = _window_steps(ens_b.times, t, eps)
        if n < 1:
            raise ModelError(f"spike width {eps} shorter than the time step")
        e = n * ens_b.dt
        ens_s = simulate(model, spike(base, v_spec, t, eps, T), init, t, N, M, dt, seed, threads=threads,
                         control=control)
        per_path.append((path_costs(ens_s, cost) - cb) / e)
        eff.append(e)
    ests = [_mean_se(x) for x in per_path]
    e1, e2 = eff[-2], eff[-1]
    rich = (e1 * per_path[-1] - e2 * per_path[-2]) / (e1 - e2)
    R, Rse = _mean_se(rich)
    flags = {}
    tol_band = lambda se: SIGMAS * se if np.isfinite(se) else 0.0
    zero_case = abs(gamma_value) <= zero_tol
    if zero_case:
        flags["extrapolated_near_zero"] = bool(abs(R) <= tol_band(Rse))
        flags["per_eps_near_zero"] = [bool(abs(m) <= tol_band(s)) for m, s in ests]
        passed = flags["extrapolated_near_zero"]
    else:
        flags["matches_gamma"] = bool(abs(R - gamma_value) <= tol_band(Rse))
        flags["positive"] = bool(R > tol_band(Rse))
        errs = [abs(m - gamma_value) for m, _ in ests]
        flags["error_shrinks"] = bool(all(
            errs[i] <= errs[i - 1] + SIGMAS * math.hypot(ests[i][1], ests[i - 1][1]) for i in range(1, len(errs))))
        passed = flags["matches_gamma"] and flags["positive"]
    mom = init.moments()
    return DeltaReport(float(t), {"mean": mom.mean.tolist(), "cov": mom.cov.tolist()}, int(perturbation_id),
                       str(label), list(eps_list), eff, [m for m, _ in ests], [s for _, s in ests], R, Rse,
                       float(gamma_value), flags, bool(passed))


def lq_control(sol, tau):
    """Measure derivative 2 Lambda (x - mean) + 2 beta mean + gamma of V(tau; s, .) as a control variate."""
    i = sol.node_index(tau)
    memo = {}

    def grad(s, X, mean):
        if s not in memo:
            memo.clear()
            memo[s] = (sol.value_at("lam", i, s), sol.value_at("beta", i, s), sol.value_at("gamma", i, s))
        L, B, g = memo[s]
        return 2 * _lin(L, X - mean[:, :, None]) + (2 * _linv(B, mean) + g)[:, :, None]
    return grad


def estimate_delta(model, sol, v, t, init, eps_list=None, N=2000, M=32, dt=None, seed=0, threads=1,
                   control=True, perturbation_id=0, label="", base_ensemble=None, feedback=None):
    """DeltaReport for an affine perturbation v of the LQ equilibrium at node time t."""
    T = float(model.T)
    sol.node_index(t)
    fb = feedback if feedback is not None else FeedbackStrategy.from_solution(model, sol)
    dt = (T - t) / 800 if dt is None else float(dt)
    base = StrategySpec.lq_feedback(fb)
    moments = init.moments()
    g = gamma(model, sol, t, moments, v)
    ctrl = lq_control(sol, t) if control else None
    return delta_probe(model, base, StrategySpec.affine_override(v), t, init, eps_list, N, M, dt, seed,
                       CostSpec(t, model), ctrl, g, perturbation_id, label, base_ensemble, threads)


def base_ensemble(model, sol, t, init, N, M, dt, seed, threads=1, control=True, feedback=None):
    """The unperturbed run shared by several probes at the same (t, init, seed)."""
    fb = feedback if feedback is not None else FeedbackStrategy.from_solution(model, sol)
    ctrl = lq_control(sol, t) if control else None
    return simulate(model, StrategySpec.lq_feedback(fb), init, t, N, M, dt, seed, threads=threads, control=ctrl)


def random_perturbations(model, sol, t, moments, count, seed=0, scale=1.0):
    """Affine maps scattered around the equilibrium map at (t, moments)."""
    rng = np.random.default_rng(seed)
    ah = equilibrium_map(model, sol, t, moments)
    return [AffinePerturbation(ah.A + scale * rng.standard_normal(ah.A.shape),
                               ah.c + scale * rng.standard_normal(ah.c.shape)) for _ in range(count)]


def equilibrium_certificate(model, sol, times, moments_samples, count=1000, tol=1e-8, seed=0):
    """Gamma at the equilibrium map and its minimum over random affine maps, per (t, moments)."""
    rng = np.random.default_rng(seed)
    probes = []
    ok = True
    for t in times:
        blk = uwszy(model, _diag(sol, t), t, t)
        Th, Tb, c = _gains(blk, t)
        for mo in moments_samples:
            mu = mo.mean
            ah = AffinePerturbation(-Th, Th @ mu - Tb @ mu - c)
            g_hat = _G(blk, mo, ah)
            g0 = gamma(model, sol, t, mo, ah)
            worst, gap = np.inf, 0.0
            for _ in range(count):
                v = AffinePerturbation(ah.A + rng.standard_normal(ah.A.shape), ah.c + rng.standard_normal(ah.c.shape))
                gv = _G(blk, mo, v) - g_hat
                worst = min(worst, gv)
                gap = max(gap, abs(gv - gamma_quadratic(model, sol, t, mo, v)) / max(1.0, abs(gv)))
            passed = bool(g0 <= tol and worst >= -tol)
            ok = ok and passed
            probes.append({"t": float(t), "mean": mu.tolist(), "cov": mo.cov.tolist(), "gamma_hat": float(g0),
                           "min_gamma": float(worst), "route_gap": float(gap), "passed": passed})
    return {"passed": bool(ok), "tol": tol, "count": int(count), "probes": probes}


def write_delta_report(path, reports, **extra):
    doc = {"passed": bool(all(r.passed for r in reports)), "reports": [r.to_dict() for r in reports]}
    doc.update(extra)
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
    return doc
