"""Equilibrium feedback, value ansatz, the G functional and the Gamma gap for LQ models.

Measures enter only through their mean and covariance.
"""
import csv
from dataclasses import dataclass

import numpy as np

from .errors import IllConditioned, ModelError
from .riccati import EIG_GUARD, derivatives_at, uwszy


@dataclass(frozen=True)
class MeasureMoments:
    mean: np.ndarray
    cov: np.ndarray

    def __post_init__(self):
        mean = np.atleast_1d(np.asarray(self.mean, dtype=float))
        cov = np.atleast_2d(np.asarray(self.cov, dtype=float))
        if cov.shape != (len(mean), len(mean)):
            raise ModelError(f"cov shape {cov.shape} does not match mean of length {len(mean)}")
        if np.max(np.abs(cov - cov.T), initial=0.0) > 1e-10 * max(1.0, np.max(np.abs(cov))):
            raise ModelError("cov must be symmetric")
        cov = 0.5 * (cov + cov.T)
        if np.linalg.eigvalsh(cov)[0] < -1e-10:
            raise ModelError("cov must be positive semidefinite")
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "cov", cov)

    @classmethod
    def point(cls, mean):
        mean = np.atleast_1d(np.asarray(mean, dtype=float))
        return cls(mean, np.zeros((len(mean), len(mean))))

    @classmethod
    def from_samples(cls, X):
        X = np.asarray(X, dtype=float)
        if X.ndim == 1:
            X = X[:, None]
        mu = X.mean(axis=0)
        Xc = X - mu
        return cls(mu, Xc.T @ Xc / len(X))

    @property
    def second_moment(self):
        return float(self.mean @ self.mean + np.trace(self.cov))


@dataclass(frozen=True)
class AffinePerturbation:
    """v(x) = A x + c."""
    A: np.ndarray
    c: np.ndarray

    def __post_init__(self):
        A = np.atleast_2d(np.asarray(self.A, dtype=float))
        c = np.atleast_1d(np.asarray(self.c, dtype=float))
        if A.shape[0] != len(c):
            raise ModelError("A rows must match length of c")
        if not (np.all(np.isfinite(A)) and np.all(np.isfinite(c))):
            raise ModelError("perturbation entries must be finite")
        object.__setattr__(self, "A", A)
        object.__setattr__(self, "c", c)

    def __call__(self, x):
        return np.asarray(x, dtype=float) @ self.A.T + self.c

    def mean_action(self, moments):
        return self.A @ moments.mean + self.c

    def to_dict(self):
        return {"A": self.A.tolist(), "c": self.c.tolist()}


class FeedbackStrategy:
    """Gains on the node grid, linearly interpolated in t.

    a = -Theta(t) (x - mean) - Thetabar(t) mean - c(t)
    """

    def __init__(self, times, Theta, Thetabar, c):
        self.times = np.asarray(times, dtype=float)
        self.Theta = np.asarray(Theta, dtype=float)
        self.Thetabar = np.asarray(Thetabar, dtype=float)
        self.c = np.asarray(c, dtype=float)
        if not (np.all(np.isfinite(self.Theta)) and np.all(np.isfinite(self.Thetabar)) and np.all(np.isfinite(self.c))):
            raise ModelError("feedback gains must be finite")

    @property
    def m(self):
        return self.Theta.shape[1]

    @property
    def d(self):
        return self.Theta.shape[2]

    @classmethod
    def from_solution(cls, model, sol):
        nodes = sol.grid.nodes
        Th, Tb, cc = [], [], []
        for j, t in enumerate(nodes):
            L, B, g = sol.diag_slice(j)
            blk = uwszy(model, (L, B, g), t, t)
            a, b, c = _gains(blk, t)
            Th.append(a)
            Tb.append(b)
            cc.append(c)
        return cls(nodes, np.array(Th), np.array(Tb), np.array(cc))

    def gains(self, t):
        t = float(np.clip(t, self.times[0], self.times[-1]))
        i = int(np.clip(np.searchsorted(self.times, t, side="right") - 1, 0, len(self.times) - 2))
        w = (t - self.times[i]) / (self.times[i + 1] - self.times[i])
        lerp = lambda X: (1 - w) * X[i] + w * X[i + 1]
        return lerp(self.Theta), lerp(self.Thetabar), lerp(self.c)

    def affine_at(self, t, mean):
        """The feedback at time t and conditional mean as an affine map of x."""
        Th, Tb, c = self.gains(t)
        mean = np.asarray(mean, dtype=float)
        return AffinePerturbation(-Th, Th @ mean - Tb @ mean - c)

    def action(self, t, x, mean):
        Th, Tb, c = self.gains(t)
        x = np.asarray(x, dtype=float)
        mean = np.asarray(mean, dtype=float)
        return -(x - mean) @ Th.T - Tb @ mean - c

    def to_dict(self):
        return {"times": self.times.tolist(), "Theta": self.Theta.tolist(),
                "Thetabar": self.Thetabar.tolist(), "c": self.c.tolist()}

    @classmethod
    def from_dict(cls, doc):
        return cls(doc["times"], doc["Theta"], doc["Thetabar"], doc["c"])


def _check_pd(A, t, block):
    w = float(np.linalg.eigvalsh(0.5 * (A + A.T))[0])
    if w <= EIG_GUARD:
        raise IllConditioned(t, block, w)


def _gains(blk, t):
    _check_pd(blk.U, t, "U")
    _check_pd(blk.W, t, "W")
    Th = np.linalg.solve(blk.U, blk.S.T)
    Tb = np.linalg.solve(blk.W, blk.Z.T)
    c = 0.5 * np.linalg.solve(blk.W, blk.Y)
    return Th, Tb, c


def feedback(strategy, t, x, moments):
    return strategy.action(t, x, moments.mean)


# ------------------------------------------------------------------ solution access

def _slice(sol, tau, t):
    """(Lambda, beta, gamma, kappa) at (tau; t); tau must be a node, t < tau is clipped."""
    i = sol.node_index(tau)
    t = max(float(t), sol.grid.nodes[i])
    try:
        j = sol.node_index(t)
        return sol.slice_at(i, j)
    except ValueError:
        return tuple(sol.value_at(b, i, t) for b in ("lam", "beta", "gamma", "kappa"))


def _diag(sol, t):
    """(Lambda, beta, gamma)(t; t); linear between nodes."""
    nodes = sol.grid.nodes
    t = float(t)
    try:
        return sol.diag_slice(sol.node_index(t))
    except ValueError:
        j = int(np.clip(np.searchsorted(nodes, t, side="right") - 1, 0, len(nodes) - 2))
        w = (t - nodes[j]) / (nodes[j + 1] - nodes[j])
        a, b = sol.diag_slice(j), sol.diag_slice(j + 1)
        return tuple((1 - w) * x + w * y for x, y in zip(a, b))


def value(sol, tau, t, moments):
    """tr(Lambda cov) + mean' beta mean + gamma . mean + kappa at (tau; t)."""
    L, B, g, k = _slice(sol, tau, t)
    mu = moments.mean
    return float(np.trace(L @ moments.cov) + mu @ B @ mu + g @ mu + k)


def g_hat(model, tau, moments):
    """Terminal functional: tr(P cov) + mean'(P + Pbar)mean + (p + pbar).mean."""
    P, Pb = model.term("P", tau), model.term("Pbar", tau)
    p = model.term("p", tau) + model.term("pbar", tau)
    mu = moments.mean
    return float(np.trace(P @ moments.cov) + mu @ (P + Pb) @ mu + p @ mu)


def _G(blk, moments, v):
    A, c = v.A, v.c
    cov, mu = moments.cov, moments.mean
    mv = A @ mu + c
    return float(np.trace(blk.U @ A @ cov @ A.T) + mv @ blk.W @ mv + 2 * np.trace(blk.S @ A @ cov)
                 + 2 * mu @ blk.Z @ mv + blk.Y @ mv)


def g_functional(model, sol, tau, t, moments, v):
    """G(tau; t, v) for an affine v, with U..Y built from the solution at (tau; t)."""
    L, B, g, _ = _slice(sol, tau, t)
    Ld, Bd, gd = _diag(sol, t)
    diag = uwszy(model, (Ld, Bd, gd), t, t)
    _check_pd(diag.U, t, "U")
    _check_pd(diag.W, t, "W")
    return _G(uwszy(model, (L, B, g), tau, t), moments, v)


def equilibrium_map(model, sol, t, moments):
    """The minimiser of G_t(.) = G(t; t, .) as an affine map."""
    blk = uwszy(model, _diag(sol, t), t, t)
    Th, Tb, c = _gains(blk, t)
    mu = moments.mean
    return AffinePerturbation(-Th, Th @ mu - Tb @ mu - c)


def gamma(model, sol, t, moments, v):
    """Gamma(t, mu; v) = G_t(v) - G_t(alpha_hat)."""
    blk = uwszy(model, _diag(sol, t), t, t)
    Th, Tb, c = _gains(blk, t)
    mu = moments.mean
    ahat = AffinePerturbation(-Th, Th @ mu - Tb @ mu - c)
    return _G(blk, moments, v) - _G(blk, moments, ahat)


def gamma_quadratic(model, sol, t, moments, v):
    """Same gap written as the quadratic form tr(U dA cov dA') + dm' W dm."""
    blk = uwszy(model, _diag(sol, t), t, t)
    Th, Tb, c = _gains(blk, t)
    mu = moments.mean
    dA = v.A + Th
    dm = v.mean_action(moments) + Tb @ mu + c
    return float(np.trace(blk.U @ dA @ moments.cov @ dA.T) + dm @ blk.W @ dm)


def master_residual(model, sol, tau, t, moments):
    """|LHS| of the LQ master equation at node pair (tau, t) for the given moments."""
    i, j = sol.node_index(tau), sol.node_index(t)
    tau, t = sol.grid.nodes[i], sol.grid.nodes[j]
    dL, dB, dG, dK = derivatives_at(sol, i, j)
    L, B, g, _ = sol.slice_at(i, j)
    c = model.coeffs(t)
    n, k = model.n, model.k
    D, D0, Bm = c["D"], c["D0"], c["B"]
    Dh, D0h, Bh = D + c["Dbar"], D0 + c["D0bar"], Bm + c["Bbar"]
    th1, th0, b0 = c["theta"], c["theta0"], c["b0"]
    Q = model.kernel("Q", tau, t)
    Qh = Q + model.kernel("Qbar", tau, t)
    qh = model.kernel("q", tau, t) + model.kernel("qbar", tau, t)
    mu, cov = moments.mean, moments.cov
    var_part = (dL + Q + sum(D[l].T @ L @ D[l] for l in range(n)) + sum(D0[l].T @ L @ D0[l] for l in range(k))
                + L @ Bm + Bm.T @ L)
    mean_part = (dB + Qh + sum(Dh[l].T @ L @ Dh[l] for l in range(n))
                 + sum(D0h[l].T @ B @ D0h[l] for l in range(k)) + B @ Bh + Bh.T @ B)
    lin_part = (dG + qh + Bh.T @ g + 2 * sum(Dh[l].T @ L @ th1[l] for l in range(n))
                + 2 * sum(D0h[l].T @ B @ th0[l] for l in range(k)) + 2 * B @ b0)
    const = (dK + b0 @ g + sum(th1[l] @ L @ th1[l] for l in range(n)) + sum(th0[l] @ B @ th0[l] for l in range(k)))
    ahat = equilibrium_map(model, sol, t, moments)
    G = _G(uwszy(model, (L, B, g), tau, t), moments, ahat)
    lhs = np.trace(var_part @ cov) + G + mu @ mean_part @ mu + lin_part @ mu + const
    return float(abs(lhs))


def gamma_scan(model, sol, times, moments, perturbations, path=None):
    """Gamma for each (t, perturbation); optional CSV export."""
    rows = []
    for t in times:
        for pid, v in enumerate(perturbations):
            rows.append((float(t), pid, gamma(model, sol, t, moments, v), gamma_quadratic(model, sol, t, moments, v)))
    if path is not None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["t", "perturbation_id", "gamma", "analytic_min_check"])
            w.writerows(rows)
    return rows
