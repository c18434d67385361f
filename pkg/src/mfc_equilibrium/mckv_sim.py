"""Interacting-particle simulation of the conditional McKean-Vlasov dynamics.

Each common-noise path j carries N particles whose empirical law stands in
for the conditional law.  Arrays are laid out as (path, component, particle)
so that every reduction over particles runs along a contiguous axis; together
with one counter-based generator per path this makes the output independent
of how paths are split across worker threads.
"""
import csv
import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .errors import DomainViolation, ModelError, SimulationDiverged


# ------------------------------------------------------------------ strategies

@dataclass(frozen=True)
class StrategySpec:
    """Closed-loop strategy.

    kinds: ``lq-feedback`` (a FeedbackStrategy), ``affine`` (fixed v(x) = Ax + c),
    ``scalar-linear`` (a = abar(t) x, for the power-utility model) and
    ``spiked`` (v on [t, t + eps), base elsewhere).
    """
    kind: str
    feedback: object = None
    affine: object = None
    abar: object = None
    base: "StrategySpec" = None
    v: "StrategySpec" = None
    t: float = 0.0
    eps: float = 0.0

    @classmethod
    def lq_feedback(cls, strategy):
        return cls("lq-feedback", feedback=strategy)

    @classmethod
    def affine_override(cls, v):
        return cls("affine", affine=v)

    @classmethod
    def scalar_linear(cls, abar):
        if not callable(abar):
            value = float(abar)
            abar = lambda t, value=value: value
        return cls("scalar-linear", abar=abar)

    def resolve(self, t):
        """The non-spiked strategy in force at time t."""
        s = self
        while s.kind == "spiked":
            s = s.v if s.t - 1e-12 <= t < s.t + s.eps - 1e-12 else s.base
        return s

    def is_scalar_linear(self):
        if self.kind == "spiked":
            return self.base.is_scalar_linear() and self.v.is_scalar_linear()
        return self.kind == "scalar-linear"


def spike(base, v, t, eps, T=None):
    """Strategy equal to v on [t, t + eps) and base elsewhere."""
    if not eps > 0:
        raise ModelError("spike width must be positive")
    if t < 0 or (T is not None and t + eps > T + 1e-12):
        raise ModelError(f"spike window [{t}, {t + eps}) not inside [0, {T}]")
    return StrategySpec("spiked", base=base, v=v, t=float(t), eps=float(eps))


# ------------------------------------------------------------------ initial laws

@dataclass(frozen=True)
class InitLaw:
    """Initial law: ``gaussian`` (mean, cov), ``point`` (mean) or ``lognormal`` (log-mean, log-sd per component)."""
    kind: str
    mean: tuple
    cov: tuple = None
    log_sd: tuple = None

    @classmethod
    def gaussian(cls, mean, cov):
        mean = np.atleast_1d(np.asarray(mean, dtype=float))
        cov = np.atleast_2d(np.asarray(cov, dtype=float))
        return cls("gaussian", tuple(mean), tuple(map(tuple, cov)))

    @classmethod
    def point(cls, mean):
        return cls("point", tuple(np.atleast_1d(np.asarray(mean, dtype=float))))

    @classmethod
    def lognormal(cls, log_mean, log_sd):
        return cls("lognormal", tuple(np.atleast_1d(np.asarray(log_mean, dtype=float))),
                   log_sd=tuple(np.atleast_1d(np.asarray(log_sd, dtype=float))))

    @property
    def d(self):
        return len(self.mean)

    def sample(self, gen, N):
        d = self.d
        mean = np.asarray(self.mean)
        if self.kind == "point":
            return np.repeat(mean[:, None], N, axis=1)
        z = gen.standard_normal((d, N))
        if self.kind == "gaussian":
            L = np.linalg.cholesky(np.asarray(self.cov) + 1e-300 * np.eye(d)) if np.any(self.cov) else np.zeros((d, d))
            return mean[:, None] + _lin(L, z[None])[0]
        if self.kind == "lognormal":
            sd = np.asarray(self.log_sd)
            return np.exp(mean[:, None] + sd[:, None] * z)
        raise ModelError(f"unknown initial law {self.kind!r}")

    def moments(self):
        from .equilibrium import MeasureMoments
        mean = np.asarray(self.mean)
        if self.kind == "point":
            return MeasureMoments.point(mean)
        if self.kind == "gaussian":
            return MeasureMoments(mean, np.asarray(self.cov))
        sd = np.asarray(self.log_sd)
        m = np.exp(mean + sd ** 2 / 2)
        return MeasureMoments(m, np.diag((np.exp(sd ** 2) - 1) * m ** 2))

    def to_dict(self):
        out = {"kind": self.kind, "mean": list(self.mean)}
        if self.cov is not None:
            out["cov"] = [list(r) for r in self.cov]
        if self.log_sd is not None:
            out["log_sd"] = list(self.log_sd)
        return out

    @classmethod
    def from_dict(cls, doc):
        kind = doc.get("kind", "point")
        if kind == "gaussian":
            return cls.gaussian(doc["mean"], doc["cov"])
        if kind == "lognormal":
            return cls.lognormal(doc["mean"], doc["log_sd"])
        if kind == "point":
            return cls.point(doc["mean"])
        raise ModelError(f"unknown initial law {kind!r}")


# ------------------------------------------------------------------ small linear algebra without BLAS

def _lin(A, X):
    """(p,q) matrix applied to (Mc,q,N) stacks, by explicit sums."""
    p, q = A.shape
    if p == 1 and q == 1:
        return X * A[0, 0]
    out = np.empty((X.shape[0], p) + X.shape[2:])
    for i in range(p):
        acc = None
        for j in range(q):
            if A[i, j] != 0.0:
                acc = X[:, j] * A[i, j] if acc is None else acc + X[:, j] * A[i, j]
        out[:, i] = 0.0 if acc is None else acc
    return out


def _linv(A, v):
    """(p,q) matrix applied to (Mc,q) vectors."""
    p, q = A.shape
    out = np.zeros((v.shape[0], p))
    for i in range(p):
        for j in range(q):
            if A[i, j] != 0.0:
                out[:, i] += A[i, j] * v[:, j]
    return out


def _pmean(X):
    return X.mean(axis=-1)


# ------------------------------------------------------------------ ensemble

@dataclass
class ParticleEnsemble:
    """Per-step empirical moments of every common-noise path plus final states.

    xbar (M, S+1, d), Exx (M, S+1, d, d), abar (M, S, m), Eaa (M, S, m, m),
    Exa (M, S, d, m), dW0 (M, S, k), final (M, N, d).  ``control`` is the
    per-path martingale control variate (zeros if none was requested).
    """
    N: int
    M: int
    dt: float
    t0: float
    T: float
    seed: int
    times: np.ndarray
    xbar: np.ndarray
    Exx: np.ndarray
    abar: np.ndarray
    Eaa: np.ndarray
    Exa: np.ndarray
    dW0: np.ndarray
    final: np.ndarray
    control: np.ndarray
    snapshots: dict = field(default_factory=dict)
    kind: str = "lq"

    def empirical(self, j, step=None):
        """(mean, cov) of path j at a step (default: final)."""
        step = len(self.times) - 1 if step is None else step
        mu = self.xbar[j, step]
        return mu, self.Exx[j, step] - np.outer(mu, mu)

    def write_paths_csv(self, path):
        if not self.snapshots:
            raise ModelError("no snapshots kept; simulate with keep_every > 0")
        steps, X = self.snapshots["steps"], self.snapshots["X"]
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["path", "particle", "t"] + [f"x_{i}" for i in range(X.shape[2])])
            for j in range(X.shape[0]):
                for p in range(X.shape[3]):
                    for a, s in enumerate(steps):
                        w.writerow([j, p, repr(float(self.times[s]))] + [repr(float(x)) for x in X[j, a, :, p]])


def _nonlq_like(model):
    return hasattr(model, "sigma0") and hasattr(model, "mu") and not hasattr(model, "dynamics")


def _steps(T, t0, dt):
    n = (T - t0) / dt
    S = int(round(n))
    if S < 1 or abs(S * dt - (T - t0)) > 1e-9 * max(1.0, T):
        raise ModelError(f"dt={dt} does not divide the horizon {T - t0}")
    return S


def simulate(model, strategy, init, t0, N, M, dt, seed, threads=1, control=None, keep_every=0, keep_particles=10):
    """Euler-Maruyama particle simulation on [t0, T].

    ``control(t, X, mean)`` may return the measure derivative of a value
    function at the particles, shape (Mc, d, N); the stochastic integral of it
    against the noise is accumulated per path as a zero-mean control variate.
    """
    N, M = int(N), int(M)
    if N < 2 or M < 1:
        raise ModelError("need N >= 2 particles and M >= 1 paths")
    T = float(model.T)
    if not 0 <= t0 < T:
        raise ModelError("t0 must lie in [0, T)")
    S = _steps(T, t0, dt)
    times = t0 + dt * np.arange(S + 1)
    times[-1] = T
    nonlq = _nonlq_like(model)
    if nonlq and not strategy.is_scalar_linear():
        raise ModelError("the power-utility model accepts only scalar-linear strategies")
    d = 1 if nonlq else model.d
    if init.d != d:
        raise ModelError(f"initial law dimension {init.d} != state dimension {d}")
    threads = max(1, int(threads))
    chunk = math.ceil(M / threads)
    bounds = [(a, min(M, a + chunk)) for a in range(0, M, chunk)]
    runner = _run_nonlq if nonlq else _run_lq
    args = (model, strategy, init, times, N, dt, seed, control, keep_every, keep_particles)
    if len(bounds) == 1:
        parts = [runner(*args, *bounds[0])]
    else:
        with ThreadPoolExecutor(max_workers=threads) as ex:
            parts = list(ex.map(lambda b: runner(*args, *b), bounds))
    cat = lambda key: np.concatenate([p[key] for p in parts], axis=0)
    snaps = {}
    if keep_every:
        snaps = {"steps": parts[0]["snap_steps"], "X": cat("snap")}
    return ParticleEnsemble(N, M, float(dt), float(t0), T, int(seed), times, cat("xbar"), cat("Exx"), cat("abar"),
                            cat("Eaa"), cat("Exa"), cat("dW0"), np.swapaxes(cat("final"), 1, 2), cat("cv"), snaps,
                            "nonlq" if nonlq else "lq")


def _generators(seed, j0, j1):
    return [np.random.Generator(np.random.Philox(np.random.SeedSequence([int(seed), j]))) for j in range(j0, j1)]


def _alloc(Mc, S, d, m, k, N, keep_every, keep_particles):
    out = {"xbar": np.zeros((Mc, S + 1, d)), "Exx": np.zeros((Mc, S + 1, d, d)), "abar": np.zeros((Mc, S, m)),
           "Eaa": np.zeros((Mc, S, m, m)), "Exa": np.zeros((Mc, S, d, m)), "dW0": np.zeros((Mc, S, k)),
           "cv": np.zeros(Mc)}
    if keep_every:
        steps = list(range(0, S + 1, keep_every))
        if steps[-1] != S:
            steps.append(S)
        out["snap_steps"] = steps
        out["snap"] = np.zeros((Mc, len(steps), d, min(N, keep_particles)))
    return out


def _second(X, Y):
    """Particle averages of X_i Y_j: (Mc,p,N),(Mc,q,N) -> (Mc,p,q)."""
    out = np.empty((X.shape[0], X.shape[1], Y.shape[1]))
    for i in range(X.shape[1]):
        for j in range(Y.shape[1]):
            out[:, i, j] = _pmean(X[:, i] * Y[:, j])
    return out


def _actions(spec, t, X, mu):
    s = spec.resolve(t)
    if s.kind == "lq-feedback":
        Th, Tb, c = s.feedback.gains(t)
        return -_lin(Th, X - mu[:, :, None]) - (_linv(Tb, mu) + c)[:, :, None]
    if s.kind == "affine":
        return _lin(s.affine.A, X) + s.affine.c[None, :, None]
    raise ModelError(f"strategy kind {s.kind!r} not usable for an LQ model")


def _run_lq(model, strategy, init, times, N, dt, seed, control, keep_every, keep_particles, j0, j1):
    d, m, n, k = model.d, model.m, model.n, model.k
    S = len(times) - 1
    Mc = j1 - j0
    gens = _generators(seed, j0, j1)
    X = np.stack([init.sample(g, N) for g in gens])
    out = _alloc(Mc, S, d, m, k, N, keep_every, keep_particles)
    co = model.coeffs(times[:-1])
    sq = math.sqrt(dt)
    snap_i = 0
    for s in range(S + 1):
        mu = _pmean(X)
        out["xbar"][:, s] = mu
        out["Exx"][:, s] = _second(X, X)
        if keep_every and s in out["snap_steps"]:
            out["snap"][:, snap_i] = X[:, :, :keep_particles]
            snap_i += 1
        if s == S:
            break
        t = times[s]
        a = _actions(strategy, t, X, mu)
        ab = _pmean(a)
        out["abar"][:, s] = ab
        out["Eaa"][:, s] = _second(a, a)
        out["Exa"][:, s] = _second(X, a)
        dB = np.stack([g.standard_normal((n, N)) for g in gens]) * sq
        dW = np.stack([g.standard_normal(k) for g in gens]) * sq
        out["dW0"][:, s] = dW
        c = {key: val[s] for key, val in co.items()}
        drift = (_lin(c["B"], X) + _lin(c["C"], a)
                 + (c["b0"][None] + _linv(c["Bbar"], mu) + _linv(c["Cbar"], ab))[:, :, None])
        step = drift * dt
        grad = control(t, X, mu) if control is not None else None
        for l in range(n):
            sig = (_lin(c["D"][l], X) + _lin(c["F"][l], a)
                   + (c["theta"][l][None] + _linv(c["Dbar"][l], mu) + _linv(c["Fbar"][l], ab))[:, :, None])
            step = step + sig * dB[:, l][:, None, :]
            if grad is not None:
                out["cv"] += _pmean(np.sum(grad * sig * dB[:, l][:, None, :], axis=1))
        for l in range(k):
            sig = (_lin(c["D0"][l], X) + _lin(c["F0"][l], a)
                   + (c["theta0"][l][None] + _linv(c["D0bar"][l], mu) + _linv(c["F0bar"][l], ab))[:, :, None])
            step = step + sig * dW[:, l][:, None, None]
            if grad is not None:
                out["cv"] += _pmean(np.sum(grad * sig, axis=1)) * dW[:, l]
        X = X + step
        if not np.all(np.isfinite(X)):
            raise SimulationDiverged(s + 1)
    out["final"] = X
    return out


def _run_nonlq(model, strategy, init, times, N, dt, seed, control, keep_every, keep_particles, j0, j1):
    S = len(times) - 1
    Mc = j1 - j0
    gens = _generators(seed, j0, j1)
    X = np.stack([init.sample(g, N) for g in gens])
    if np.any(X <= 0):
        raise DomainViolation("initial law must be supported on positive reals")
    Y = np.log(X)
    out = _alloc(Mc, S, 1, 1, 1, N, keep_every, keep_particles)
    mu_t, sig_t, sig0_t = model.mu(times[:-1]), model.sigma(times[:-1]), model.sigma0(times[:-1])
    sq = math.sqrt(dt)
    snap_i = 0
    for s in range(S + 1):
        X = np.exp(Y)
        mu = _pmean(X)
        out["xbar"][:, s] = mu
        out["Exx"][:, s] = _second(X, X)
        if keep_every and s in out["snap_steps"]:
            out["snap"][:, snap_i] = X[:, :, :keep_particles]
            snap_i += 1
        if s == S:
            break
        t = times[s]
        al = float(strategy.resolve(t).abar(t))
        a = al * X
        out["abar"][:, s] = _pmean(a)
        out["Eaa"][:, s] = _second(a, a)
        out["Exa"][:, s] = _second(X, a)
        dB = np.stack([g.standard_normal((1, N)) for g in gens]) * sq
        dW = np.stack([g.standard_normal(1) for g in gens]) * sq
        out["dW0"][:, s] = dW
        m_, s1, s0 = float(mu_t[s]), float(sig_t[s]), float(sig0_t[s])
        if control is not None:
            grad = control(t, X, mu)
            out["cv"] += _pmean((grad * a * s1 * dB)[:, 0]) + _pmean((grad * a * s0)[:, 0]) * dW[:, 0]
        Y = Y + (al * m_ - 0.5 * al * al * (s1 * s1 + s0 * s0)) * dt + al * s1 * dB + al * s0 * dW[:, :, None]
        if not np.all(np.isfinite(Y)):
            raise SimulationDiverged(s + 1)
    out["final"] = np.exp(Y)
    return out


# ------------------------------------------------------------------ costs

@dataclass(frozen=True)
class CostSpec:
    """Cost evaluated at time ``tau``: the LQ functional of ``model`` or the power-utility objective."""
    tau: float
    model: object

    def __post_init__(self):
        if not 0 <= self.tau <= self.model.T:
            raise ModelError("cost evaluation time outside [0, T]")


def path_costs(ens, cost, use_control=True):
    """Per-path cost realisations (M,), control variate subtracted when present."""
    model, tau = cost.model, cost.tau
    if ens.kind == "nonlq":
        vals = model.terminal_utility(tau, ens.final[:, :, 0])
    else:
        vals = _lq_path_costs(ens, model, tau)
    if use_control:
        vals = vals - ens.control
    return vals


def _lq_path_costs(ens, model, tau):
    t = ens.times[:-1]
    tq = np.full_like(t, tau)
    K = lambda key: model.kernel(key, tq, t)
    mu = ens.xbar[:, :-1]
    cov2 = ens.Exx[:, :-1]
    ab = ens.abar
    tr = lambda A, B: np.einsum("sij,msji->ms", A, B)
    f = (tr(K("Q"), cov2) + np.einsum("msi,sij,msj->ms", mu, K("Qbar"), mu)
         + tr(K("R"), ens.Eaa) + np.einsum("msi,sij,msj->ms", ab, K("Rbar"), ab)
         + 2 * np.einsum("sij,msij->ms", K("M"), ens.Exa) + 2 * np.einsum("msi,sij,msj->ms", mu, K("Mbar"), ab)
         + np.einsum("si,msi->ms", K("q") + K("qbar"), mu) + np.einsum("si,msi->ms", K("r") + K("rbar"), ab))
    muT, ExxT = ens.xbar[:, -1], ens.Exx[:, -1]
    P, Pb = model.term("P", tau), model.term("Pbar", tau)
    p = model.term("p", tau) + model.term("pbar", tau)
    g = np.einsum("ij,mji->m", P, ExxT) + np.einsum("mi,ij,mj->m", muT, Pb, muT) + muT @ p
    return f.sum(axis=1) * ens.dt + g


def estimate_cost(ens, cost, use_control=True):
    vals = path_costs(ens, cost, use_control)
    M = len(vals)
    se = float(np.std(vals, ddof=1) / math.sqrt(M)) if M > 1 else float("nan")
    return {"mean": float(np.mean(vals)), "stderr": se}


def estimate_cost_difference(ens_a, ens_b, cost, use_control=True):
    """Paired (common random number) estimate of J(a) - J(b)."""
    diff = path_costs(ens_a, cost, use_control) - path_costs(ens_b, cost, use_control)
    M = len(diff)
    return {"mean": float(np.mean(diff)), "stderr": float(np.std(diff, ddof=1) / math.sqrt(M)) if M > 1 else float("nan")}


def write_cost_json(path, est, ens):
    doc = {"mean": est["mean"], "stderr": est["stderr"], "N": ens.N, "M": ens.M, "dt": ens.dt, "seed": ens.seed}
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
    return doc
