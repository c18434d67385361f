"""Non-local Riccati system for the LQ equilibrium: two solvers plus residuals.

Storage layout
--------------
Rows are indexed by the grid node tau_i.  Each row lives on a fine time grid
with ``substeps`` RK4 steps per cell; values at fine points and at step
midpoints (cubic Hermite) are kept so that stage values of an already solved
block are available when the next block is integrated.

The diagonal (Lambda(t;t), beta(t;t), gamma(t;t)) that drives the feedback is
kept per fine step as a triplet (bottom, mid, top).  For the partition scheme
it is the frozen row of the current cell, hence double valued at nodes.
"""
import warnings
from dataclasses import dataclass, field

import numpy as np

from .errors import ConditionsViolated, IllConditioned, ModelError, NotConverged
from .model import check_monotonicity, check_pd_conditions

EIG_GUARD = 1e-10


def _sym(x):
    return 0.5 * (x + np.swapaxes(x, -1, -2))


def _T(x):
    return np.swapaxes(x, -1, -2)


class TriangularGrid:
    """Nodes 0 = t_0 < ... < t_N = T; the index set is {(i, j): i <= j}."""

    def __init__(self, nodes):
        nodes = np.asarray(nodes, dtype=float)
        if nodes.ndim != 1 or len(nodes) < 3:
            raise ModelError("grid needs at least 3 nodes")
        if nodes[0] != 0.0 or np.any(np.diff(nodes) <= 0):
            raise ModelError("grid nodes must start at 0 and increase strictly")
        self.nodes = nodes

    @classmethod
    def uniform(cls, T, N):
        if int(N) < 2:
            raise ModelError("partition count N must be >= 2")
        return cls(np.linspace(0.0, float(T), int(N) + 1))

    @property
    def N(self):
        return len(self.nodes) - 1

    @property
    def T(self):
        return float(self.nodes[-1])

    def pairs(self):
        return np.triu_indices(len(self.nodes))


def fine_times(nodes, substeps):
    nodes = np.asarray(nodes, dtype=float)
    frac = np.arange(substeps) / substeps
    tf = (nodes[:-1, None] + np.diff(nodes)[:, None] * frac).ravel()
    tf = np.append(tf, nodes[-1])
    th = np.empty(2 * len(tf) - 1)
    th[0::2] = tf
    th[1::2] = 0.5 * (tf[:-1] + tf[1:])
    return tf, th


@dataclass
class UWSZYBlock:
    U: np.ndarray
    W: np.ndarray
    S: np.ndarray
    Z: np.ndarray
    Y: np.ndarray


def uwszy(model, sol_slice, tau, t):
    """The five coefficient blocks at (tau; t) for a slice (Lambda, beta, gamma)."""
    L, Bt, g = (np.asarray(x, dtype=float) for x in sol_slice)
    c = model.coeffs(t)
    R, Rb = model.kernel("R", tau, t), model.kernel("Rbar", tau, t)
    M, Mb = model.kernel("M", tau, t), model.kernel("Mbar", tau, t)
    r, rb = model.kernel("r", tau, t), model.kernel("rbar", tau, t)
    F, F0, D, D0 = c["F"], c["F0"], c["D"], c["D0"]
    Fh, F0h = F + c["Fbar"], F0 + c["F0bar"]
    Dh, D0h = D + c["Dbar"], D0 + c["D0bar"]
    Ch = c["C"] + c["Cbar"]
    U = R + sum(F[l].T @ L @ F[l] for l in range(model.n)) + sum(F0[l].T @ L @ F0[l] for l in range(model.k))
    W = (R + Rb + sum(Fh[l].T @ L @ Fh[l] for l in range(model.n))
         + sum(F0h[l].T @ Bt @ F0h[l] for l in range(model.k)))
    S = (L @ c["C"] + M + sum(D[l].T @ L @ F[l] for l in range(model.n))
         + sum(D0[l].T @ L @ F0[l] for l in range(model.k)))
    Z = (Bt @ Ch + M + Mb + sum(Dh[l].T @ L @ Fh[l] for l in range(model.n))
         + sum(D0h[l].T @ Bt @ F0h[l] for l in range(model.k)))
    Y = (Ch.T @ g + r + rb + 2 * sum(Fh[l].T @ L @ c["theta"][l] for l in range(model.n))
         + 2 * sum(F0h[l].T @ Bt @ c["theta0"][l] for l in range(model.k)))
    return UWSZYBlock(_sym(U), _sym(W), S, Z, Y)


def _spd_solve(A, rhs, times, block):
    """Solve A x = rhs for stacked SPD A, refusing near-singular A."""
    A = _sym(A)
    eig = np.linalg.eigvalsh(A)[..., 0]
    if np.any(eig <= EIG_GUARD):
        pos = np.unravel_index(int(np.argmin(eig)), np.shape(eig)) if np.ndim(eig) else ()
        raise IllConditioned(float(np.asarray(times)[pos]) if np.ndim(times) else float(times),
                             block, float(np.min(eig)))
    Lc = np.linalg.cholesky(A)
    return np.linalg.solve(_T(Lc), np.linalg.solve(Lc, rhs))


class _Rows:
    def __init__(self, N, nf, shape):
        self.f = np.full((N + 1, nf + 1) + shape, np.nan)
        self.m = np.full((N + 1, nf) + shape, np.nan)

    def at(self, r0, r1, h):
        return self.f[r0:r1, h // 2] if h % 2 == 0 else self.m[r0:r1, h // 2]


class _Setup:
    """Coefficients on the half-step grid and kernels for every (tau_i, t_h)."""

    def __init__(self, model, grid, substeps):
        if substeps < 2 or substeps % 2:
            raise ModelError("substeps must be an even integer >= 2")
        self.model, self.grid, self.s = model, grid, int(substeps)
        self.N = grid.N
        self.nf = self.N * self.s
        self.tf, self.th = fine_times(grid.nodes, self.s)
        c = model.coeffs(self.th)
        self.c = c
        self.B, self.C = c["B"], c["C"]
        self.D, self.F, self.D0, self.F0 = c["D"], c["F"], c["D0"], c["F0"]
        self.Bh, self.Ch = c["B"] + c["Bbar"], c["C"] + c["Cbar"]
        self.Dh, self.Fh = c["D"] + c["Dbar"], c["F"] + c["Fbar"]
        self.D0h, self.F0h = c["D0"] + c["D0bar"], c["F0"] + c["F0bar"]
        self.b0, self.th1, self.th0 = c["b0"], c["theta"], c["theta0"]
        self.n, self.k = model.n, model.k
        self._K, self._Kd = {}, {}
        parts = {"Q": ("Q",), "Qh": ("Q", "Qbar"), "R": ("R",), "Rh": ("R", "Rbar"),
                 "M": ("M",), "Mh": ("M", "Mbar"), "qh": ("q", "qbar"), "rh": ("r", "rbar")}
        self.parts = parts
        self.zero = {name: all(model.is_zero(p) for p in keys) for name, keys in parts.items()}

    def K(self, name):
        if name not in self._K:
            keys = self.parts[name]
            shape = self.model.costs[keys[0]].shape
            if self.zero[name]:
                self._K[name] = np.broadcast_to(np.zeros(shape), (self.N + 1, len(self.th)) + shape)
            else:
                tau = self.grid.nodes[:, None]
                t = self.th[None, :]
                self._K[name] = sum(self.model.kernel(k, tau, t) for k in keys)
        return self._K[name]

    def Kd(self, name):
        if name not in self._Kd:
            keys = self.parts[name]
            self._Kd[name] = sum(self.model.kernel(k, self.th, self.th) for k in keys)
        return self._Kd[name]

    def terminal(self):
        nodes = self.grid.nodes
        m = self.model
        return m.term("P", nodes), m.term("P", nodes) + m.term("Pbar", nodes), m.term("p", nodes) + m.term("pbar", nodes)


# ------------------------------------------------------------------ gains

def _lam_gain(S, h, Ld, R, M):
    """Theta = U^{-1} S^T from a diagonal value Ld (leading dims follow h)."""
    F, F0, D, D0, C = S.F[h], S.F0[h], S.D[h], S.D0[h], S.C[h]
    U = R.copy() if isinstance(R, np.ndarray) else np.array(R)
    Sm = Ld @ C + M
    for l in range(S.n):
        U = U + _T(F[..., l, :, :]) @ Ld @ F[..., l, :, :]
        Sm = Sm + _T(D[..., l, :, :]) @ Ld @ F[..., l, :, :]
    for l in range(S.k):
        U = U + _T(F0[..., l, :, :]) @ Ld @ F0[..., l, :, :]
        Sm = Sm + _T(D0[..., l, :, :]) @ Ld @ F0[..., l, :, :]
    return _spd_solve(U, _T(Sm), S.th[h], "U")


def _WZ(S, h, Ld, Bd, Rh, Mh):
    Fh, F0h, Dh, D0h = S.Fh[h], S.F0h[h], S.Dh[h], S.D0h[h]
    W = np.array(Rh, dtype=float)
    Z = Bd @ S.Ch[h] + Mh
    for l in range(S.n):
        W = W + _T(Fh[..., l, :, :]) @ Ld @ Fh[..., l, :, :]
        Z = Z + _T(Dh[..., l, :, :]) @ Ld @ Fh[..., l, :, :]
    for l in range(S.k):
        W = W + _T(F0h[..., l, :, :]) @ Bd @ F0h[..., l, :, :]
        Z = Z + _T(D0h[..., l, :, :]) @ Bd @ F0h[..., l, :, :]
    return W, Z


def _beta_gain(S, h, Ld, Bd, Rh, Mh):
    W, Z = _WZ(S, h, Ld, Bd, Rh, Mh)
    return _spd_solve(W, _T(Z), S.th[h], "W")


def _Yrest(S, h, L, Bq, rh):
    """Y without the gamma part: 2 F^T L theta + 2 F0^T beta theta0 + r + rbar."""
    Fh, F0h = S.Fh[h], S.F0h[h]
    th1, th0 = S.th1[h], S.th0[h]
    out = np.array(rh, dtype=float)
    for l in range(S.n):
        out = out + 2 * (_T(Fh[..., l, :, :]) @ (L @ th1[..., l, :, None]))[..., 0]
    for l in range(S.k):
        out = out + 2 * (_T(F0h[..., l, :, :]) @ (Bq @ th0[..., l, :, None]))[..., 0]
    return out


def _gamma_gain(S, h, Ld, Bd, Gd, Rh, Mh, rh):
    W, Z = _WZ(S, h, Ld, Bd, Rh, Mh)
    Yd = (_T(S.Ch[h]) @ Gd[..., None])[..., 0] + _Yrest(S, h, Ld, Bd, rh)
    sol = _spd_solve(W, np.concatenate([_T(Z), 0.5 * Yd[..., None]], axis=-1), S.th[h], "W")
    return sol[..., :-1], sol[..., -1]


# ------------------------------------------------------------------ engine

class _Engine:
    def __init__(self, model, grid, substeps):
        self.S = _Setup(model, grid, substeps)
        S = self.S
        d = model.d
        self.L = _Rows(S.N, S.nf, (d, d))
        self.Bt = _Rows(S.N, S.nf, (d, d))
        self.G = _Rows(S.N, S.nf, (d,))
        P, Ph, ph = S.terminal()
        self.L.f[:, -1] = P
        self.Bt.f[:, -1] = Ph
        self.G.f[:, -1] = ph
        self.dg = {}
        self.gains = {}
        self.info = {"iterations": {}, "windows": {}}

    # right-hand sides: return d/dt of the rows (the equations read y' + rhs = 0)
    def _rhs_lam(self, r0, r1, h, Y, Th):
        S = self.S
        Bt = S.B[h] - S.C[h] @ Th
        out = Y @ Bt
        out = out + _T(out)
        for l in range(S.n):
            Dt = S.D[h, l] - S.F[h, l] @ Th
            out = out + Dt.T @ Y @ Dt
        for l in range(S.k):
            Dt = S.D0[h, l] - S.F0[h, l] @ Th
            out = out + Dt.T @ Y @ Dt
        if not S.zero["Q"]:
            out = out + S.K("Q")[r0:r1, h]
        if not S.zero["R"]:
            out = out + Th.T @ S.K("R")[r0:r1, h] @ Th
        if not S.zero["M"]:
            MT = S.K("M")[r0:r1, h] @ Th
            out = out - MT - _T(MT)
        return -out

    def _rhs_beta(self, r0, r1, h, Y, Tb):
        S = self.S
        L = self.L.at(r0, r1, h)
        Bt = S.Bh[h] - S.Ch[h] @ Tb
        out = Y @ Bt
        out = out + _T(out)
        for l in range(S.k):
            Dt = S.D0h[h, l] - S.F0h[h, l] @ Tb
            out = out + Dt.T @ Y @ Dt
        for l in range(S.n):
            Dt = S.Dh[h, l] - S.Fh[h, l] @ Tb
            out = out + Dt.T @ L @ Dt
        if not S.zero["Qh"]:
            out = out + S.K("Qh")[r0:r1, h]
        if not S.zero["Rh"]:
            out = out + Tb.T @ S.K("Rh")[r0:r1, h] @ Tb
        if not S.zero["Mh"]:
            MT = S.K("Mh")[r0:r1, h] @ Tb
            out = out - MT - _T(MT)
        return -out

    def _prepare_gamma(self):
        """Terms of the gamma equation that only involve the solved Lambda and beta rows."""
        S = self.S
        H = len(S.th)
        L = np.empty((S.N + 1, H) + self.L.f.shape[2:])
        L[:, 0::2], L[:, 1::2] = self.L.f, self.L.m
        Bq = np.empty_like(L)
        Bq[:, 0::2], Bq[:, 1::2] = self.Bt.f, self.Bt.m
        hs = np.arange(H)
        with np.errstate(invalid="ignore"):
            W, Z = _WZ(S, hs, L, Bq, S.K("Rh"), S.K("Mh"))
            Yr = _Yrest(S, hs, L, Bq, S.K("rh"))
            cst = S.K("qh") + 2 * (Bq @ S.b0[..., None])[..., 0]
            for l in range(S.n):
                cst = cst + 2 * (_T(S.Dh[:, l]) @ (L @ S.th1[:, l, :, None]))[..., 0]
            for l in range(S.k):
                cst = cst + 2 * (_T(S.D0h[:, l]) @ (Bq @ S.th0[:, l, :, None]))[..., 0]
            # theta^T Lambda theta + theta0^T beta theta0 for the kappa integrand
            kb = np.zeros(L.shape[:2])
            for l in range(S.n):
                kb = kb + np.einsum("hi,rhij,hj->rh", S.th1[:, l], L, S.th1[:, l])
            for l in range(S.k):
                kb = kb + np.einsum("hi,rhij,hj->rh", S.th0[:, l], Bq, S.th0[:, l])
        self.gW, self.gZ, self.gY, self.gC, self.gK = W, Z, Yr, cst, kb

    def _rhs_gamma(self, r0, r1, h, Y, gain):
        S = self.S
        Tb, c = gain
        out = Y @ (S.Bh[h] - S.Ch[h] @ Tb) + self.gC[r0:r1, h]
        out = out + 2 * ((self.gW[r0:r1, h] @ c) @ Tb) - 2 * (self.gZ[r0:r1, h] @ c) - self.gY[r0:r1, h] @ Tb
        return -out

    def _sweep(self, rows, rhs, j_hi, j_lo, r_lo, r_hi, gain_at, symmetric):
        """RK4 backward over fine steps j_hi-1 .. j_lo for rows [r_lo, r_hi)."""
        S = self.S
        for j in range(j_hi - 1, j_lo - 1, -1):
            r1 = min(r_hi, j // S.s + 1)
            if r1 <= r_lo:
                continue
            y1 = rows.f[r_lo:r1, j + 1]
            dt = S.tf[j + 1] - S.tf[j]
            top, mid, bot = 2 * j + 2, 2 * j + 1, 2 * j
            k1 = rhs(r_lo, r1, top, y1, gain_at(j, 2, y1))
            y = y1 - 0.5 * dt * k1
            k2 = rhs(r_lo, r1, mid, y, gain_at(j, 1, y))
            y = y1 - 0.5 * dt * k2
            k3 = rhs(r_lo, r1, mid, y, gain_at(j, 1, y))
            y = y1 - dt * k3
            k4 = rhs(r_lo, r1, bot, y, gain_at(j, 0, y))
            y0 = y1 - dt / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4)
            if symmetric:
                y0 = _sym(y0)
            f0 = rhs(r_lo, r1, bot, y0, gain_at(j, 0, y0))
            ym = 0.5 * (y0 + y1) + dt / 8.0 * (f0 - k1)
            if symmetric:
                ym = _sym(ym)
            if not (np.all(np.isfinite(y0)) and np.all(np.isfinite(ym))):
                raise IllConditioned(S.tf[j], "state", float("nan"))
            rows.f[r_lo:r1, j] = y0
            rows.m[r_lo:r1, j] = ym

    def _row_triplets(self, rows, j0, j1):
        """Diagonal triplets taken from the frozen row of each cell."""
        S = self.S
        js = np.arange(j0, j1)
        ks = js // S.s
        return np.stack([rows.f[ks, js], rows.m[ks, js], rows.f[ks, js + 1]], axis=1)

    def _half_idx(self, j0, j1):
        js = np.arange(j0, j1)
        return np.stack([2 * js, 2 * js + 1, 2 * js + 2], axis=1)

    def _kern_diag(self, name, j0, j1, mode):
        """Kernel values feeding the gains: true diagonal or the frozen row."""
        S = self.S
        hs = self._half_idx(j0, j1)
        if mode == "row":
            ks = (np.arange(j0, j1) // S.s)[:, None]
            return S.K(name)[ks, hs]
        return S.Kd(name)[hs]

    # ---- gains for a block of steps from diagonal triplets
    def _gains(self, block, j0, j1, mode, dg):
        S = self.S
        hs = self._half_idx(j0, j1)
        if block == "lam":
            return _lam_gain(S, hs, dg, self._kern_diag("R", j0, j1, mode), self._kern_diag("M", j0, j1, mode))
        Ld = self.dg["lam"][j0:j1]
        if block == "beta":
            return _beta_gain(S, hs, Ld, dg, self._kern_diag("Rh", j0, j1, mode), self._kern_diag("Mh", j0, j1, mode))
        Bd = self.dg["beta"][j0:j1]
        return _gamma_gain(S, hs, Ld, Bd, dg, self._kern_diag("Rh", j0, j1, mode),
                           self._kern_diag("Mh", j0, j1, mode), self._kern_diag("rh", j0, j1, mode))

    def _block(self, name):
        return {"lam": (self.L, self._rhs_lam, True),
                "beta": (self.Bt, self._rhs_beta, True),
                "gamma": (self.G, self._rhs_gamma, False)}[name]

    # ---- partition march: the row of the current cell drives its own gain
    def march_self(self, name):
        S = self.S
        rows, rhs, symm = self._block(name)
        for kcell in range(S.N - 1, -1, -1):
            if name == "lam":
                def gain_at(j, pos, Y, k=kcell):
                    h = 2 * j + pos
                    return _lam_gain(S, h, Y[-1], S.K("R")[k, h], S.K("M")[k, h])
            else:
                def gain_at(j, pos, Y, k=kcell):
                    h = 2 * j + pos
                    Lk = self.L.f[k, j + pos // 2] if pos != 1 else self.L.m[k, j]
                    return _beta_gain(S, h, Lk, Y[-1], S.K("Rh")[k, h], S.K("Mh")[k, h])
            self._sweep(rows, rhs, (kcell + 1) * S.s, kcell * S.s, 0, kcell + 1, gain_at, symm)
        self.dg[name] = self._row_triplets(rows, 0, S.nf)
        self.info["iterations"][name] = 1

    # ---- windowed Picard on the diagonal
    def picard(self, name, mode, window, tol, max_iter):
        S = self.S
        rows, rhs, symm = self._block(name)
        N, s = S.N, S.s
        nodes = S.grid.nodes
        shape = rows.f.shape[2:]
        dg_all = np.full((S.nf, 3) + shape, np.nan)
        gains_all = [None] * S.nf
        wn = max(1, int(round(N * window / S.grid.T)))
        v = np.full((N + 1,) + shape, np.nan)
        v[N] = rows.f[N, S.nf]
        b, widx, halved = N, 0, False
        iters = []
        while b > 0:
            a = max(b - wn, 0)
            j0, j1 = a * s, b * s
            if mode == "interp":
                v[a:b] = rows.f[a:b, j1]
                idx, wts = _interp_stencil(nodes, S.th, a, j0, j1)
                dg = np.einsum("pqk,pqk...->pq...", wts, v[idx])
            else:
                ks = np.arange(j0, j1) // s
                dg = np.repeat(rows.f[ks, j1][:, None], 3, axis=1)
            ok, change = False, np.inf
            for it in range(1, max_iter + 1):
                G = self._gains(name, j0, j1, mode, dg)
                gain_at = _gain_lookup(G, j0)
                self._sweep(rows, rhs, j1, j0, a, b, gain_at, symm)
                if mode == "interp":
                    new = rows.f[np.arange(a, b), np.arange(a, b) * s]
                    change = float(np.max(np.abs(new - v[a:b])))
                    v[a:b] = new
                    dg = np.einsum("pqk,pqk...->pq...", wts, v[idx])
                    scale = max(1.0, float(np.max(np.abs(v[a:]))))
                else:
                    new = self._row_triplets(rows, j0, j1)
                    change = float(np.max(np.abs(new - dg)))
                    dg = new
                    scale = max(1.0, float(np.max(np.abs(dg))))
                if change <= tol * scale:
                    ok = True
                    break
            if not ok:
                if not halved and wn > 1:
                    halved = True
                    wn = max(1, wn // 2)
                    continue
                raise NotConverged(widx, change, name)
            iters.append(it)
            G = self._gains(name, j0, j1, mode, dg)
            self._sweep(rows, rhs, j1, j0, 0, b, _gain_lookup(G, j0), symm)
            dg_all[j0:j1] = dg
            b, widx = a, widx + 1
        self.dg[name] = dg_all
        self.info["iterations"][name] = iters
        self.info["windows"][name] = {"count": widx, "halved": halved, "nodes_per_window": wn}

    def kappa(self, mode):
        """Composite Simpson of the kappa integrand on every fine step."""
        S = self.S
        Gn = self._gains("gamma", 0, S.nf, mode, self.dg["gamma"])
        Tbs, cs = Gn
        kap = np.full((S.N + 1, S.nf + 1), np.nan)
        kap[:, -1] = 0.0
        for j in range(S.nf - 1, -1, -1):
            r1 = j // S.s + 1
            vals = []
            for pos in range(3):
                h = 2 * j + pos
                vals.append(self._kappa_integrand(0, r1, h, self.G.at(0, r1, h), cs[j, pos]))
            dt = S.tf[j + 1] - S.tf[j]
            kap[:r1, j] = kap[:r1, j + 1] + dt / 6.0 * (vals[0] + 4 * vals[1] + vals[2])
        self.kap = kap
        self.gamma_gains = Gn

    def _kappa_integrand(self, r0, r1, h, g, c):
        S = self.S
        Yt = g @ S.Ch[h] + self.gY[r0:r1, h]
        return g @ S.b0[h] + self.gK[r0:r1, h] + (self.gW[r0:r1, h] @ c) @ c - Yt @ c


def _gain_lookup(G, j0):
    if isinstance(G, tuple):
        A, c = G
        return lambda j, pos, Y: (A[j - j0, pos], c[j - j0, pos])
    return lambda j, pos, Y: G[j - j0, pos]


def _lagrange_weights(x, pts):
    w = np.ones(len(pts))
    for a in range(len(pts)):
        for b in range(len(pts)):
            if a != b:
                w[a] *= (x - pts[b]) / (pts[a] - pts[b])
    return w


def _interp_stencil(nodes, th, a, j0, j1):
    """Cubic Lagrange stencil on nodes a..N for every triplet point of steps j0..j1."""
    N = len(nodes) - 1
    npts = min(4, N - a + 1)
    P = j1 - j0
    idx = np.zeros((P, 3, npts), dtype=int)
    wts = np.zeros((P, 3, npts))
    for p in range(P):
        for q in range(3):
            h = 2 * (j0 + p) + q
            x = th[h]
            cell = min(max(int(np.searchsorted(nodes, x, side="right")) - 1, a), N - 1)
            i0 = min(max(cell - 1, a), N - npts + 1)
            pts = np.arange(i0, i0 + npts)
            idx[p, q] = pts
            wts[p, q] = _lagrange_weights(x, nodes[pts])
    return idx, wts


# ------------------------------------------------------------------ solution

@dataclass
class RiccatiSolution:
    """Rows Lambda(tau_i; .), beta, gamma, kappa on the fine grid plus diagonals."""
    model: object
    grid: TriangularGrid
    substeps: int
    tf: np.ndarray
    th: np.ndarray
    lam: np.ndarray
    lam_mid: np.ndarray
    beta: np.ndarray
    beta_mid: np.ndarray
    gamma: np.ndarray
    gamma_mid: np.ndarray
    kappa: np.ndarray
    dg_lam: np.ndarray
    dg_beta: np.ndarray
    dg_gamma: np.ndarray
    method: str
    info: dict = field(default_factory=dict)

    @property
    def N(self):
        return self.grid.N

    def node_index(self, t):
        i = int(np.argmin(np.abs(self.grid.nodes - t)))
        if abs(self.grid.nodes[i] - t) > 1e-12 * max(1.0, self.grid.T):
            raise ValueError(f"time {t} is not a grid node")
        return i

    def diag(self, block):
        """Diagonal values at the grid nodes."""
        arr = getattr(self, block)
        i = np.arange(self.N + 1)
        return arr[i, i * self.substeps]

    def nodes_table(self, block):
        """Values on the triangular node set: out[i, j] = X(tau_i; t_j), NaN for j < i."""
        arr = getattr(self, block)
        return arr[:, ::self.substeps]

    def half(self, block, i):
        """Row ``i`` on the half-step grid (fine points and midpoints interleaved)."""
        f = getattr(self, block)[i]
        if block == "kappa":
            return f
        m = getattr(self, block + "_mid")[i]
        out = np.empty((2 * len(f) - 1,) + f.shape[1:])
        out[0::2] = f
        out[1::2] = m
        return out

    def value_at(self, block, i, t):
        """Row ``i`` at an arbitrary t >= tau_i by local 4-point Lagrange interpolation."""
        t = float(t)
        tau = self.grid.nodes[i]
        t = max(t, tau)
        if block == "kappa":
            xs, ys = self.tf, self.kappa[i]
        else:
            xs, ys = self.th, self.half(block, i)
        lo = int(np.searchsorted(xs, tau - 1e-14))
        pos = int(np.searchsorted(xs, t))
        i0 = min(max(pos - 2, lo), len(xs) - 4)
        i0 = max(i0, lo)
        pts = np.arange(i0, min(i0 + 4, len(xs)))
        w = _lagrange_weights(t, xs[pts])
        return np.tensordot(w, ys[pts], axes=1)

    def slice_at(self, i, j):
        """(Lambda, beta, gamma, kappa) at node pair (tau_i, t_j)."""
        f = j * self.substeps
        return self.lam[i, f], self.beta[i, f], self.gamma[i, f], self.kappa[i, f]

    def diag_slice(self, j):
        f = j * self.substeps
        return self.lam[j, f], self.beta[j, f], self.gamma[j, f]

    @classmethod
    def from_functions(cls, model, grid, substeps, lam, beta, gamma, kappa, method="closed-form"):
        """Sample vectorised callables X(tau, t) on the solver layout."""
        tf, th = fine_times(grid.nodes, substeps)
        N, nf = grid.N, grid.N * substeps
        tau = grid.nodes[:, None]
        out = {}
        for name, fn in (("lam", lam), ("beta", beta), ("gamma", gamma)):
            F = np.asarray(fn(tau, tf[None, :]), dtype=float)
            Mv = np.asarray(fn(tau, th[None, 1::2]), dtype=float)
            mask_f = tf[None, :] < tau - 1e-14
            mask_m = th[None, 1::2] < tau - 1e-14
            F = F.copy()
            Mv = Mv.copy()
            F[mask_f] = np.nan
            Mv[mask_m] = np.nan
            out[name] = F
            out[name + "_mid"] = Mv
            dgv = np.asarray(fn(th, th), dtype=float)
            js = np.arange(nf)
            out["dg_" + name] = np.stack([dgv[2 * js], dgv[2 * js + 1], dgv[2 * js + 2]], axis=1)
        K = np.asarray(kappa(tau, tf[None, :]), dtype=float).copy()
        K[tf[None, :] < tau - 1e-14] = np.nan
        return cls(model, grid, substeps, tf, th, out["lam"], out["lam_mid"], out["beta"], out["beta_mid"],
                   out["gamma"], out["gamma_mid"], K, out["dg_lam"], out["dg_beta"], out["dg_gamma"],
                   method, {})

    def to_csv_rows(self):
        """Rows of the ``tau,t,block,i,j,value`` export on the node triangle."""
        nodes = self.grid.nodes
        s = self.substeps
        out = []
        for a in range(self.N + 1):
            for b in range(a, self.N + 1):
                f = b * s
                for name, arr in (("Lambda", self.lam), ("beta", self.beta)):
                    M = arr[a, f]
                    for i in range(M.shape[0]):
                        for j in range(M.shape[1]):
                            out.append((nodes[a], nodes[b], name, i, j, M[i, j]))
                g = self.gamma[a, f]
                for i in range(len(g)):
                    out.append((nodes[a], nodes[b], "gamma", i, 0, g[i]))
                out.append((nodes[a], nodes[b], "kappa", 0, 0, self.kappa[a, f]))
        return out


def _norm_bound(model, grid):
    """K1, K2 of the uniform bound on the frozen-row Riccati iterates."""
    t = np.linspace(0.0, model.T, 401)
    tau, tt = np.meshgrid(t, t, indexing="ij")
    mask = tau <= tt
    c = model.coeffs(t)
    spec = lambda A: np.linalg.norm(A, ord=2, axis=(-2, -1))
    normP = float(np.max(spec(model.term("P", t))))
    normQ = float(np.max(spec(model.kernel("Q", tau[mask], tt[mask]))))
    normB = float(np.max(spec(c["B"])))
    normD2 = float(np.max(sum(spec(c["D"][:, l]) ** 2 for l in range(model.n)))) if model.n else 0.0
    normD02 = float(np.max(sum(spec(c["D0"][:, l]) ** 2 for l in range(model.k)))) if model.k else 0.0
    K1 = normP + normQ * model.T
    K2 = 2 * normB + normD2 + normD02
    return K1, K2


def _gate(model, grid, delta, check):
    rep = check_pd_conditions(model, grid.nodes, delta)
    if check and not rep.passed:
        raise ConditionsViolated("positivity conditions fail: " + "; ".join(
            f"{f['condition']} min eig {f['min_eig']:.3g}" for f in rep.failures), rep)
    sub = grid.nodes if grid.N <= 40 else np.linspace(0.0, grid.T, 41)
    mono = check_monotonicity(model, sub)
    return rep, mono


def _assemble(eng, model, grid, substeps, method, info):
    S = eng.S
    return RiccatiSolution(model, grid, substeps, S.tf, S.th, eng.L.f, eng.L.m, eng.Bt.f, eng.Bt.m,
                           eng.G.f, eng.G.m, eng.kap, eng.dg["lam"], eng.dg["beta"], eng.dg["gamma"],
                           method, info)


def solve_partition(model, N, substeps=4, delta=0.0, check=True, gamma_tol=1e-12, gamma_max_iter=200,
                    window=None):
    """Frozen-tau partition scheme.

    On each cell (t_k, t_k+1] the row tau = t_k solves a classical Riccati
    equation with kernels frozen at tau = t_k; its feedback gain then drives
    the Lyapunov equations of every earlier row.  beta follows the same
    pattern, gamma is a windowed fixed point with the frozen-row diagonal and
    kappa is a quadrature.
    """
    grid = N if isinstance(N, TriangularGrid) else TriangularGrid.uniform(model.T, N)
    rep, mono = _gate(model, grid, delta, check)
    eng = _Engine(model, grid, substeps)
    eng.march_self("lam")
    eng.march_self("beta")
    eng._prepare_gamma()
    eng.picard("gamma", "row", window or model.T / 10, gamma_tol, gamma_max_iter)
    eng.kappa("row")
    info = dict(eng.info)
    info.update(_report(model, grid, rep, mono, eng))
    return _assemble(eng, model, grid, substeps, "partition", info)


def solve_fixed_point(model, grid, tol=1e-10, max_iter=200, window=None, substeps=4, delta=0.0, check=True):
    """Windowed Picard iteration on the diagonal for Lambda, beta and gamma."""
    if not isinstance(grid, TriangularGrid):
        grid = TriangularGrid.uniform(model.T, grid) if np.ndim(grid) == 0 else TriangularGrid(grid)
    rep, mono = _gate(model, grid, delta, check)
    window = model.T / 10 if window is None else window
    eng = _Engine(model, grid, substeps)
    for name in ("lam", "beta", "gamma"):
        if name == "gamma":
            eng._prepare_gamma()
        eng.picard(name, "interp", window, tol, max_iter)
    eng.kappa("interp")
    info = dict(eng.info)
    info.update(_report(model, grid, rep, mono, eng))
    return _assemble(eng, model, grid, substeps, "fixed-point", info)


def _report(model, grid, rep, mono, eng):
    K1, K2 = _norm_bound(model, grid)
    dgl = eng.dg["lam"]
    norm = float(np.max(np.linalg.norm(dgl, ord=2, axis=(-2, -1))))
    return {"conditions": rep.to_dict(), "monotonicity": mono.to_dict(),
            "bound": {"K1": K1, "K2": K2, "limit": K1 * np.exp(K2 * model.T), "max_norm": norm},
            "scope_note": "M or Mbar nonzero: well-posedness not guaranteed" if model.has_cross_terms else ""}


# ------------------------------------------------------------------ residuals

def _fd_weights(x0, xs, order=1):
    """Fornberg finite-difference weights for the ``order``-th derivative."""
    n = len(xs)
    c = np.zeros((n, order + 1))
    c1, c4 = 1.0, xs[0] - x0
    c[0, 0] = 1.0
    for i in range(1, n):
        mn = min(i, order)
        c2, c5, c4 = 1.0, c4, xs[i] - x0
        for j in range(i):
            c3 = xs[i] - xs[j]
            c2 *= c3
            if j == i - 1:
                for k in range(mn, 0, -1):
                    c[i, k] = c1 * (k * c[i - 1, k - 1] - c5 * c[i - 1, k]) / c2
                c[i, 0] = -c1 * c5 * c[i - 1, 0] / c2
            for k in range(mn, 0, -1):
                c[j, k] = (c4 * c[j, k] - k * c[j, k - 1]) / c3
            c[j, 0] = c4 * c[j, 0] / c3
        c1 = c2
    return c[:, order]


FD_WIDTH = 7


def _row_derivative(xs, ys, lo, pos, width=FD_WIDTH):
    """d/dt of samples ``ys`` at index ``pos`` using points with index >= lo."""
    n = len(xs)
    width = min(width, n - lo)
    i0 = min(max(pos - width // 2, lo), n - width)
    i0 = max(i0, lo)
    pts = np.arange(i0, min(i0 + width, n))
    w = _fd_weights(xs[pos], xs[pts])
    return np.tensordot(w, ys[pts], axes=1)


def derivatives_at(sol, i, j):
    """Finite-difference t-derivatives of (Lambda, beta, gamma, kappa) at node pair (i, j).

    Only the RK4 fine-grid values are used: the Hermite midpoints carry a
    non-smooth O(h^4) error that finite differences would amplify.
    """
    s = sol.substeps
    return [_row_derivative(sol.tf, getattr(sol, block)[i], i * s, j * s)
            for block in ("lam", "beta", "gamma", "kappa")]


def residual(model, sol, tau, t):
    """Norms of the four equation left-hand sides at a node pair (tau, t).

    Uses the U/W/S/Z/Y form of the equations (not the Lyapunov form used by
    the solvers) with finite-difference time derivatives.
    """
    i, j = sol.node_index(tau), sol.node_index(t)
    if j < i:
        raise ValueError("need tau <= t")
    dL, dB, dG, dK = derivatives_at(sol, i, j)
    L, Bt, g, _ = sol.slice_at(i, j)
    Ld, Bd, gd = sol.diag_slice(j)
    tt = sol.grid.nodes[j]
    tau = sol.grid.nodes[i]
    blk = uwszy(model, (L, Bt, g), tau, tt)
    dia = uwszy(model, (Ld, Bd, gd), tt, tt)
    c = model.coeffs(tt)
    Th = np.linalg.solve(dia.U, dia.S.T)
    Tb = np.linalg.solve(dia.W, dia.Z.T)
    cc = 0.5 * np.linalg.solve(dia.W, dia.Y)
    B, Bh = c["B"], c["B"] + c["Bbar"]
    Q, Qh = model.kernel("Q", tau, tt), model.kernel("Q", tau, tt) + model.kernel("Qbar", tau, tt)
    qh = model.kernel("q", tau, tt) + model.kernel("qbar", tau, tt)
    D, D0 = c["D"], c["D0"]
    Dh, D0h = D + c["Dbar"], D0 + c["D0bar"]
    th1, th0, b0 = c["theta"], c["theta0"], c["b0"]
    n, k = model.n, model.k
    rL = (dL + Q + sum(D[l].T @ L @ D[l] for l in range(n)) + sum(D0[l].T @ L @ D0[l] for l in range(k))
          + L @ B + B.T @ L + Th.T @ blk.U @ Th - blk.S @ Th - Th.T @ blk.S.T)
    rB = (dB + Qh + sum(Dh[l].T @ L @ Dh[l] for l in range(n)) + sum(D0h[l].T @ Bt @ D0h[l] for l in range(k))
          + Bt @ Bh + Bh.T @ Bt + Tb.T @ blk.W @ Tb - blk.Z @ Tb - Tb.T @ blk.Z.T)
    rG = (dG + qh + Bh.T @ g + 2 * sum(Dh[l].T @ L @ th1[l] for l in range(n))
          + 2 * sum(D0h[l].T @ Bt @ th0[l] for l in range(k)) + 2 * Bt @ b0
          + 2 * Tb.T @ blk.W @ cc - 2 * blk.Z @ cc - Tb.T @ blk.Y)
    rK = (dK + b0 @ g + sum(th1[l] @ L @ th1[l] for l in range(n)) + sum(th0[l] @ Bt @ th0[l] for l in range(k))
          + cc @ blk.W @ cc - blk.Y @ cc)
    return {"rLambda": float(np.linalg.norm(rL)), "rbeta": float(np.linalg.norm(rB)),
            "rgamma": float(np.linalg.norm(rG)), "rkappa": float(abs(rK))}


def residual_table(model, sol, pairs=None):
    """Residuals on interior node pairs (all of them unless ``pairs`` given)."""
    N = sol.N
    if pairs is None:
        pairs = [(i, j) for i in range(N) for j in range(i, N)]
    nodes = sol.grid.nodes
    return [(i, j, residual(model, sol, nodes[i], nodes[j])) for i, j in pairs]


# ------------------------------------------------------------------ systemic risk

@dataclass
class SystemicRiskSolution:
    grid: TriangularGrid
    substeps: int
    tf: np.ndarray
    th: np.ndarray
    lam: np.ndarray
    lam_mid: np.ndarray
    constants: dict
    precondition: bool
    max_tilde: float
    iterations: list

    def nodes_table(self):
        return self.lam[:, ::self.substeps]

    def diag(self):
        i = np.arange(self.grid.N + 1)
        return self.lam[i, i * self.substeps]


def systemic_risk_constants(lam, c, q, eta, T, samples=20001):
    s = np.linspace(0.0, T, samples)
    if lam.kind == "tabulated":
        s = np.union1d(s, lam.times[(lam.times >= 0) & (lam.times <= T)])
    nl = float(np.max(np.abs(lam(s))))
    ninv = float(np.max(np.abs(1.0 / lam(s))))
    nd = float(np.max(np.abs(lam.derivative(s))))
    C1 = 0.5 * (c + q) * nl
    C2 = max(ninv, nl)
    C3 = 0.5 * eta * nl + 0.5 * q * nd
    C4 = q * nl
    C5 = max(C1 + C3 / 2 + C4 / 2, 4 * C2)
    return {"C1": C1, "C2": C2, "C3": C3, "C4": C4, "C5": C5, "C": C5, "k_min": max(4 * C5 ** 2, 1.0)}


def solve_systemic_risk(params, grid, tol=1e-10, max_iter=200, window=None, substeps=4):
    """Scalar non-local Riccati equation of the inter-bank model.

    Works with the shifted unknown tilde = Lambda + (q/2) lambda(t - tau) and
    iterates the two-time Picard map in which the previous iterate enters
    both quadratic terms; the linear mean-reversion term is integrated.
    """
    k, q, c, eta = (float(params[x]) for x in ("k", "q", "c", "eta"))
    lam = params["lam"]
    T = float(params["T"])
    if not isinstance(grid, TriangularGrid):
        grid = TriangularGrid.uniform(T, grid) if np.ndim(grid) == 0 else TriangularGrid(grid)
    consts = systemic_risk_constants(lam, c, q, eta, T)
    pre = k > consts["k_min"]
    if not pre:
        warnings.warn(f"mean reversion k={k:g} below the sufficient level {consts['k_min']:.3g}; attempting anyway",
                      RuntimeWarning, stacklevel=2)
    s = int(substeps)
    N = grid.N
    nf = N * s
    tf, th = fine_times(grid.nodes, s)
    nodes = grid.nodes
    gap = np.maximum(th[None, :] - nodes[:, None], 0.0)
    lamv = lam(gap)
    src = (0.5 * eta + k * q) * lamv - 0.5 * q * lam.derivative(gap)
    X = _Rows(N, nf, ())
    X.f[:, -1] = 0.5 * (c + q) * lam(T - nodes)
    diag_v = np.full(N + 1, np.nan)
    diag_v[N] = X.f[N, -1]
    wn = max(1, int(round(N * (window or T / 10) / T)))
    b, widx, halved = N, 0, False
    iters = []
    max_tilde = float(np.max(np.abs(X.f[:, -1])))
    while b > 0:
        a = max(b - wn, 0)
        j0, j1 = a * s, b * s
        idx, wts = _interp_stencil(nodes, th, a, j0, j1)
        diag_v[a:b] = X.f[a:b, j1]
        # guesses on the trapezoid: rows 0..b-1 over the window, constant continuation
        gf = np.repeat(X.f[:b, j1][:, None], j1 - j0 + 1, axis=1)
        gm = np.repeat(X.f[:b, j1][:, None], j1 - j0, axis=1)
        ok, change = False, np.inf
        for it in range(1, max_iter + 1):
            dg = np.einsum("pqk,pqk->pq", wts, diag_v[idx])
            _sr_sweep(X, gf, gm, dg, lamv, src, k, tf, s, j0, j1, b)
            nf_ = X.f[:b, j0:j1 + 1].copy()
            nm_ = X.m[:b, j0:j1].copy()
            with np.errstate(invalid="ignore"):
                change = float(np.nanmax(np.abs(np.concatenate([(nf_ - gf).ravel(), (nm_ - gm).ravel()]))))
            gf, gm = nf_, nm_
            new_diag = X.f[np.arange(a, b), np.arange(a, b) * s]
            diag_v[a:b] = new_diag
            max_tilde = max(max_tilde, float(np.nanmax(np.abs(nf_))))
            if change <= tol * max(1.0, float(np.nanmax(np.abs(nf_)))):
                ok = True
                break
        if not ok:
            if not halved and wn > 1:
                halved, wn = True, max(1, wn // 2)
                continue
            raise NotConverged(widx, change, "systemic-risk")
        iters.append(it)
        b, widx = a, widx + 1
    shift_f = 0.5 * q * lam(np.maximum(tf[None, :] - nodes[:, None], 0.0))
    shift_m = 0.5 * q * lam(np.maximum(th[None, 1::2] - nodes[:, None], 0.0))
    return SystemicRiskSolution(grid, s, tf, th, X.f - shift_f, X.m - shift_m, consts, pre, max_tilde, iters)


def _sr_sweep(X, gf, gm, dg, lamv, src, k, tf, s, j0, j1, b):
    """One application of the Picard map on the window (rows < b)."""
    def guess(rows_hi, j, pos):
        # previous iterate at (rows, half point)
        if pos == 1:
            return gm[:rows_hi, j - j0]
        return gf[:rows_hi, j - j0 + pos // 2]

    for j in range(j1 - 1, j0 - 1, -1):
        r1 = min(b, j // s + 1)
        y1 = X.f[:r1, j + 1]
        dt = tf[j + 1] - tf[j]
        def f(pos, y):
            h = 2 * j + pos
            v = guess(r1, j, pos)
            vd = dg[j - j0, pos]
            # tilde' = 2k tilde - 2 lam v_d^2 + 4 v v_d - src
            return 2 * k * y - 2 * lamv[:r1, h] * vd ** 2 + 4 * v * vd - src[:r1, h]
        k1 = f(2, y1)
        k2 = f(1, y1 - 0.5 * dt * k1)
        k3 = f(1, y1 - 0.5 * dt * k2)
        k4 = f(0, y1 - dt * k3)
        y0 = y1 - dt / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4)
        f0 = f(0, y0)
        X.f[:r1, j] = y0
        X.m[:r1, j] = 0.5 * (y0 + y1) + dt / 8.0 * (f0 - k1)


def systemic_risk_residual(params, sol):
    """Max |LHS| of the scalar equation over interior node pairs (FD derivative)."""
    k, q, eta = float(params["k"]), float(params["q"]), float(params["eta"])
    lam = params["lam"]
    s = sol.substeps
    nodes = sol.grid.nodes
    N = sol.grid.N
    tf = sol.tf
    diag = sol.diag()
    n, w = len(tf), FD_WIDTH
    pos = s * np.arange(N)
    # stencil weights: centred (clipped at T) away from the row start, forward at the row start
    c0 = np.minimum(pos - w // 2, n - w)
    w_in = np.array([_fd_weights(tf[p], tf[i0:i0 + w]) for p, i0 in zip(pos, np.maximum(c0, 0))])
    ps = np.minimum(pos, n - w)
    w_st = np.array([_fd_weights(tf[p], tf[p0:p0 + w]) for p, p0 in zip(pos, ps)])
    worst = 0.0
    for i in range(N):
        js = np.arange(i, N)
        if n - i * s < w:
            dL = np.array([_row_derivative(tf, sol.lam[i], i * s, j * s) for j in js])
            Lv = sol.lam[i, js * s]
            lv = lam(nodes[js] - nodes[i])
            dj = diag[js] + q / 2
            r = dL - 2 * k * Lv + 2 * lv * dj ** 2 - 4 * (Lv + q / 2 * lv) * dj + eta / 2 * lv
            worst = max(worst, float(np.max(np.abs(r))))
            continue
        inner = pos[js] - w // 2 >= i * s
        st = np.where(inner, c0[js], ps[js])
        W = np.where(inner[:, None], w_in[js], w_st[js])
        dL = np.sum(W * sol.lam[i][st[:, None] + np.arange(w)], axis=1)
        Lv = sol.lam[i, js * s]
        lv = lam(nodes[js] - nodes[i])
        dj = diag[js] + q / 2
        r = dL - 2 * k * Lv + 2 * lv * dj ** 2 - 4 * (Lv + q / 2 * lv) * dj + eta / 2 * lv
        worst = max(worst, float(np.max(np.abs(r))))
    return worst


def classical_riccati(k, q, c, eta, T, t):
    """Oracle for constant discount: L' = 2kL + 2(L + q/2)^2 - eta/2, L(T) = c/2."""
    from scipy.integrate import solve_ivp
    sol = solve_ivp(lambda s, y: 2 * k * y + 2 * (y + q / 2) ** 2 - eta / 2, (T, 0.0), [c / 2],
                    rtol=1e-12, atol=1e-14, dense_output=True, method="DOP853")
    return sol.sol(np.asarray(t, dtype=float))[0]
