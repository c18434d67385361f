"""LQ model coefficients, two-time cost kernels and discount functions.

Everything here is immutable after construction. Time functions are
vectorised: passing an array of times returns an array with the time axes
in front of the value axes.
"""
import json
from dataclasses import dataclass, field

import numpy as np

from .errors import ModelError

PSD_TOL = -1e-10

DYNAMICS = ("b0", "B", "Bbar", "C", "Cbar", "theta", "D", "Dbar", "F", "Fbar",
            "theta0", "D0", "D0bar", "F0", "F0bar")
KERNELS = ("Q", "Qbar", "R", "Rbar", "M", "Mbar", "q", "qbar", "r", "rbar")
TERMINAL = ("P", "Pbar", "p", "pbar")
SYMMETRIC = ("Q", "Qbar", "R", "Rbar", "P", "Pbar")


def expected_shapes(d, m, n, k):
    return {
        "b0": (d,), "B": (d, d), "Bbar": (d, d), "C": (d, m), "Cbar": (d, m),
        "theta": (n, d), "D": (n, d, d), "Dbar": (n, d, d), "F": (n, d, m), "Fbar": (n, d, m),
        "theta0": (k, d), "D0": (k, d, d), "D0bar": (k, d, d), "F0": (k, d, m), "F0bar": (k, d, m),
        "Q": (d, d), "Qbar": (d, d), "R": (m, m), "Rbar": (m, m), "M": (d, m), "Mbar": (d, m),
        "q": (d,), "qbar": (d,), "r": (m,), "rbar": (m,),
        "P": (d, d), "Pbar": (d, d), "p": (d,), "pbar": (d,),
    }


def _expand(x, arr):
    # append singleton axes to ``x`` so it broadcasts against value axes of arr
    return np.reshape(x, np.shape(x) + (1,) * (arr.ndim - np.ndim(x)))


class TimeFn:
    """Piecewise polynomial in t (local variable t - start), degree <= 3.

    ``segments`` is a list of ``(start, end, coeffs)`` with ``coeffs`` of
    shape ``(deg+1,) + value_shape``.
    """

    def __init__(self, segments, shape=None):
        segs = []
        for a, b, c in segments:
            c = np.asarray(c, dtype=float)
            if c.ndim == 0:
                c = c[None]
            segs.append((float(a), float(b), c))
        if not segs:
            raise ModelError("time function without segments")
        segs.sort(key=lambda s: s[0])
        shapes = {s[2].shape[1:] for s in segs}
        if len(shapes) != 1:
            raise ModelError("segments disagree on value shape")
        self.shape = shapes.pop() if shape is None else tuple(shape)
        width = max(s[2].shape[0] for s in segs)
        if width > 4:
            raise ModelError("polynomial degree above 3")
        self._starts = np.array([s[0] for s in segs])
        self._ends = np.array([s[1] for s in segs])
        coeffs = np.zeros((len(segs), width) + self.shape)
        for i, s in enumerate(segs):
            coeffs[i, :s[2].shape[0]] = np.broadcast_to(s[2], s[2].shape[:1] + self.shape)
        self._coeffs = coeffs
        self.segments = segs

    @classmethod
    def constant(cls, value):
        value = np.asarray(value, dtype=float)
        return cls([(-np.inf, np.inf, value[None])], value.shape)

    @classmethod
    def zeros(cls, shape):
        return cls.constant(np.zeros(shape))

    @property
    def is_constant(self):
        return len(self.segments) == 1 and not np.isfinite(self._starts[0])

    @property
    def is_zero(self):
        return not np.any(self._coeffs)

    def __call__(self, t):
        t = np.asarray(t, dtype=float)
        if self.is_constant:
            return np.broadcast_to(self._coeffs[0, 0], t.shape + self.shape).copy()
        idx = np.clip(np.searchsorted(self._starts, t, side="right") - 1, 0, len(self._starts) - 1)
        c = self._coeffs[idx]
        s = np.reshape(t - self._starts[idx], t.shape + (1,) * len(self.shape))
        # Horner along the degree axis
        ax = t.ndim
        out = np.take(c, c.shape[ax] - 1, axis=ax)
        for p in range(c.shape[ax] - 2, -1, -1):
            out = out * s + np.take(c, p, axis=ax)
        return out

    def check_cover(self, T, where=""):
        if self.is_constant:
            return
        starts, ends = self._starts, self._ends
        if abs(starts[0]) > 1e-12:
            raise ModelError(f"{where}: gap at t=0")
        for i in range(len(starts) - 1):
            if starts[i + 1] > ends[i] + 1e-12:
                raise ModelError(f"{where}: gap at t={ends[i]:g}")
            if starts[i + 1] < ends[i] - 1e-12:
                raise ModelError(f"{where}: overlap at t={starts[i + 1]:g}")
            left = self._eval_seg(i, ends[i])
            right = self._eval_seg(i + 1, starts[i + 1])
            if np.max(np.abs(left - right), initial=0.0) > 1e-12 * max(1.0, np.max(np.abs(left), initial=0.0)):
                raise ModelError(f"{where}: discontinuity at t={ends[i]:g}")
        if abs(ends[-1] - T) > 1e-12:
            raise ModelError(f"{where}: gap at t={ends[-1]:g}")

    def _eval_seg(self, i, t):
        s = t - self._starts[i]
        out = np.zeros(self.shape)
        for p in range(self._coeffs.shape[1] - 1, -1, -1):
            out = out * s + self._coeffs[i, p]
        return out

    def to_dict(self):
        if self.is_constant:
            return {"kind": "constant", "value": self._coeffs[0, 0].tolist()}
        return {"kind": "poly", "segments": [
            {"start": a, "end": b, "coeffs": c.tolist()} for a, b, c in self.segments]}


class DiscountFn:
    """Positive discount function lambda(s) on [0, T]."""

    _KEYS = {"exponential": {"rate"}, "hyperbolic": {"a", "b"}, "power": {"exponent"}, "tabulated": {"times", "values"}}

    def __init__(self, kind, **params):
        self.kind = kind
        self.params = params
        extra = set(params) - self._KEYS.get(kind, set(params))
        if extra:
            raise ModelError(f"{kind} discount does not take {sorted(extra)}")
        if kind == "exponential":
            self.rate = float(params.get("rate", 0.0))
        elif kind == "hyperbolic":
            self.a = float(params["a"])
            self.b = float(params["b"])
            if self.a <= 0:
                raise ModelError("hyperbolic discount needs a > 0")
        elif kind == "power":
            self.exponent = float(params["exponent"])
        elif kind == "tabulated":
            self.times = np.asarray(params["times"], dtype=float)
            self.values = np.asarray(params["values"], dtype=float)
            if self.times.ndim != 1 or self.times.shape != self.values.shape or len(self.times) < 2:
                raise ModelError("tabulated discount needs matching 1-d times/values")
            if np.any(np.diff(self.times) <= 0):
                raise ModelError("tabulated discount times must increase")
        else:
            raise ModelError(f"unknown discount kind {kind!r}")

    def __call__(self, s):
        s = np.asarray(s, dtype=float)
        if self.kind == "exponential":
            return np.exp(-self.rate * s)
        if self.kind == "hyperbolic":
            return (1.0 + self.a * s) ** (-self.b / self.a)
        if self.kind == "power":
            return (1.0 + s) ** (-self.exponent)
        return np.interp(s, self.times, self.values)

    def derivative(self, s):
        s = np.asarray(s, dtype=float)
        if self.kind == "exponential":
            return -self.rate * np.exp(-self.rate * s)
        if self.kind == "hyperbolic":
            return -self.b * (1.0 + self.a * s) ** (-self.b / self.a - 1.0)
        if self.kind == "power":
            return -self.exponent * (1.0 + s) ** (-self.exponent - 1.0)
        slopes = np.diff(self.values) / np.diff(self.times)
        idx = np.clip(np.searchsorted(self.times, s, side="right") - 1, 0, len(slopes) - 1)
        return slopes[idx]

    def check(self, T):
        s = np.linspace(0.0, T, 2001)
        if self.kind == "tabulated":
            s = np.union1d(s, self.times[(self.times >= 0) & (self.times <= T)])
        if np.any(self(s) <= 0) or not np.all(np.isfinite(self(s))):
            raise ModelError("discount must be positive and finite on [0,T]")

    def to_dict(self):
        out = {"kind": self.kind}
        for key, val in self.params.items():
            out[key] = np.asarray(val).tolist()
        return out


class TwoTimeFn:
    """Kernel K(tau; t) on the triangle tau <= t, extended by K(tau; tau) below it.

    kinds: ``tau-independent`` (base TimeFn), ``separable`` (lambda(t-tau) * base(t)),
    ``tabulated`` (values on a square time grid, bilinear interpolation).
    """

    def __init__(self, kind, base=None, lam=None, times=None, values=None, symmetric=False):
        self.kind = kind
        self.base = base
        self.lam = lam
        self.symmetric = symmetric
        if kind in ("tau-independent", "separable"):
            if base is None:
                raise ModelError("kernel needs a base time function")
            if kind == "separable" and lam is None:
                raise ModelError("separable kernel needs a discount function")
            self.shape = base.shape
        elif kind == "tabulated":
            self.times = np.asarray(times, dtype=float)
            self.values = np.asarray(values, dtype=float)
            nt = len(self.times)
            if self.values.shape[:2] != (nt, nt):
                raise ModelError("tabulated kernel values must be (nt, nt, ...)")
            self.shape = self.values.shape[2:]
        else:
            raise ModelError(f"unknown kernel kind {kind!r}")
        if symmetric and len(self.shape) == 2:
            self._check_symmetric()

    @classmethod
    def constant(cls, value, symmetric=False):
        return cls("tau-independent", base=TimeFn.constant(value), symmetric=symmetric)

    @property
    def is_zero(self):
        if self.kind == "tabulated":
            return not np.any(self.values)
        return self.base.is_zero

    def __call__(self, tau, t):
        tau = np.asarray(tau, dtype=float)
        t = np.maximum(np.asarray(t, dtype=float), tau)
        tau, t = np.broadcast_arrays(tau, t)
        if self.kind == "tau-independent":
            return self.base(t)
        if self.kind == "separable":
            val = self.base(t)
            w = self.lam(t - tau)
            return _expand(w, val) * val
        return self._bilinear(tau, t)

    def _bilinear(self, tau, t):
        g = self.times
        def locate(x):
            i = np.clip(np.searchsorted(g, x, side="right") - 1, 0, len(g) - 2)
            w = np.clip((x - g[i]) / (g[i + 1] - g[i]), 0.0, 1.0)
            return i, w
        # fill the lower triangle with the diagonal extension first
        vals = self.values.copy()
        for i in range(len(g)):
            vals[i, :i] = vals[i, i]
        i, wi = locate(tau)
        j, wj = locate(t)
        v00, v01 = vals[i, j], vals[i, j + 1]
        v10, v11 = vals[i + 1, j], vals[i + 1, j + 1]
        wi = _expand(wi, v00)
        wj = _expand(wj, v00)
        return (1 - wi) * ((1 - wj) * v00 + wj * v01) + wi * ((1 - wj) * v10 + wj * v11)

    def _check_symmetric(self):
        if self.kind == "tabulated":
            vals = self.values
        else:
            vals = np.stack([c for _, _, c in self.base.segments])
        if np.max(np.abs(vals - np.swapaxes(vals, -1, -2)), initial=0.0) > 1e-12:
            raise ModelError("symmetric kernel has asymmetric values")

    def to_dict(self, shared_discount=None):
        if self.kind == "tau-independent":
            return self.base.to_dict()
        if self.kind == "separable":
            lam = "discount" if self.lam is shared_discount else self.lam.to_dict()
            return {"kind": "separable", "lambda": lam, "base": self.base.to_dict()}
        return {"kind": "tabulated", "times": self.times.tolist(), "values": self.values.tolist()}


class TerminalFn:
    """One-time function of tau: ``plain`` base(tau) or ``separable`` lambda(T-tau) * base(tau)."""

    def __init__(self, kind, base, T, lam=None, symmetric=False):
        if kind not in ("plain", "separable"):
            raise ModelError(f"unknown terminal kind {kind!r}")
        if kind == "separable" and lam is None:
            raise ModelError("separable terminal function needs a discount function")
        self.kind = kind
        self.base = base
        self.lam = lam
        self.T = float(T)
        self.shape = base.shape
        self.symmetric = symmetric
        if symmetric and len(self.shape) == 2:
            vals = np.stack([c for _, _, c in base.segments])
            if np.max(np.abs(vals - np.swapaxes(vals, -1, -2)), initial=0.0) > 1e-12:
                raise ModelError("symmetric terminal function has asymmetric values")

    @property
    def is_zero(self):
        return self.base.is_zero

    def __call__(self, tau):
        val = self.base(tau)
        if self.kind == "plain":
            return val
        return _expand(self.lam(self.T - np.asarray(tau, dtype=float)), val) * val

    def to_dict(self, shared_discount=None):
        if self.kind == "plain":
            return self.base.to_dict()
        lam = "discount" if self.lam is shared_discount else self.lam.to_dict()
        return {"kind": "separable", "lambda": lam, "base": self.base.to_dict()}


def eval_two_time(K, tau, t, shape=None):
    """K(tau; max(t, tau)); optional ``shape`` guards against mismatched kernels."""
    if shape is not None and tuple(K.shape) != tuple(shape):
        raise ModelError(f"kernel shape {K.shape} does not match expected {tuple(shape)}")
    out = K(tau, t)
    if K.symmetric and len(K.shape) == 2:
        out = 0.5 * (out + np.swapaxes(out, -1, -2))
    return out


@dataclass(frozen=True)
class LQModel:
    d: int
    m: int
    n: int
    k: int
    T: float
    dynamics: dict
    costs: dict
    terminal: dict
    discount: DiscountFn = None
    name: str = ""

    def __post_init__(self):
        if not self.T > 0:
            raise ModelError("horizon must be positive")
        shapes = expected_shapes(self.d, self.m, self.n, self.k)
        for group, names in ((self.dynamics, DYNAMICS), (self.costs, KERNELS), (self.terminal, TERMINAL)):
            for key in names:
                if key not in group:
                    raise ModelError(f"missing entry {key}")
                if tuple(group[key].shape) != shapes[key]:
                    raise ModelError(f"{key}: shape {tuple(group[key].shape)} != expected {shapes[key]}")
        for key in DYNAMICS:
            self.dynamics[key].check_cover(self.T, key)
        for key in KERNELS:
            K = self.costs[key]
            if K.kind != "tabulated":
                K.base.check_cover(self.T, key)
            if K.kind == "separable":
                K.lam.check(self.T)
        for key in TERMINAL:
            self.terminal[key].base.check_cover(self.T, key)
            if self.terminal[key].lam is not None:
                self.terminal[key].lam.check(self.T)

    @classmethod
    def build(cls, d, m, n, k, T, discount=None, name="", **entries):
        """Convenience constructor: missing entries are zero, arrays become constants."""
        shapes = expected_shapes(d, m, n, k)
        dyn, costs, term = {}, {}, {}
        for key in DYNAMICS:
            val = entries.pop(key, None)
            if val is None:
                val = TimeFn.zeros(shapes[key])
            elif not isinstance(val, TimeFn):
                val = TimeFn.constant(_promote(key, val, shapes[key]))
            dyn[key] = val
        for key in KERNELS:
            val = entries.pop(key, None)
            sym = key in SYMMETRIC
            if val is None:
                val = TwoTimeFn.constant(np.zeros(shapes[key]), symmetric=sym)
            elif not isinstance(val, TwoTimeFn):
                val = TwoTimeFn.constant(_promote(key, val, shapes[key]), symmetric=sym)
            costs[key] = val
        for key in TERMINAL:
            val = entries.pop(key, None)
            sym = key in SYMMETRIC
            if val is None:
                val = TerminalFn("plain", TimeFn.zeros(shapes[key]), T, symmetric=sym)
            elif not isinstance(val, TerminalFn):
                val = TerminalFn("plain", TimeFn.constant(_promote(key, val, shapes[key])), T, symmetric=sym)
            term[key] = val
        if entries:
            raise ModelError(f"unknown entries {sorted(entries)}")
        return cls(d, m, n, k, float(T), dyn, costs, term, discount, name)

    def coeffs(self, t):
        """All dynamics coefficients at times ``t``; returns a dict of arrays."""
        return {key: fn(t) for key, fn in self.dynamics.items()}

    def kernel(self, key, tau, t):
        return eval_two_time(self.costs[key], tau, t)

    def term(self, key, tau):
        out = self.terminal[key](tau)
        if key in ("P", "Pbar"):
            out = 0.5 * (out + np.swapaxes(out, -1, -2))
        return out

    def is_zero(self, key):
        if key in self.dynamics:
            return self.dynamics[key].is_zero
        if key in self.costs:
            return self.costs[key].is_zero
        return self.terminal[key].is_zero

    @property
    def has_cross_terms(self):
        return not (self.is_zero("M") and self.is_zero("Mbar"))

    def scaled_costs(self, factor):
        """Same model with every cost kernel multiplied by ``factor``."""
        costs = {key: _scale_kernel(K, factor) for key, K in self.costs.items()}
        term = {key: TerminalFn(F.kind, _scale_timefn(F.base, factor), F.T, F.lam, F.symmetric)
                for key, F in self.terminal.items()}
        return LQModel(self.d, self.m, self.n, self.k, self.T, self.dynamics, costs, term,
                       self.discount, self.name)

    def to_dict(self):
        disc = self.discount
        return {
            "name": self.name,
            "dims": {"d": self.d, "m": self.m, "n": self.n, "k": self.k},
            "horizon": self.T,
            "discount": disc.to_dict() if disc is not None else None,
            "dynamics": {key: fn.to_dict() for key, fn in self.dynamics.items()},
            "costs": {**{key: K.to_dict(disc) for key, K in self.costs.items()},
                      **{key: F.to_dict(disc) for key, F in self.terminal.items()}},
        }


def _scale_timefn(fn, factor):
    return TimeFn([(a, b, factor * c) for a, b, c in fn.segments], fn.shape)


def _scale_kernel(K, factor):
    if K.kind == "tabulated":
        return TwoTimeFn("tabulated", times=K.times, values=factor * K.values, symmetric=K.symmetric)
    return TwoTimeFn(K.kind, base=_scale_timefn(K.base, factor), lam=K.lam, symmetric=K.symmetric)


def _promote(key, value, shape, where=None):
    """Coerce a JSON/array value to ``shape``; scalars fill 1-sized shapes or scale I."""
    arr = np.asarray(value, dtype=float)
    where = where or key
    if arr.shape == shape:
        return arr
    if arr.ndim == 0:
        if all(s == 1 for s in shape):
            return np.full(shape, float(arr))
        if len(shape) == 2 and shape[0] == shape[1]:
            return float(arr) * np.eye(shape[0])
        if len(shape) == 3 and shape[0] == 1 and shape[1] == shape[2]:
            return float(arr) * np.eye(shape[1])[None]
    # single noise column may be given without the leading axis
    if len(shape) >= 2 and shape[0] == 1 and arr.shape == shape[1:] and key in (
            "theta", "D", "Dbar", "F", "Fbar", "theta0", "D0", "D0bar", "F0", "F0bar"):
        return arr[None]
    if arr.size == int(np.prod(shape)) and arr.ndim == 1 and len(shape) == 1:
        return arr.reshape(shape)
    raise ModelError(f"{where}: shape {arr.shape} does not match expected {shape}")


# ---------------------------------------------------------------- parsing

def _parse_timefn(key, entry, shape, where):
    if not isinstance(entry, dict) or "kind" not in entry:
        return TimeFn.constant(_promote(key, entry, shape, where))
    kind = entry["kind"]
    if kind == "constant":
        return TimeFn.constant(_promote(key, entry["value"], shape, where))
    if kind == "poly":
        segs = []
        for i, seg in enumerate(entry.get("segments", [])):
            try:
                a, b = seg["start"], seg["end"]
                coeffs = seg["coeffs"]
            except (KeyError, TypeError) as exc:
                raise ModelError(f"{where}: segment {i} malformed ({exc})") from None
            coeffs = np.stack([_promote(key, c, shape, f"{where}.segments[{i}]") for c in coeffs])
            segs.append((a, b, coeffs))
        if not segs:
            raise ModelError(f"{where}: poly without segments")
        return TimeFn(segs, shape)
    raise ModelError(f"{where}: unknown function kind {kind!r}")


def _parse_discount(entry, shared, where):
    if entry is None or entry == "discount":
        if shared is None:
            raise ModelError(f"{where}: refers to the model discount but none is given")
        return shared
    if not isinstance(entry, dict) or "kind" not in entry:
        raise ModelError(f"{where}: discount must be an object with a kind")
    params = {k: v for k, v in entry.items() if k != "kind"}
    try:
        return DiscountFn(entry["kind"], **params)
    except KeyError as exc:
        raise ModelError(f"{where}: missing discount parameter {exc}") from None


def _parse_kernel(key, entry, shape, shared, where):
    sym = key in SYMMETRIC
    if isinstance(entry, dict) and entry.get("kind") == "separable":
        lam = _parse_discount(entry.get("lambda"), shared, where + ".lambda")
        base = _parse_timefn(key, entry.get("base", 1.0), shape, where + ".base")
        return TwoTimeFn("separable", base=base, lam=lam, symmetric=sym)
    if isinstance(entry, dict) and entry.get("kind") == "tabulated":
        vals = np.asarray(entry["values"], dtype=float)
        return TwoTimeFn("tabulated", times=entry["times"], values=vals, symmetric=sym)
    return TwoTimeFn("tau-independent", base=_parse_timefn(key, entry, shape, where), symmetric=sym)


def _parse_terminal(key, entry, shape, shared, T, where):
    sym = key in SYMMETRIC
    if isinstance(entry, dict) and entry.get("kind") == "separable":
        lam = _parse_discount(entry.get("lambda"), shared, where + ".lambda")
        base = _parse_timefn(key, entry.get("base", 1.0), shape, where + ".base")
        return TerminalFn("separable", base, T, lam=lam, symmetric=sym)
    return TerminalFn("plain", _parse_timefn(key, entry, shape, where), T, symmetric=sym)


TOP_LEVEL = ("name", "kind", "dims", "horizon", "discount", "dynamics", "costs")


def model_from_dict(doc):
    """Build an LQModel from the JSON document layout."""
    for key in doc:
        if key not in TOP_LEVEL:
            raise ModelError(f"unknown top-level key {key!r}")
    try:
        dims = doc["dims"]
        d, m = int(dims["d"]), int(dims["m"])
        n, k = int(dims.get("n", 1)), int(dims.get("k", 1))
        T = float(doc["horizon"])
    except (KeyError, TypeError, ValueError) as exc:
        raise ModelError(f"dims/horizon: {exc}") from None
    if min(d, m) < 1 or min(n, k) < 0:
        raise ModelError("dims: d, m must be >= 1 and n, k >= 0")
    shapes = expected_shapes(d, m, n, k)
    shared = None
    if doc.get("discount") is not None:
        shared = _parse_discount(doc["discount"], None, "discount")
    dyn_doc = doc.get("dynamics", {}) or {}
    cost_doc = doc.get("costs", {}) or {}
    for key in dyn_doc:
        if key not in DYNAMICS:
            raise ModelError(f"dynamics: unknown key {key!r}")
    for key in cost_doc:
        if key not in KERNELS + TERMINAL:
            raise ModelError(f"costs: unknown key {key!r}")
    dyn, costs, term = {}, {}, {}
    for key in DYNAMICS:
        entry = dyn_doc.get(key, np.zeros(shapes[key]))
        dyn[key] = _parse_timefn(key, entry, shapes[key], f"dynamics.{key}")
    for key in KERNELS:
        entry = cost_doc.get(key, np.zeros(shapes[key]))
        costs[key] = _parse_kernel(key, entry, shapes[key], shared, f"costs.{key}")
    for key in TERMINAL:
        entry = cost_doc.get(key, np.zeros(shapes[key]))
        term[key] = _parse_terminal(key, entry, shapes[key], shared, T, f"costs.{key}")
    return LQModel(d, m, n, k, T, dyn, costs, term, shared, str(doc.get("name", "")))


def load_model(path):
    """Read and validate a model JSON file."""
    try:
        with open(path) as fh:
            doc = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ModelError(f"{path}: parse error at line {exc.lineno}: {exc.msg}") from None
    except OSError as exc:
        raise ModelError(f"{path}: {exc}") from None
    return model_from_dict(doc)


def save_model(model, path):
    with open(path, "w") as fh:
        json.dump(model.to_dict(), fh, indent=1)


# ---------------------------------------------------------------- conditions

@dataclass
class ConditionReport:
    passed: bool
    min_eigs: dict = field(default_factory=dict)
    failures: list = field(default_factory=list)
    notes: list = field(default_factory=list)

    def to_dict(self):
        return {"passed": self.passed, "min_eigs": self.min_eigs,
                "failures": self.failures, "notes": self.notes}


def _min_eig(stack):
    stack = 0.5 * (stack + np.swapaxes(stack, -1, -2))
    return np.linalg.eigvalsh(stack)[..., 0]


def _pairs(grid):
    grid = np.asarray(grid, dtype=float)
    i, j = np.triu_indices(len(grid))
    return grid[i], grid[j]


def check_pd_conditions(model, grid, delta=0.0):
    """Report the positivity conditions on every grid node of the triangle."""
    tau, t = _pairs(grid)
    taus = np.asarray(grid, dtype=float)
    m = model.m
    Q, Qb = model.kernel("Q", tau, t), model.kernel("Qbar", tau, t)
    R, Rb = model.kernel("R", tau, t), model.kernel("Rbar", tau, t)
    P, Pb = model.term("P", taus), model.term("Pbar", taus)
    shift = delta * np.eye(m)
    checks = {
        "Q": (Q, tau, t), "Q+Qbar": (Q + Qb, tau, t),
        "R-delta": (R - shift, tau, t), "R+Rbar-delta": (R + Rb - shift, tau, t),
        "P": (P, taus, None), "P+Pbar": (P + Pb, taus, None),
    }
    rep = ConditionReport(True)
    for name, (stack, tt, ss) in checks.items():
        eig = _min_eig(stack)
        pos = int(np.argmin(eig))
        rep.min_eigs[name] = float(eig[pos])
        if eig[pos] < PSD_TOL:
            rep.passed = False
            node = {"tau": float(tt[pos])} if ss is None else {"tau": float(tt[pos]), "t": float(ss[pos])}
            rep.failures.append({"condition": name, "min_eig": float(eig[pos]), **node})
    rep.notes.append(f"delta={delta:g}")
    if model.has_cross_terms:
        rep.notes.append("M or Mbar nonzero: outside the scope of the well-posedness guarantee")
    return rep


def check_monotonicity(model, grid):
    """Report K(t;s) <= K(tau;s) for t <= tau <= s on grid triples (and P(t) <= P(tau))."""
    g = np.asarray(grid, dtype=float)
    G = len(g)
    ii, jj = np.meshgrid(np.arange(G), np.arange(G), indexing="ij")
    vals = {}
    for name, keys in (("Q", ("Q",)), ("Q+Qbar", ("Q", "Qbar")), ("R", ("R",)), ("R+Rbar", ("R", "Rbar"))):
        vals[name] = sum(model.kernel(key, g[ii], g[jj]) for key in keys)
    rep = ConditionReport(True)
    for name, K in vals.items():
        worst = (np.inf, None)
        for s in range(G):
            col = K[:s + 1, s]
            a, b = np.triu_indices(s + 1, 1)  # a = t index < b = tau index
            if len(a) == 0:
                continue
            eig = _min_eig(col[b] - col[a])
            pos = int(np.argmin(eig))
            if eig[pos] < worst[0]:
                worst = (eig[pos], (g[a[pos]], g[b[pos]], g[s]))
        rep.min_eigs[name] = float(worst[0]) if worst[1] is not None else 0.0
        if worst[1] is not None and worst[0] < PSD_TOL:
            rep.passed = False
            t0, t1, s0 = worst[1]
            rep.failures.append({"condition": name, "min_eig": float(worst[0]),
                                 "t": float(t0), "tau": float(t1), "s": float(s0)})
    for name, keys in (("P", ("P",)), ("P+Pbar", ("P", "Pbar"))):
        P = sum(model.term(key, g) for key in keys)
        a, b = np.triu_indices(G, 1)
        eig = _min_eig(P[b] - P[a]) if len(a) else np.array([0.0])
        pos = int(np.argmin(eig))
        rep.min_eigs[name] = float(eig[pos])
        if eig[pos] < PSD_TOL:
            rep.passed = False
            rep.failures.append({"condition": name, "min_eig": float(eig[pos]),
                                 "t": float(g[a[pos]]), "tau": float(g[b[pos]])})
    return rep
