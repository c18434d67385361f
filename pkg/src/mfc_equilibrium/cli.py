"""Command-line entry point.

Exit codes: 0 success, 1 a verification gate failed, 2 bad input,
3 numerical failure (ill-conditioning, no convergence, divergence, failed preconditions).
"""
import argparse
import csv
import json
import os
import sys
from dataclasses import dataclass
from importlib import resources

import numpy as np

from . import examples as ex
from .equilibrium import FeedbackStrategy, MeasureMoments, equilibrium_map, gamma_scan, value
from .errors import ConditionsViolated, DomainViolation, IllConditioned, ModelError, NotConverged, SimulationDiverged
from .mckv_sim import CostSpec, InitLaw, StrategySpec, estimate_cost, simulate, write_cost_json
from .model import DiscountFn, _parse_discount, _parse_timefn, model_from_dict
from .riccati import classical_riccati, residual_table, solve_fixed_point, solve_partition, systemic_risk_residual
from .verifier import (base_ensemble, equilibrium_certificate, estimate_delta, lq_control, random_perturbations,
                       write_delta_report)

BUNDLED = {"ex1": "ex1.json", "ex2": "ex2.json", "nonlq": "nonlq.json",
           "mean-variance": "mean_variance_params.json", "systemic-risk": "systemic_risk_params.json"}


class GateFailed(Exception):
    pass


@dataclass
class RunConfig:
    command: str
    model: str = None
    method: str = "fixed-point"
    grid: int = 200
    substeps: int = 4
    particles: int = 2000
    paths: int = 32
    dt: float = None
    t0: float = 0.0
    seed: int = 0
    threads: int = 1
    eps: list = None
    perturbations: int = 2
    tol: float = 1e-8
    out: str = "."
    init: str = None
    name: str = None
    params: str = None
    keep_every: int = 0
    probe: str = "equilibrium"

    def validate(self, T=None):
        for key in ("grid", "substeps", "particles", "paths", "threads", "perturbations"):
            if getattr(self, key) is None or getattr(self, key) <= 0:
                raise ModelError(f"--{key} must be positive")
        if self.tol <= 0:
            raise ModelError("--tol must be positive")
        if self.dt is not None and self.dt <= 0:
            raise ModelError("--dt must be positive")
        if T is not None and self.dt is not None and self.dt > (T - self.t0) / 10 + 1e-15:
            raise ModelError("--dt must not exceed (T - t0)/10")
        if self.eps is not None and any(e <= 0 for e in self.eps):
            raise ModelError("--eps entries must be positive")
        if self.probe not in ("equilibrium", "all"):
            raise ModelError("--probe must be 'equilibrium' or 'all'")


# ------------------------------------------------------------------ input resolution

def bundled_path(name):
    return str(resources.files("mfc_equilibrium") / "data" / BUNDLED[name])


def _resolve(path):
    if path in BUNDLED and not os.path.exists(path):
        return bundled_path(path)
    return path


def _read_json(path):
    path = _resolve(path)
    try:
        with open(path) as fh:
            return json.load(fh)
    except json.JSONDecodeError as exc:
        raise ModelError(f"{path}: parse error at line {exc.lineno}: {exc.msg}") from None
    except OSError as exc:
        raise ModelError(f"{path}: {exc}") from None


def _fn(doc, key, default):
    return _parse_timefn(key, doc.get(key, default), (), key)


def _discount(doc, default):
    entry = doc.get("discount")
    return default if entry is None else _parse_discount(entry, None, "discount")


def mean_variance_params(doc):
    try:
        return ex.MeanVarianceParams(r=_fn(doc, "r", 0.0), rho=_fn(doc, "rho", 0.2), theta=_fn(doc, "theta", 0.3),
                                     theta0=_fn(doc, "theta0", 0.1), eta=float(doc.get("eta", 1.0)),
                                     discount=_discount(doc, DiscountFn("hyperbolic", a=1.0, b=1.0)),
                                     T=float(doc.get("T", 1.0)))
    except (TypeError, ValueError) as exc:
        raise ModelError(f"mean-variance parameters: {exc}") from None


def systemic_risk_params(doc):
    try:
        kw = {k: float(doc[k]) for k in ("k", "sigma", "rho", "q", "eta", "c", "T") if k in doc}
        return ex.SystemicRiskParams(discount=_discount(doc, DiscountFn("power", exponent=-0.1)), **kw)
    except (TypeError, ValueError) as exc:
        raise ModelError(f"systemic-risk parameters: {exc}") from None


def nonlq_params(doc):
    doc = doc.get("params", doc)
    try:
        return ex.NonLQParams(mu=_fn(doc, "mu", 0.1), sigma=_fn(doc, "sigma", 0.3), sigma0=_fn(doc, "sigma0", 0.2),
                              theta=float(doc.get("theta", 0.5)), delta=float(doc.get("delta", 2.0)),
                              discount=_discount(doc, DiscountFn("hyperbolic", a=1.0, b=1.0)),
                              T=float(doc.get("T", 1.0)))
    except (TypeError, ValueError) as exc:
        raise ModelError(f"utility-model parameters: {exc}") from None


def load_any(path):
    """An LQModel, or a NonLQModel when the document says ``"kind": "nonlq"``."""
    doc = _read_json(path)
    if not isinstance(doc, dict):
        raise ModelError(f"{path}: top level must be an object")
    if doc.get("kind") == "nonlq":
        return ex.NonLQModel(nonlq_params(doc))
    return model_from_dict(doc)


def _init_law(spec, d, nonlq):
    if spec is None:
        return InitLaw.point([1.0]) if nonlq else InitLaw.gaussian(np.ones(d), 0.25 * np.eye(d))
    doc = json.loads(spec) if spec.lstrip().startswith("{") else _read_json(spec)
    try:
        law = InitLaw.from_dict(doc)
    except (KeyError, TypeError, ValueError) as exc:
        raise ModelError(f"initial law: {exc}") from None
    if law.d != d:
        raise ModelError(f"initial law dimension {law.d} != state dimension {d}")
    return law


# ------------------------------------------------------------------ output helpers

def _write_json(path, doc):
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True, default=_json_default)


def _json_default(o):
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, (np.floating, np.integer, np.bool_)):
        return o.item()
    raise TypeError(f"not serialisable: {type(o)}")


def _write_csv(path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for r in rows:
            w.writerow([repr(float(x)) if isinstance(x, (float, np.floating)) else x for x in r])


def _solve(model, cfg):
    if cfg.method == "partition":
        return solve_partition(model, cfg.grid, substeps=cfg.substeps)
    if cfg.method == "fixed-point":
        return solve_fixed_point(model, cfg.grid, substeps=cfg.substeps)
    raise ModelError(f"unknown method {cfg.method!r}")


def _residual_pairs(N, limit=400):
    pairs = [(i, j) for i in range(N) for j in range(i, N)]
    step = max(1, len(pairs) // limit)
    return pairs[::step]


def _riccati_report(model, sol):
    rt = residual_table(model, sol, _residual_pairs(sol.N))
    maxima = {k: max(r[2][k] for r in rt) for k in rt[0][2]}
    info = {k: v for k, v in sol.info.items()}
    return {"method": sol.method, "N": sol.N, "substeps": sol.substeps, "residual_max": maxima, **info}


# ------------------------------------------------------------------ commands

def cmd_solve(cfg):
    model = load_any(cfg.model)
    os.makedirs(cfg.out, exist_ok=True)
    if isinstance(model, ex.NonLQModel):
        res = ex.nonlq_solution(model.params, np.linspace(0.0, model.T, cfg.grid + 1))
        times, A = res["times"], res["A"]
        rows = [(times[i], times[j], "A", 0, 0, A[i, j]) for i in range(len(times)) for j in range(i, len(times))]
        _write_csv(os.path.join(cfg.out, "lambda.csv"), ["tau", "t", "block", "i", "j", "value"], rows)
        _write_json(os.path.join(cfg.out, "riccati_report.json"), {
            "method": "closed-form", "abar_hat": res["abar"], "times": times,
            "ode_residual": model.ode_residual(0.0, times[1:-1])})
        return 0
    sol = _solve(model, cfg)
    _write_csv(os.path.join(cfg.out, "lambda.csv"), ["tau", "t", "block", "i", "j", "value"], sol.to_csv_rows())
    _write_json(os.path.join(cfg.out, "riccati_report.json"), _riccati_report(model, sol))
    return 0


def cmd_residuals(cfg):
    model = load_any(cfg.model)
    os.makedirs(cfg.out, exist_ok=True)
    if isinstance(model, ex.NonLQModel):
        # the utility model has a closed form; its residual is that of the ODE for A
        times = np.linspace(0.0, model.T, cfg.grid + 1)
        rows = []
        for i, tau in enumerate(times[:-1]):
            inner = times[i + 1:-1]
            if len(inner):
                rows += [(tau, t, r) for t, r in zip(inner, model.ode_residuals(tau, inner))]
        _write_csv(os.path.join(cfg.out, "residuals.csv"), ["tau", "t", "rA"], rows)
        _write_json(os.path.join(cfg.out, "residuals.json"), {"method": "closed-form", "N": cfg.grid,
                                                              "max": {"rA": max(r[2] for r in rows)}})
        return 0
    sol = _solve(model, cfg)
    rt = residual_table(model, sol)
    nodes = sol.grid.nodes
    _write_csv(os.path.join(cfg.out, "residuals.csv"), ["tau", "t", "rLambda", "rbeta", "rgamma", "rkappa"],
               [(nodes[i], nodes[j], r["rLambda"], r["rbeta"], r["rgamma"], r["rkappa"]) for i, j, r in rt])
    maxima = {k: max(r[2][k] for r in rt) for k in rt[0][2]}
    _write_json(os.path.join(cfg.out, "residuals.json"), {"method": sol.method, "N": sol.N, "max": maxima})
    return 0


def _sim_dt(cfg, T):
    return cfg.dt if cfg.dt is not None else (T - cfg.t0) / 400


def cmd_simulate(cfg):
    model = load_any(cfg.model)
    cfg.validate(model.T)
    os.makedirs(cfg.out, exist_ok=True)
    dt = _sim_dt(cfg, model.T)
    nonlq = isinstance(model, ex.NonLQModel)
    init = _init_law(cfg.init, 1 if nonlq else model.d, nonlq)
    if nonlq:
        ens = simulate(model, StrategySpec.scalar_linear(model.abar_hat), init, cfg.t0, cfg.particles, cfg.paths,
                       dt, cfg.seed, threads=cfg.threads, control=model.measure_gradient(cfg.t0),
                       keep_every=cfg.keep_every)
        bench = model.value(cfg.t0, cfg.t0, init)
    else:
        sol = _solve(model, cfg)
        fb = FeedbackStrategy.from_solution(model, sol)
        try:
            ctrl = lq_control(sol, cfg.t0)
            bench = value(sol, cfg.t0, cfg.t0, init.moments())
        except ValueError:
            ctrl, bench = None, None
        ens = simulate(model, StrategySpec.lq_feedback(fb), init, cfg.t0, cfg.particles, cfg.paths, dt, cfg.seed,
                       threads=cfg.threads, control=ctrl, keep_every=cfg.keep_every)
    est = estimate_cost(ens, CostSpec(cfg.t0, model))
    doc = write_cost_json(os.path.join(cfg.out, "cost.json"), est, ens)
    if bench is not None:
        doc.update({"value_ansatz": bench, "within_3_stderr": bool(abs(est["mean"] - bench) <= 3 * est["stderr"])})
        _write_json(os.path.join(cfg.out, "cost.json"), doc)
    if cfg.keep_every:
        ens.write_paths_csv(os.path.join(cfg.out, "paths.csv"))
    return 0


def cmd_verify(cfg):
    model = load_any(cfg.model)
    cfg.validate(model.T)
    os.makedirs(cfg.out, exist_ok=True)
    dt = _sim_dt(cfg, model.T)
    if isinstance(model, ex.NonLQModel):
        init = _init_law(cfg.init, 1, True)
        res = ex.nonlq_verify(model.params, N=cfg.particles, M=cfg.paths, dt=dt, seed=cfg.seed, eps_list=cfg.eps,
                              t0=cfg.t0, init=init, threads=cfg.threads, N_value=max(cfg.particles, 10000))
        write_delta_report(os.path.join(cfg.out, "delta_report.json"), res["probes"], value_check=res["value"])
        if not res["passed"]:
            raise GateFailed("utility-model verification failed")
        return 0
    sol = _solve(model, cfg)
    sol.node_index(cfg.t0)
    init = _init_law(cfg.init, model.d, False)
    mo = init.moments()
    rng = np.random.default_rng(cfg.seed)
    samples = [mo] + [MeasureMoments(rng.standard_normal(model.d), np.eye(model.d) * rng.uniform(0.1, 2.0))
                      for _ in range(3)]
    cert = equilibrium_certificate(model, sol, sol.grid.nodes[::max(1, sol.N // 10)], samples, count=200,
                                   tol=cfg.tol, seed=cfg.seed)
    fb = FeedbackStrategy.from_solution(model, sol)
    vs = [equilibrium_map(model, sol, cfg.t0, mo)] + random_perturbations(model, sol, cfg.t0, mo, cfg.perturbations,
                                                                          seed=cfg.seed, scale=0.5)
    gamma_scan(model, sol, [cfg.t0], mo, vs, path=os.path.join(cfg.out, "gamma_scan.csv"))
    eb = base_ensemble(model, sol, cfg.t0, init, cfg.particles, cfg.paths, dt, cfg.seed, threads=cfg.threads,
                       feedback=fb)
    # random maps always enter the analytic scan; their spike tests run only on request
    probed = vs if cfg.probe == "all" else vs[:1]
    reports = [estimate_delta(model, sol, v, cfg.t0, init, eps_list=cfg.eps, N=cfg.particles, M=cfg.paths, dt=dt,
                              seed=cfg.seed, threads=cfg.threads, perturbation_id=pid,
                              label="equilibrium" if pid == 0 else f"random-{pid}", base_ensemble=eb, feedback=fb)
               for pid, v in enumerate(probed)]
    doc = write_delta_report(os.path.join(cfg.out, "delta_report.json"), reports, certificate=cert)
    if not (doc["passed"] and cert["passed"]):
        raise GateFailed("equilibrium verification failed")
    return 0


def cmd_example(cfg):
    os.makedirs(cfg.out, exist_ok=True)
    name = cfg.name
    doc = _read_json(cfg.params) if cfg.params else {}
    if name == "mean-variance":
        p = mean_variance_params(doc)
        cf = ex.mean_variance_closed_form(p, cfg.grid, cfg.substeps)
        ref, model = cf["solution"], cf["model"]
        sols = {"partition": solve_partition(model, cfg.grid, substeps=cfg.substeps),
                "fixed_point": solve_fixed_point(model, cfg.grid, substeps=cfg.substeps)}
        nodes = ref.grid.nodes
        step = max(1, cfg.grid // 20)
        rows, summary = [], {}
        for block in ("lam", "beta", "gamma", "kappa"):
            R = ref.nodes_table(block).reshape(len(nodes), len(nodes), -1)[..., 0]
            scale = max(float(np.nanmax(np.abs(R))), 1e-300)
            for key, s in sols.items():
                S = s.nodes_table(block).reshape(len(nodes), len(nodes), -1)[..., 0]
                err = float(np.nanmax(np.abs(S - R)))
                summary[f"{block}_{key}_max_abs"] = err
                summary[f"{block}_{key}_max_rel"] = err / scale if block != "beta" else err
            for i in range(0, len(nodes), step):
                for j in range(i, len(nodes), step):
                    rows.append((nodes[i], nodes[j], block, R[i, j], *(
                        s.nodes_table(block).reshape(len(nodes), len(nodes), -1)[i, j, 0] for s in sols.values())))
        _write_csv(os.path.join(cfg.out, "comparison.csv"),
                   ["tau", "t", "block", "closed_form", "partition", "fixed_point"], rows)
        fb = cf["feedback"]
        summary["feedback_t0"] = {"Theta": fb.Theta[0].tolist(), "intercept": (-fb.c[0]).tolist()}
        _write_json(os.path.join(cfg.out, "summary.json"), summary)
        return 0
    if name == "systemic-risk":
        p = systemic_risk_params(doc)
        eq = ex.systemic_risk_equilibrium(p, cfg.grid, substeps=max(cfg.substeps, 32))
        raw = eq["raw"]
        nodes = raw.grid.nodes
        L, K = eq["lam"], eq["kappa"]
        rows = [(nodes[i], nodes[j], L[i, j], K[i, j]) for i in range(len(nodes)) for j in range(i, len(nodes))]
        _write_csv(os.path.join(cfg.out, "lambda.csv"), ["tau", "t", "Lambda", "kappa"], rows)
        summary = {"constants": raw.constants, "precondition": bool(raw.precondition), "max_tilde": raw.max_tilde,
                   "residual_max": systemic_risk_residual(p.as_dict(), raw), "iterations": raw.iterations,
                   "feedback_gain": (2 * (raw.diag() + p.q / 2)).tolist()}
        p1 = ex.SystemicRiskParams(k=p.k, sigma=p.sigma, rho=p.rho, q=p.q, eta=p.eta, c=p.c,
                                   discount=DiscountFn("exponential", rate=0.0), T=p.T)
        L1 = ex.systemic_risk_equilibrium(p1, cfg.grid, substeps=max(cfg.substeps, 32))["lam"]
        orc = classical_riccati(p.k, p.q, p.c, p.eta, p.T, nodes)
        summary["constant_discount_vs_classical"] = float(np.nanmax(np.abs(L1 - orc[None, :])))
        _write_json(os.path.join(cfg.out, "summary.json"), summary)
        return 0
    if name == "nonlq":
        p = nonlq_params(doc)
        res = ex.nonlq_solution(p, np.linspace(0.0, p.T, cfg.grid + 1))
        times, A = res["times"], res["A"]
        _write_csv(os.path.join(cfg.out, "A.csv"), ["tau", "t", "A", "B"],
                   [(times[i], times[j], A[i, j], res["B"][i, j]) for i in range(len(times))
                    for j in range(i, len(times))])
        _write_csv(os.path.join(cfg.out, "abar.csv"), ["t", "abar_hat"], zip(times, res["abar"]))
        m = res["model"]
        _write_json(os.path.join(cfg.out, "summary.json"), {
            "ode_residual": m.ode_residual(0.0, times[1:-1]), "A_diag_negative": bool(np.all(np.diag(A) < 0))})
        return 0
    raise ModelError(f"unknown example {name!r}")


COMMANDS = {"solve": cmd_solve, "simulate": cmd_simulate, "verify": cmd_verify, "example": cmd_example,
            "residuals": cmd_residuals}


# ------------------------------------------------------------------ argument parsing

def _eps(text):
    try:
        return [float(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad eps list {text!r}") from None


def build_parser():
    ap = argparse.ArgumentParser(prog="mfc-equilibrium", description=__doc__.splitlines()[0])
    sub = ap.add_subparsers(dest="command", required=True)

    def common(p, model=True):
        if model:
            p.add_argument("--model", required=True, help="model JSON file or bundled name (ex1, ex2, nonlq)")
        p.add_argument("--method", choices=("partition", "fixed-point"), default="fixed-point")
        p.add_argument("--grid", type=int, default=200)
        p.add_argument("--substeps", type=int, default=4)
        p.add_argument("--out", default=".")
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--threads", type=int, default=os.cpu_count() or 1)

    def sim(p):
        p.add_argument("--particles", type=int, default=2000)
        p.add_argument("--paths", type=int, default=32)
        p.add_argument("--dt", type=float, default=None)
        p.add_argument("--t0", type=float, default=0.0)
        p.add_argument("--init", default=None, help="initial law as JSON text or file")

    common(sub.add_parser("solve", help="solve the Riccati system"))
    common(sub.add_parser("residuals", help="residuals of the solved system on the node triangle"))
    p = sub.add_parser("simulate", help="particle simulation under the equilibrium strategy")
    common(p)
    sim(p)
    p.add_argument("--keep-every", type=int, default=0)
    p = sub.add_parser("verify", help="equilibrium certificate and spike tests")
    common(p)
    sim(p)
    p.add_argument("--eps", type=_eps, default=None)
    p.add_argument("--perturbations", type=int, default=2)
    p.add_argument("--tol", type=float, default=1e-8)
    p.add_argument("--probe", choices=("equilibrium", "all"), default="equilibrium",
                   help="spike-test only the equilibrium map, or also each random perturbation")
    p = sub.add_parser("example", help="closed-form oracles of the bundled problems")
    p.add_argument("name", choices=("mean-variance", "systemic-risk", "nonlq"))
    p.add_argument("--params", default=None)
    common(p, model=False)
    return ap


def config_from_args(ns):
    kw = {k.replace("-", "_"): v for k, v in vars(ns).items()}
    return RunConfig(**{k: v for k, v in kw.items() if k in RunConfig.__dataclass_fields__})


def _error_doc(exc, code):
    doc = {"error": type(exc).__name__, "message": str(exc), "exit_code": code}
    if isinstance(exc, ConditionsViolated) and exc.report is not None:
        doc["report"] = exc.report.to_dict()
    if isinstance(exc, IllConditioned):
        doc.update({"t": exc.t, "block": exc.block, "min_eig": exc.min_eig})
    if isinstance(exc, NotConverged):
        doc.update({"window": exc.window, "stage": exc.stage, "change": exc.change})
    if isinstance(exc, SimulationDiverged):
        doc["step"] = exc.step
    return doc


def run(cfg):
    """Execute one configured command and return the exit code."""
    try:
        os.remove(os.path.join(cfg.out, "error.json"))
    except OSError:
        pass
    try:
        cfg.validate()
        return COMMANDS[cfg.command](cfg)
    except GateFailed as exc:
        code, err = 1, exc
    except ModelError as exc:
        code, err = 2, exc
    except (ConditionsViolated, IllConditioned, NotConverged, SimulationDiverged, DomainViolation) as exc:
        code, err = 3, exc
    try:
        os.makedirs(cfg.out, exist_ok=True)
        _write_json(os.path.join(cfg.out, "error.json"), _error_doc(err, code))
    except OSError:
        pass
    print(f"{type(err).__name__}: {err}", file=sys.stderr)
    return code


def main(argv=None):
    ns = build_parser().parse_args(argv)
    return run(config_from_args(ns))


if __name__ == "__main__":
    sys.exit(main())
