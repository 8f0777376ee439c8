"""Command-line harness: sweeps, trace CSVs, plots and verification reports.

Usage::

    irebilevel run    --config cfg.json [--jobs N] [--mode fast|verify] [--out DIR]
    irebilevel check  --config cfg.json
    irebilevel oracle --config cfg.json [--out DIR]

Exit codes: 0 all checks pass, 1 a check failed, 2 usage error, 3 numeric
failure.
"""

from __future__ import annotations

import argparse
import itertools
import json
import logging
import math
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .bounds import check_rate_bounds
from .errors import ConfigurationError, EstimationError, IreError, NumericalError
from .experiments import InstanceSpec, gen_instance, instance_hash, reference_solve
from .model import ReferenceSolution, validate
from .solvers import ALGORITHMS, SolverConfig, SolverTrace, StepRule, solve
from .surrogate import translate_rates

log = logging.getLogger("irebilevel")

EXIT_OK, EXIT_CHECK, EXIT_USAGE, EXIT_NUMERIC = 0, 1, 2, 3
OUT_ENV = "IREBILEVEL_OUT"
DEFAULT_OUT = "irebilevel-out"
CSV_HEADER = ("k,sigma,t,phi_gap,omega_gap,erg_phi_gap,erg_omega_gap,"
              "coupling_norm,kstar_criterion")

__all__ = [
    "RunConfig",
    "load_config",
    "parse_config",
    "fit_slope",
    "slope_estimate",
    "trace_csv_text",
    "run_cell",
    "run",
    "main",
]


class UsageError(ConfigurationError):
    """Malformed configuration or command line."""


@dataclass(frozen=True)
class RunConfig:
    n: int = 50
    tau: float = 0.1
    seed: int = 0
    rhos: tuple = (1.0,)
    algorithms: tuple = ("ire-pg",)
    betas: tuple = (0.5,)
    step_rules: tuple = ("constant",)
    gamma: float = 0.5
    t_bar: float = 1.0
    iterations: int = 10_000
    mode: str = "fast"
    kstar_windows: tuple = ()
    log_at: tuple = ()
    validate_probes: int = 200
    out: str = ""

    def spec(self, rho=None) -> InstanceSpec:
        return InstanceSpec(n=self.n, tau=self.tau, seed=self.seed,
                            rho=self.rhos[0] if rho is None else rho)

    def cells(self):
        """Valid (algorithm, beta, rho, step rule) combinations, and skipped ones."""
        valid, skipped = [], []
        for alg, beta, rho, rule in itertools.product(
                self.algorithms, self.betas, self.rhos, self.step_rules):
            ok = 0 < beta < 1 if alg == "ire-pg" else 0 < beta <= 2
            (valid if ok else skipped).append((alg, beta, rho, rule))
        return valid, skipped


_SWEEPS = {"rhos": "rho", "algorithms": "algorithm", "betas": "beta",
           "step_rules": "step_rule"}
_SCALARS = {"n": int, "tau": float, "seed": int, "gamma": float, "t_bar": float,
            "iterations": int, "mode": str, "validate_probes": int, "out": str}
_LISTS = {"kstar_windows": int, "log_at": int}


def _number(key, value, kind):
    if kind is str:
        if not isinstance(value, str):
            raise UsageError(f"field {key!r}: expected a string")
        return value
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise UsageError(f"field {key!r}: expected a number, got {value!r}")
    if kind is int:
        if float(value) != int(value):
            raise UsageError(f"field {key!r}: expected an integer, got {value!r}")
        return int(value)
    return float(value)


def parse_config(data) -> RunConfig:
    """Build a :class:`RunConfig` from a decoded JSON object.

    Sweep fields accept either the plural list form (``"betas": [...]``) or
    a single value under the singular name (``"beta": 0.5``).
    """
    if not isinstance(data, dict):
        raise UsageError("config must be a JSON object")
    kw = {}
    for key, value in data.items():
        if key in _SWEEPS or key in _SWEEPS.values():
            plural = key if key in _SWEEPS else next(p for p, s in _SWEEPS.items() if s == key)
            if plural in kw:
                raise UsageError(f"field {key!r}: both singular and plural forms given")
            values = value if key in _SWEEPS else [value]
            if not isinstance(values, list):
                raise UsageError(f"field {key!r}: expected a list")
            if not values:
                raise UsageError(f"field {key!r}: sweep list is empty")
            kind = str if plural in ("algorithms", "step_rules") else float
            kw[plural] = tuple(_number(key, v, kind) for v in values)
        elif key in _SCALARS:
            kw[key] = _number(key, value, _SCALARS[key])
        elif key in _LISTS:
            if not isinstance(value, list):
                raise UsageError(f"field {key!r}: expected a list")
            kw[key] = tuple(_number(key, v, int) for v in value)
        else:
            raise UsageError(f"unknown field {key!r}")
    cfg = RunConfig(**kw)
    for a in cfg.algorithms:
        if a not in ALGORITHMS:
            raise UsageError(f"field 'algorithms': unknown algorithm {a!r}")
    for r in cfg.step_rules:
        if r not in ("constant", "backtracking"):
            raise UsageError(f"field 'step_rules': unknown step rule {r!r}")
    if cfg.iterations < 2:
        raise UsageError("field 'iterations': budget must be >= 2")
    if cfg.mode not in ("fast", "verify"):
        raise UsageError("field 'mode': expected 'fast' or 'verify'")
    if cfg.validate_probes < 1:
        raise UsageError("field 'validate_probes': must be >= 1")
    try:
        cfg.spec()
        StepRule("backtracking", cfg.gamma, cfg.t_bar)
        for rho in cfg.rhos:
            cfg.spec(rho)
    except ConfigurationError as exc:
        raise UsageError(str(exc)) from None
    if not cfg.cells()[0]:
        raise UsageError("no valid (algorithm, beta) combination in the sweep")
    return cfg


def load_config(path) -> RunConfig:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise UsageError(f"cannot read config {path}: {exc}") from None
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise UsageError(f"{path}: line {exc.lineno}, column {exc.colno}: {exc.msg}") from None
    return parse_config(data)


# ---------------------------------------------------------------------------
# slopes and CSV
# ---------------------------------------------------------------------------

def fit_slope(ks, gaps, min_points: int = 5) -> dict:
    """Least-squares slope of ``log(gap)`` against ``log(k)``.

    Points with non-finite or nonpositive gaps are dropped and counted in
    ``dropped``.
    """
    ks = np.asarray(ks, dtype=float)
    gaps = np.asarray(gaps, dtype=float)
    keep = np.isfinite(gaps) & (gaps > 0) & (ks > 0)
    if keep.sum() < min_points:
        raise EstimationError(
            f"need {min_points} points with positive finite gaps, got {int(keep.sum())}")
    slope, _ = np.polyfit(np.log(ks[keep]), np.log(gaps[keep]), 1)
    return {"slope": float(slope), "points": int(keep.sum()),
            "dropped": int((~keep).sum())}


def slope_estimate(trace: SolverTrace, gap: str = "outer", k_range=None,
                   sequence: str = "ergodic") -> dict:
    """Log-log slope of the logged ``inner``/``outer`` gaps of a sequence.

    ``sequence`` is ``raw``, ``ergodic`` or ``best`` (best-iterate windows,
    indexed by window size).
    """
    if gap not in ("inner", "outer"):
        raise ConfigurationError(f"gap must be 'inner' or 'outer', got {gap!r}")
    if sequence == "best":
        pts = [(W, w.phi_gap if gap == "inner" else w.omega_gap)
               for W, w in trace.windows.items()]
    elif sequence in ("raw", "ergodic"):
        attr = {("raw", "inner"): "phi_gap", ("raw", "outer"): "omega_gap",
                ("ergodic", "inner"): "erg_phi_gap",
                ("ergodic", "outer"): "erg_omega_gap"}[(sequence, gap)]
        pts = [(r.k, getattr(r, attr)) for r in trace.records]
    else:
        raise ConfigurationError(f"unknown sequence {sequence!r}")
    if k_range is not None:
        lo, hi = k_range
        pts = [p for p in pts if lo <= p[0] <= hi]
    return fit_slope([p[0] for p in pts], [p[1] for p in pts])


def _fmt(v) -> str:
    return repr(float(v))


def trace_csv_text(trace: SolverTrace) -> str:
    lines = [CSV_HEADER]
    for r in trace.records:
        lines.append(",".join([str(r.k)] + [_fmt(v) for v in (
            r.sigma, r.t, r.phi_gap, r.omega_gap, r.erg_phi_gap, r.erg_omega_gap,
            r.coupling_norm, r.kstar_criterion)]))
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# per-cell pipeline
# ---------------------------------------------------------------------------

def cell_name(alg, beta, rho, rule) -> str:
    return f"{alg}_beta{beta:g}_rho{rho:g}_{rule}"


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, (np.bool_, bool)):
        return bool(obj)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        v = float(obj)
        return v if math.isfinite(v) else repr(v)
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    return obj


def run_cell(job: dict) -> dict:
    """Run one sweep cell; ``job`` is a plain dict so it can cross processes.

    Keys: ``spec`` (InstanceSpec), ``ref`` (ReferenceSolution for the base
    problem), ``cell`` (algorithm, beta, rho, rule), ``gamma``, ``t_bar``,
    ``iterations``, ``mode``, ``kstar_windows``, ``log_at``,
    ``validate_probes`` and ``out`` (directory, or ``None`` for no files).
    """
    alg, beta, rho, rule = job["cell"]
    name = cell_name(alg, beta, rho, rule)
    spec, ref, mode = job["spec"], job["ref"], job["mode"]
    inst = gen_instance(InstanceSpec(n=spec.n, tau=spec.tau, seed=spec.seed, rho=rho))
    lp = inst.lifted(rho)
    lref = lp.lift_reference(ref)
    w0 = lp.embed(np.zeros(spec.n))
    bound_severity = "warning" if ref.low_confidence else "hard"
    checks = []

    def add(module, tag, passed, margin, severity="hard", **extra):
        checks.append({"module": module, "tag": tag, "cell": name, "passed": bool(passed),
                       "margin": margin, "severity": severity, **extra})

    if mode == "verify":
        rep = validate(lp.lifted, probes=job["validate_probes"], seed=spec.seed)
        for c in rep["checks"]:
            module = "bilevel_model" if c["name"] == "joint_prox_sigma0" else "prox_core"
            add(module, f"{c['name']}:{c['level']}", c["passed"], c["worst_margin"])
    cfg = SolverConfig(algorithm=alg, beta=beta,
                       step_rule=StepRule(rule, job["gamma"], job["t_bar"]),
                       iterations=job["iterations"], mode=mode, rho=rho,
                       log_at=tuple(job["log_at"]),
                       kstar_windows=tuple(job["kstar_windows"]))
    status, message = "ok", ""
    try:
        trace = solve(lp.lifted, cfg, w0, lref)
    except NumericalError as exc:
        trace, status, message = exc.trace, "numeric_failure", str(exc)
        add("solvers", "numeric", False, -math.inf, message=message)

    for tag, inv in trace.invariants.items():
        add("solvers", tag, inv["passed"], inv["worst_margin"],
            first_violation=inv["first_violation"])
    bounds = {"summary": {}, "entries": []}
    translation = None
    slopes = {}
    if status == "ok":
        bounds = check_rate_bounds(trace, lref, cfg)
        for tag, s in bounds["summary"].items():
            add("solvers", tag, s["passed"], s["worst_margin"], bound_severity,
                worst_K=s["worst_K"])
        translation = translate_rates(trace, lref, rho, "outer", lp)
        for tag, ok in translation["checks"].items():
            add("surrogate", f"translation:{tag}", ok,
                translation["worst_margins"].get(tag, 0.0 if ok else -1.0))
        add("surrogate", "translation:outer-estimate", translation["translated_consistent"],
            0.0, "soft", lipschitz_estimate=translation["lipschitz_estimate"])
        K = cfg.iterations
        for seq in ("raw", "ergodic"):
            for gap in ("inner", "outer"):
                try:
                    slopes[f"{seq}_{gap}"] = slope_estimate(
                        trace, gap, (min(100, max(1, K // 10)), K), seq)
                except EstimationError as exc:
                    slopes[f"{seq}_{gap}"] = {"slope": None, "note": str(exc)}

    final = trace.records[-1] if trace.records else None
    last_window = trace.windows[max(trace.windows)] if trace.windows else None
    summary = {
        "cell": name, "algorithm": alg, "beta": beta, "rho": rho, "step_rule": rule,
        "status": status,
        "passed": status == "ok" and all(c["passed"] for c in checks
                                         if c["severity"] == "hard"),
        "final_k": final.k if final else 0,
        "final": None if final is None else {
            "phi_gap": final.phi_gap, "omega_gap": final.omega_gap,
            "erg_phi_gap": final.erg_phi_gap, "erg_omega_gap": final.erg_omega_gap,
            "coupling_norm": final.coupling_norm,
            "erg_coupling_norm": final.erg_coupling_norm},
        "best": None if last_window is None else {
            "K": last_window.K, "kstar": last_window.kstar,
            "phi_gap": last_window.phi_gap, "omega_gap": last_window.omega_gap,
            "coupling_norm": last_window.coupling_norm},
        "slopes": slopes,
    }
    out = job.get("out")
    if out is not None:
        d = Path(out) / name
        d.mkdir(parents=True, exist_ok=True)
        (d / "trace.csv").write_text(trace_csv_text(trace))
        from .plotting import plot_trace
        if trace.records:
            plot_trace(trace, d / "plot.svg", title=name)
        report = {
            "cell": name,
            "config": {**asdict(cfg), "step_rule": asdict(cfg.step_rule)},
            "instance": asdict(spec) | {"rho": rho, "hash": instance_hash(inst)},
            "reference": ref.as_dict(),
            "status": status, "message": message,
            "passed": summary["passed"],
            "checks": checks,
            "bound_entries": bounds["entries"],
            "translation": None if translation is None else {
                k: v for k, v in translation.items() if k != "rows"},
            "slopes": slopes,
            "d_hat": trace.d_hat,
            "untestable": ["bounded outer solution set is assumed, not verified"],
        }
        (d / "report.json").write_text(json.dumps(_jsonable(report), indent=1) + "\n")
    summary["checks"] = checks
    return summary


# ---------------------------------------------------------------------------
# reference cache and orchestration
# ---------------------------------------------------------------------------

def _ref_to_json(ref: ReferenceSolution) -> dict:
    return {"x_star": [float(v) for v in ref.x_star], **_jsonable(ref.as_dict()),
            "details": _jsonable(ref.details)}


def _ref_from_json(d: dict) -> ReferenceSolution:
    return ReferenceSolution(x_star=np.array(d["x_star"]), phi_star=d["phi_star"],
                             omega_star=d["omega_star"], omega_low=d["omega_low"],
                             method=d["method"], tolerance=d["tolerance"],
                             low_confidence=d["low_confidence"], details=d["details"])


def get_reference(cfg: RunConfig, cache_dir=None) -> tuple:
    """Reference for the configured instance, cached by instance hash."""
    inst = gen_instance(cfg.spec())
    key = instance_hash(inst)
    path = None if cache_dir is None else Path(cache_dir) / f"{key}.json"
    if path is not None and path.exists():
        return _ref_from_json(json.loads(path.read_text())), key, True
    ref = reference_solve(inst.problem, inst)
    if path is not None:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(_ref_to_json(ref), indent=1) + "\n")
    return ref, key, False


def _out_dir(args_out, cfg: RunConfig) -> Path:
    return Path(args_out or cfg.out or os.environ.get(OUT_ENV) or DEFAULT_OUT)


def run(cfg: RunConfig, out=None, jobs: int = 1, write: bool = True) -> tuple:
    """Run every sweep cell; returns ``(exit_code, summaries)``."""
    out_dir = _out_dir(out, cfg) if write else None
    ref, key, cached = get_reference(cfg, None if out_dir is None else out_dir / "oracle")
    log.info("reference %s: omega*=%.12g tol=%.3g%s", key, ref.omega_star, ref.tolerance,
             " (cached)" if cached else "")
    valid, skipped = cfg.cells()
    base = {"spec": cfg.spec(), "ref": ref, "gamma": cfg.gamma, "t_bar": cfg.t_bar,
            "iterations": cfg.iterations, "mode": cfg.mode,
            "kstar_windows": cfg.kstar_windows, "log_at": cfg.log_at,
            "validate_probes": cfg.validate_probes,
            "out": None if out_dir is None else str(out_dir)}
    job_list = [dict(base, cell=c) for c in valid]
    if jobs > 1 and len(job_list) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            summaries = list(pool.map(run_cell, job_list))
    else:
        summaries = [run_cell(j) for j in job_list]
    for s in summaries:
        log.info("%s: %s", s["cell"], "pass" if s["passed"] else s["status"] + "/FAIL")
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        slim = [{k: v for k, v in s.items() if k != "checks"} for s in summaries]
        doc = {"instance_hash": key, "reference": ref.as_dict(), "cells": slim,
               "skipped": [cell_name(*c) for c in skipped]}
        (out_dir / "summary.json").write_text(json.dumps(_jsonable(doc), indent=1) + "\n")
        _sweep_plots(summaries, out_dir)
    if any(s["status"] != "ok" for s in summaries):
        return EXIT_NUMERIC, summaries
    return (EXIT_OK if all(s["passed"] for s in summaries) else EXIT_CHECK), summaries


def _sweep_plots(summaries, out_dir: Path) -> None:
    from .plotting import plot_sweep
    ok = [s for s in summaries if s["final"] is not None]
    if len({s["beta"] for s in ok}) > 1:
        rows = [{"beta": s["beta"], "gap": abs(s["final"]["erg_phi_gap"]),
                 "group": f"{s['algorithm']} {s['step_rule']} rho={s['rho']:g}"} for s in ok]
        plot_sweep(rows, out_dir / "sweep_beta_inner.svg", "beta", "gap",
                   "terminal |ergodic inner gap|")
        rows = [dict(r, gap=abs(s["final"]["erg_omega_gap"])) for r, s in zip(rows, ok)]
        plot_sweep(rows, out_dir / "sweep_beta_outer.svg", "beta", "gap",
                   "terminal |ergodic outer gap|")
    if len({s["rho"] for s in ok}) > 1:
        rows = [{"rho": s["rho"], "coupling": s["final"]["erg_coupling_norm"],
                 "group": f"{s['algorithm']} beta={s['beta']:g} {s['step_rule']}"}
                for s in ok]
        plot_sweep(rows, out_dir / "sweep_rho_coupling.svg", "rho", "coupling",
                   "terminal ergodic ||Sx - p||")


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------

def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="irebilevel", description=__doc__.split("\n")[0])
    sub = p.add_subparsers(dest="command", required=True)
    r = sub.add_parser("run", help="run a sweep and write artifacts")
    r.add_argument("--config", required=True)
    r.add_argument("--jobs", type=int, default=1)
    r.add_argument("--mode", choices=("fast", "verify"))
    r.add_argument("--out")
    c = sub.add_parser("check", help="verification only, no artifacts")
    c.add_argument("--config", required=True)
    o = sub.add_parser("oracle", help="reference solve only (cached)")
    o.add_argument("--config", required=True)
    o.add_argument("--out")
    for sp in (r, c, o):
        sp.add_argument("-v", "--verbose", action="store_true")
    return p


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        cfg = load_config(args.config)
        if args.command == "run":
            if args.jobs < 1:
                raise UsageError("--jobs must be >= 1")
            if args.mode:
                cfg = RunConfig(**{**asdict(cfg), "mode": args.mode})
            code, summaries = run(cfg, args.out, args.jobs)
        elif args.command == "check":
            cfg = RunConfig(**{**asdict(cfg), "mode": "verify"})
            code, summaries = run(cfg, write=False)
        else:
            out_dir = _out_dir(args.out, cfg) / "oracle"
            ref, key, cached = get_reference(cfg, out_dir)
            print(json.dumps({"instance_hash": key, "cached": cached,
                              "cache_file": str(out_dir / f"{key}.json"),
                              **_jsonable(ref.as_dict())}, indent=1))
            return EXIT_OK
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except ConfigurationError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except IreError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    for s in summaries:
        print(f"{s['cell']}: {'PASS' if s['passed'] else 'FAIL'} ({s['status']})")
        for c in s["checks"]:
            if not c["passed"] and c["severity"] == "hard":
                print(f"  failed {c['module']}/{c['tag']} margin={c['margin']}")
    return code


if __name__ == "__main__":
    sys.exit(main())
