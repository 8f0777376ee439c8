"""One test per acceptance criterion; each prints a single PASS/FAIL line.

All solver runs use the default instance (n = 50, tau = 0.1, seed 0), the
TV-matrix lifting, x0 = 0 (so the lifted start is (0, S 0) = 0), t_bar = 1
and gamma = 0.5.
"""

import math
import time

import numpy as np
import pytest

from irebilevel.bounds import check_rate_bounds
from irebilevel.cli import fit_slope, main
from irebilevel.prox_core import (
    check_descent_lemma,
    check_gradient,
    check_nonexpansive,
    check_second_prox,
    prox_box,
    prox_l1,
    sum_bound_check,
)
from irebilevel.solvers import SolverConfig, StepRule, fista_bounds_check, solve

from conftest import ACCEPTANCE_LINES
from oracles import grid_argmin

RULES = ("constant", "backtracking")
K = 10_000


def verdict(n, ok, detail):
    line = f"criterion {n}: {'PASS' if ok else 'FAIL'} ({detail})"
    print(line)
    ACCEPTANCE_LINES.append(line)
    return ok


def r0_scale(tr):
    return 1.0 + float(np.sum((tr.x0 - tr.reference.x_star) ** 2))


# 1 ---------------------------------------------------------------------------

def test_criterion_01_oracle_suite(instance):
    start = time.perf_counter()
    tol = 1e-6
    probes = 1000
    base = instance.problem
    lp = instance.lifted(1.0)
    lifted = lp.lifted
    results = []
    smooth = [("base inner", base.inner.smooth, base.dim, base.sampler),
              ("lifted inner", lifted.inner.smooth, lifted.dim, lifted.sampler),
              ("lifted outer", lifted.outer.smooth, lifted.dim, lifted.sampler)]
    for name, F, dim, sampler in smooth:
        results.append((name, check_gradient(F, dim, probes=probes, rtol=tol,
                                             sampler=sampler, rng=1)))
        results.append((name, check_descent_lemma(F, dim, probes=probes, atol=tol,
                                                  sampler=sampler, rng=2)))
    proxes = [("box", base.inner.nonsmooth, base.dim, base.sampler),
              ("l1", lp.range_outer.nonsmooth, lp.q, None),
              ("lifted g2", lifted.inner.nonsmooth, lifted.dim, lifted.sampler),
              ("lifted g1", lifted.outer.nonsmooth, lifted.dim, lifted.sampler)]
    for name, G, dim, sampler in proxes:
        results.append((name, check_second_prox(G, dim, probes=probes, atol=tol,
                                                sampler=sampler, rng=3)))
        results.append((name, check_nonexpansive(G, dim, probes=probes,
                                                 sampler=sampler, rng=4)))
    elapsed = time.perf_counter() - start
    failed = [f"{n}/{r.name}" for n, r in results if not r.passed]
    worst = min(r.worst_margin for _, r in results)
    ok = not failed and elapsed < 10.0
    verdict(1, ok, f"{len(results)} checks x {probes} probes, worst margin {worst:.3g}, "
                   f"{elapsed:.1f} s, failed: {failed or 'none'}")
    assert not failed
    assert elapsed < 10.0


# 2 ---------------------------------------------------------------------------

def test_criterion_02_fista_sequence():
    res = fista_bounds_check(10 ** 6)
    verdict(2, res["passed"], f"k <= 1e6, min lower margin {res['min_lower_margin']:.3g}, "
                              f"min upper margin {res['min_upper_margin']:.3g}")
    assert res["passed"]


# 3 ---------------------------------------------------------------------------

def test_criterion_03_summation_bounds():
    betas = np.arange(0, 17) * 0.25
    Ks = (1, 10, 100, 1000, 100_000)
    failures = []
    worst = math.inf
    for beta in betas:
        for Kk in Ks:
            rep = sum_bound_check(float(beta), Kk, rtol=1e-12)
            worst = min(worst, min(c["margin"] for c in rep["checks"]))
            if not rep["passed"]:
                failures.append((float(beta), Kk))
    verdict(3, not failures, f"{len(betas) * len(Ks)} (beta, K) pairs, worst margin "
                             f"{worst:.3g}, failures: {failures or 'none'}")
    assert not failures


# 4 ---------------------------------------------------------------------------

def test_criterion_04_prox_limit():
    sigmas = [10.0 ** -j for j in range(7)]
    xs = np.linspace(-3, 3, 61)
    limit = np.clip(xs, -1, 1)
    dists = []
    for s in sigmas:
        joint = np.array([grid_argmin(lambda u, x=x: s * np.abs(u) + 0.5 * (u - x) ** 2,
                                      -1.0, 1.0, 1e-5) for x in xs])
        # the separable closed form agrees with the grid oracle
        assert np.max(np.abs(joint - prox_box(prox_l1(xs, s), -1, 1))) <= 1e-5
        dists.append(np.abs(joint - limit))
    dists = np.array(dists)
    monotone = bool(np.all(np.diff(dists, axis=0) <= 0))
    final = float(np.max(dists[-1]))
    ok = monotone and final < 1e-4
    verdict(4, ok, f"sigma 1..1e-6 on {xs.size} points, monotone={monotone}, "
                   f"final distance {final:.2g}")
    assert monotone and final < 1e-4


# 5 ---------------------------------------------------------------------------

@pytest.fixture(scope="module")
def pg_cells(runs):
    cells = {}
    for beta in (0.3, 0.5, 0.7):
        for rule in RULES:
            start = time.perf_counter()
            tr = runs.trace("ire-pg", beta, rule, K=K, mode="verify")
            cells[(beta, rule)] = (tr, time.perf_counter() - start)
    return cells


def test_criterion_05_pg_invariants(pg_cells):
    bad = []
    worst = math.inf
    slowest = 0.0
    for (beta, rule), (tr, secs) in pg_cells.items():
        allowed = 1e-7 * r0_scale(tr)
        slowest = max(slowest, secs)
        for name in ("distance_recursion", "composite_monotonicity"):
            inv = tr.invariants[name]
            worst = min(worst, inv["worst_slack"] / allowed)
            if not inv["passed"] or inv["worst_slack"] < -allowed or inv["checked"] != K:
                bad.append((beta, rule, name))
        if secs >= 120:
            bad.append((beta, rule, "runtime"))
    verdict(5, not bad, f"6 cells x {K} iterations, worst slack {worst:.3g} x allowance, "
                        f"slowest cell {slowest:.1f} s, failures: {bad or 'none'}")
    assert not bad


# 6 ---------------------------------------------------------------------------

def test_criterion_06_pg_ergodic_bounds(pg_cells, reference):
    bad = []
    worst = math.inf
    evaluated = 0
    for (beta, rule), (tr, _) in pg_cells.items():
        rep = check_rate_bounds(tr)
        for tag in ("pg-ergodic-outer", "pg-ergodic-inner"):
            s = rep["summary"][tag]
            evaluated += s["evaluated"]
            worst = min(worst, s["worst_margin"])
            if not s["passed"]:
                bad.append((beta, rule, tag, s["worst_K"]))
    ok = not bad and reference.tolerance <= 1e-8
    verdict(6, ok, f"{evaluated} logged bound evaluations, worst margin {worst:.3g}, "
                   f"reference tolerance {reference.tolerance:.2g}, failures: {bad or 'none'}")
    assert not bad
    assert reference.tolerance <= 1e-8


# 7 ---------------------------------------------------------------------------

def test_criterion_07_best_iterate(runs, instance, reference):
    beta = 2 / 3
    windows = (100, 1000, 5000)
    problems = []
    slopes = {}
    for rule in RULES:
        tr = runs.trace("ire-pg", beta, rule, K=K, mode="fast", windows=windows)
        rep = check_rate_bounds(tr)
        best = [e for e in rep["entries"]
                if e["check"].startswith("pg-best") and e["K"] in windows]
        if len(best) != 2 * len(windows):
            problems.append((rule, "missing windows"))
        problems += [(rule, e["check"], e["K"]) for e in best if not e["passed"]]
        # translated guarantee on the x-block of the lifted best iterates
        ks, inner, outer = [], [], []
        for W, w in tr.windows.items():
            if 100 <= W <= 5000:
                x = w.x[:instance.spec.n]
                ks.append(W)
                inner.append(instance.problem.phi(x) - reference.phi_star)
                outer.append(instance.problem.omega(x) - reference.omega_star)
        so = fit_slope(ks, outer)["slope"]
        si = fit_slope(ks, inner)["slope"]
        slopes[rule] = (so, si)
        if so > -(1 - beta) + 0.15:
            problems.append((rule, "outer slope", so))
        if si > -beta + 0.15:
            problems.append((rule, "inner slope", si))
    detail = ", ".join(f"{r}: outer {o:.3f} inner {i:.3f}" for r, (o, i) in slopes.items())
    verdict(7, not problems, f"bounds at K in {windows}; slopes {detail} "
                             f"(need <= {-(1 - beta) + 0.15:.3f} / {-beta + 0.15:.3f}); "
                             f"failures: {problems or 'none'}")
    assert not problems


# 8 ---------------------------------------------------------------------------

def test_criterion_08_apg(runs):
    bad = []
    worst = math.inf
    for beta in (0.5, 1.0, 1.5, 2.0):
        for rule in RULES:
            tr = runs.trace("ire-apg", beta, rule, K=K, mode="verify")
            rep = check_rate_bounds(tr)
            for tag in ("apg-last-inner", "apg-ergodic-outer", "apg-ergodic-inner"):
                s = rep["summary"][tag]
                worst = min(worst, s["worst_margin"])
                if not s["passed"]:
                    bad.append((beta, rule, tag, s["worst_K"]))
            if rule == "constant":
                inv = tr.invariants["accumulated_recursion"]
                if not inv["passed"] or inv["checked"] != K:
                    bad.append((beta, rule, "accumulated_recursion",
                                inv["first_violation"]))
    verdict(8, not bad, f"8 cells x {K} iterations, worst bound margin {worst:.3g}, "
                        f"failures: {bad or 'none'}")
    assert not bad


# 9 ---------------------------------------------------------------------------

def _tail_factor(beta, K):
    """Coefficient of the outer-value spread in the ergodic inner bound."""
    if beta < 0.5:
        return 1 / (K ** beta * (1 - 2 * beta))
    if beta == 0.5:
        return (1 + math.log(K)) / math.sqrt(K)
    return 2 * beta / (K ** (1 - beta) * (2 * beta - 1))


def _strictly(values, increasing):
    d = np.diff(values)
    return bool(np.all(d > 0) if increasing else np.all(d < 0))


def test_criterion_09_tradeoff(runs):
    grid = [0.3, 0.4, 0.5, 0.6, 0.7]
    tails = [_tail_factor(b, K) for b in grid]
    # leading run of the grid on which the inner bound improves with beta
    regime = grid[:1]
    for b, prev, cur in zip(grid[1:], tails, tails[1:]):
        if cur >= prev:
            break
        regime.append(b)
    details, bad = [], []
    for rule in RULES:
        outer = [runs.trace("ire-pg", b, rule, K=K, mode="fast").final.erg_omega_gap
                 for b in regime]
        inner = [runs.trace("ire-pg", b, rule, K=K, mode="fast").final.erg_phi_gap
                 for b in regime]
        ordered = _strictly(outer, True) and _strictly(inner, False)
        best = [runs.trace("ire-pg", b, rule, K=K, mode="fast", windows=(5000,))
                .windows[5000].phi_gap for b in grid]
        best_ok = _strictly(best, False)
        details.append(f"{rule}: ergodic outer {np.round(outer, 4).tolist()} inner "
                       f"{np.round(inner, 4).tolist()} over beta {regime}, "
                       f"best-iterate inner {np.format_float_scientific(best[0], 2)}.."
                       f"{np.format_float_scientific(best[-1], 2)}")
        if not ordered:
            bad.append(f"{rule} ergodic ordering")
        if not best_ok:
            bad.append(f"{rule} best-iterate ordering")
    verdict(9, not bad, "; ".join(details) + f"; failures: {bad or 'none'}")
    assert not bad


# 10 --------------------------------------------------------------------------

def test_criterion_10_rho_sweep(runs):
    rhos = (0.1, 1.0, 10.0)
    bad, details = [], []
    for rule in RULES:
        seqs = {
            "ergodic ire-pg": [runs.trace("ire-pg", 0.5, rule, rho, K, "fast")
                               .final.erg_coupling_norm for rho in rhos],
            "best ire-pg": [runs.trace("ire-pg", 2 / 3, rule, rho, K, "fast", (5000,))
                            .windows[5000].coupling_norm for rho in rhos],
            "ergodic ire-apg": [runs.trace("ire-apg", 1.0, rule, rho, K, "fast")
                                .final.erg_coupling_norm for rho in rhos],
        }
        for name, vals in seqs.items():
            details.append(f"{rule} {name} {[f'{v:.3g}' for v in vals]}")
            if not _strictly(vals, False):
                bad.append(f"{rule} {name}")
    verdict(10, not bad, "; ".join(details) + f"; failures: {bad or 'none'}")
    assert not bad


# 11 --------------------------------------------------------------------------

def straight_line_ire_pg(A, y, tau, S, rho, beta, iters):
    """IRE-PG on the lifted signal problem written out without the library."""
    n = A.shape[1]
    L = np.linalg.norm(A, 2) ** 2 + rho * (np.linalg.norm(S, 2) ** 2 + 1)
    x = np.zeros(n)
    p = S @ x
    out = []
    for k in range(1, iters + 1):
        sigma = float(k) ** (-beta)
        t = 1.0 / L
        r = A @ x - y
        nr = np.linalg.norm(r)
        ball_resid = r - (tau / nr) * r if nr > tau else np.zeros_like(r)
        c = S @ x - p
        gx = A.T @ ball_resid + rho * (S.T @ c)
        gp = -rho * c
        x_new = np.minimum(np.maximum(x - t * gx, -1.0), 1.0)
        v = p - t * gp
        p_new = np.sign(v) * np.maximum(np.abs(v) - t * sigma, 0.0)
        x, p = x_new, p_new
        out.append(np.concatenate([x, p]))
    return out


def test_criterion_11_determinism(tmp_path, instance, runs):
    import json
    cfg = {"algorithms": ["ire-pg", "ire-apg"], "betas": [0.5, 1.5],
           "step_rules": ["constant", "backtracking"], "iterations": 2000}
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps(cfg))
    codes = [main(["run", "--config", str(path), "--out", str(tmp_path / d)])
             for d in ("a", "b")]
    csvs = sorted(p.relative_to(tmp_path / "a") for p in (tmp_path / "a").rglob("trace.csv"))
    identical = all((tmp_path / "a" / c).read_bytes() == (tmp_path / "b" / c).read_bytes()
                    for c in csvs)
    lp, _ = runs.lifted(1.0)
    iters = 100
    cfgs = SolverConfig("ire-pg", 0.5, StepRule("constant"), iters,
                        log_at=tuple(range(1, iters + 1)))
    tr = solve(lp.lifted, cfgs, lp.embed(np.zeros(instance.spec.n)))
    plain = straight_line_ire_pg(instance.A, instance.y, instance.spec.tau, instance.S,
                                 1.0, 0.5, iters)
    diff = max(float(np.max(np.abs(r.x - w))) for r, w in zip(tr.records, plain))
    ok = identical and len(csvs) == 6 and diff <= 1e-12 and codes == [0, 0]
    verdict(11, ok, f"{len(csvs)} CSVs byte-identical={identical}, straight-line "
                    f"max iterate difference {diff:.2g} over {iters} iterations")
    assert identical and len(csvs) == 6
    assert codes == [0, 0]
    assert diff <= 1e-12
