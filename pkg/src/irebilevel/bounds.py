"""Explicit rate bounds and their evaluation against solver traces.

Each ``*_bound`` function evaluates a right-hand side from the problem
constants (``L1``, ``L2``), the step rule, the squared initial distance
``r0sq = ||x0 - x*||^2`` and ``delta = omega* - omega_low``.
:func:`check_rate_bounds` compares them with the gaps recorded in a trace.
"""

from __future__ import annotations

import math

from .errors import ConfigurationError
from .solvers import SolverConfig, SolverTrace, StepRule

__all__ = [
    "pg_ergodic_bounds",
    "pg_best_bounds",
    "apg_last_bound",
    "apg_ergodic_bounds",
    "check_rate_bounds",
]

REL_TOL = 1e-7


def pg_ergodic_bounds(K, beta, r0sq, delta, L1, L2, rule: StepRule):
    """``(outer, inner)`` bounds for the IRE-PG ergodic point at ``K``."""
    if not 0 < beta < 1:
        raise ConfigurationError("IRE-PG bounds need beta in (0, 1)")
    if rule.backtracking:
        g, tb = rule.gamma, rule.t_bar
        a1 = L1 / g + max(1 / tb, L2 / g)
        a2 = tb * L1 + max(1.0, tb * L2)
    else:
        a1, a2 = L1 + L2, 1.0
    outer = 0.5 * r0sq * a1 / K ** (1 - beta)
    if beta < 0.5:
        tail = a2 / (K ** beta * (1 - 2 * beta))
    elif beta == 0.5:
        tail = a2 * (1 + math.log(K)) / math.sqrt(K)
    else:
        tail = 2 * beta * a2 / (K ** (1 - beta) * (2 * beta - 1))
    return outer, outer + delta * tail


def pg_best_bounds(K, beta, d_sq, delta, L1, L2, rule: StepRule):
    """``(outer, inner)`` bounds for the best iterate of window ``{K+1..2K}``.

    ``d_sq`` bounds ``||x_k - x*||^2`` along the run.
    """
    if rule.backtracking:
        a = max(1 / rule.t_bar, (L1 + L2) / rule.gamma)
    else:
        a = L1 + L2
    return d_sq * a / K ** (1 - beta), d_sq * a / (2 * K) + delta / K ** beta


def apg_last_bound(K, beta, r0sq, delta, L1, L2, rule: StepRule):
    """Bound on the inner gap of the last accelerated iterate ``x_K``."""
    if not 0 < beta <= 2:
        raise ConfigurationError("IRE-APG bounds need beta in (0, 2]")
    if rule.backtracking:
        a1 = max((L1 + L2) / rule.gamma, 1 / rule.t_bar)
        a2 = a1 * rule.t_bar
    else:
        a1, a2 = L1 + L2, 2.0
    a3, a4 = (1 / (2 - beta), 0.0) if beta < 2 else (1.0, 1.0)
    return (2 * a1 * r0sq / (K + 1) ** 2
            + 4 * a2 * (a3 + a4 * math.log(K)) * delta / (K + 1) ** beta)


def apg_ergodic_bounds(K, beta, r0sq, delta, L1, L2, rule: StepRule):
    """``(outer, inner)`` bounds for the accelerated ergodic point."""
    if not 0 < beta <= 2:
        raise ConfigurationError("IRE-APG bounds need beta in (0, 2]")
    if rule.backtracking:
        tb = rule.t_bar
        b1 = max((L1 + L2) / rule.gamma, 1 / tb)
        c = b1 * b1 * tb
        b2 = 2 * c * (r0sq + 2 * tb * delta / (2 - beta)) if beta < 2 else math.nan
        b3 = 2 * c * (r0sq + 2 * tb * delta)
        b4 = 4 * c * c * delta
    else:
        b1 = L1 + L2
        b2 = 2 * b1 * r0sq + 8 * delta / (2 - beta) if beta < 2 else math.nan
        b3 = 2 * b1 * r0sq + 8 * delta
        b4 = 8 * delta
    if beta < 2:
        outer = 2 * b1 * r0sq / K ** (2 - beta)
    else:
        outer = b1 * r0sq / math.log(K + 1)
    if beta < 1:
        inner = 16 * b2 / ((1 - beta) * K ** beta)
    elif beta == 1:
        inner = 8 * b2 * (1 + math.log(K)) / K
    elif beta < 2:
        inner = 4 * (2 * beta - 1) * b2 / ((beta - 1) * K ** (2 - beta))
    else:
        inner = 2 * (4 * b3 + b4) / math.log(K + 1)
    return outer, inner


def _entry(check, K, gap, bound, slack):
    if math.isnan(gap):
        margin = -math.inf
    else:
        margin = bound + REL_TOL * abs(bound) + slack - gap
    return {"check": check, "K": int(K), "gap": gap, "bound": bound,
            "margin": margin, "passed": margin >= 0}


def check_rate_bounds(trace: SolverTrace, ref=None, cfg: SolverConfig = None) -> dict:
    """Compare every logged gap with its rate bound.

    A gap passes when it does not exceed the bound by more than ``1e-7``
    relative plus the certified reference tolerance (the gaps themselves
    are measured against the reference values).
    """
    ref = ref if ref is not None else trace.reference
    cfg = cfg if cfg is not None else trace.config
    if ref is None:
        raise ConfigurationError("rate bounds need a reference solution")
    rule, beta = cfg.step_rule, cfg.beta
    L1, L2 = trace.L1, trace.L2
    r0sq = float(((trace.x0 - ref.x_star) ** 2).sum())
    delta = ref.delta_omega
    slack = ref.tolerance if math.isfinite(ref.tolerance) else 0.0
    entries = []
    if cfg.algorithm == "ire-pg":
        for r in trace.records:
            bo, bi = pg_ergodic_bounds(r.k, beta, r0sq, delta, L1, L2, rule)
            entries.append(_entry("pg-ergodic-outer", r.k, r.erg_omega_gap, bo, slack))
            entries.append(_entry("pg-ergodic-inner", r.k, r.erg_phi_gap, bi, slack))
        for W, w in trace.windows.items():
            bo, bi = pg_best_bounds(W, beta, w.d_hat ** 2, delta, L1, L2, rule)
            entries.append(_entry("pg-best-outer", W, w.omega_gap, bo, slack))
            entries.append(_entry("pg-best-inner", W, w.phi_gap, bi, slack))
    else:
        for r in trace.records:
            entries.append(_entry("apg-last-inner", r.k, r.phi_gap,
                                  apg_last_bound(r.k, beta, r0sq, delta, L1, L2, rule),
                                  slack))
            bo, bi = apg_ergodic_bounds(r.k, beta, r0sq, delta, L1, L2, rule)
            entries.append(_entry("apg-ergodic-outer", r.k, r.erg_omega_gap, bo, slack))
            entries.append(_entry("apg-ergodic-inner", r.k, r.erg_phi_gap, bi, slack))

    summary = {}
    for e in entries:
        s = summary.setdefault(e["check"], {"passed": True, "worst_margin": math.inf,
                                            "worst_K": None, "evaluated": 0})
        s["evaluated"] += 1
        if e["margin"] < s["worst_margin"]:
            s["worst_margin"], s["worst_K"] = e["margin"], e["K"]
        s["passed"] = s["passed"] and e["passed"]
    return {
        "passed": all(e["passed"] for e in entries),
        "worst_margin": min((e["margin"] for e in entries), default=math.inf),
        "r0sq": r0sq,
        "delta_omega": delta,
        "summary": summary,
        "entries": entries,
    }
