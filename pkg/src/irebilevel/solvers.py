"""Iterative-regularization proximal gradient solvers.

``ire_pg`` takes one proximal-gradient step per iteration on
``phi + sigma_k * omega`` with ``sigma_k = k**(-beta)``; ``ire_apg`` is the
accelerated (FISTA-type) variant. Both record a geometric log of raw and
ergodic gaps, track best-iterate windows and, in ``verify`` mode, check the
per-iteration descent inequalities against a reference solution.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .errors import ConfigurationError, NumericalError, WindowError
from .model import BilevelProblem, ReferenceSolution, make_phi_k
from .prox_core import backtrack, pg_step

__all__ = [
    "StepRule",
    "SolverConfig",
    "FistaSequence",
    "TraceRecord",
    "WindowRecord",
    "SolverTrace",
    "ire_pg",
    "ire_apg",
    "solve",
    "ergodic_weights_apg",
    "best_iterate",
    "fista_bounds_check",
    "log_schedule",
]

ALGORITHMS = ("ire-pg", "ire-apg")


@dataclass(frozen=True)
class StepRule:
    """``constant`` (``t_k = 1/(L2 + sigma_k L1)``) or ``backtracking``."""

    kind: str = "constant"
    gamma: float = 0.5
    t_bar: float = 1.0

    def __post_init__(self):
        if self.kind not in ("constant", "backtracking"):
            raise ConfigurationError(f"unknown step rule {self.kind!r}")
        if not 0 < self.gamma < 1:
            raise ConfigurationError(f"gamma must lie in (0, 1), got {self.gamma}")
        if not self.t_bar > 0:
            raise ConfigurationError(f"t_bar must be > 0, got {self.t_bar}")

    @property
    def backtracking(self) -> bool:
        return self.kind == "backtracking"


@dataclass(frozen=True)
class SolverConfig:
    """Solver parameters.

    ``log_at`` adds iterations to the geometric log; ``kstar_windows`` adds
    window sizes ``K`` for best-iterate tracking over ``{K+1, ..., 2K}``
    (powers of two that fit the budget are always tracked).
    """

    algorithm: str = "ire-pg"
    beta: float = 0.5
    step_rule: StepRule = field(default_factory=StepRule)
    iterations: int = 1000
    mode: str = "fast"
    rho: float = 1.0
    log_at: tuple = ()
    kstar_windows: tuple = ()

    def __post_init__(self):
        if self.algorithm not in ALGORITHMS:
            raise ConfigurationError(f"unknown algorithm {self.algorithm!r}")
        if self.algorithm == "ire-pg" and not 0 < self.beta < 1:
            raise ConfigurationError(f"ire-pg needs beta in (0, 1), got {self.beta}")
        if self.algorithm == "ire-apg" and not 0 < self.beta <= 2:
            raise ConfigurationError(f"ire-apg needs beta in (0, 2], got {self.beta}")
        if self.iterations < 1:
            raise ConfigurationError("iterations must be >= 1")
        if self.mode not in ("fast", "verify"):
            raise ConfigurationError(f"mode must be 'fast' or 'verify', got {self.mode!r}")
        if not self.rho > 0:
            raise ConfigurationError(f"rho must be > 0, got {self.rho}")


class FistaSequence:
    """Momentum scalars ``s_0 = 1``, ``s_k = (1 + sqrt(1 + 4 s_{k-1}^2)) / 2``."""

    def __init__(self):
        self.k = 0
        self.s = 1.0

    def advance(self) -> float:
        self.s = (1.0 + math.sqrt(1.0 + 4.0 * self.s * self.s)) / 2.0
        self.k += 1
        return self.s

    @staticmethod
    def values(K: int) -> np.ndarray:
        """``s_0, ..., s_K``."""
        out = np.empty(K + 1)
        seq = FistaSequence()
        out[0] = seq.s
        for k in range(1, K + 1):
            out[k] = seq.advance()
        return out


def fista_bounds_check(K: int) -> dict:
    """Check ``(k+2)/2 <= s_k <= k+1`` for ``k = 0..K``."""
    s = FistaSequence.values(K)
    k = np.arange(K + 1, dtype=float)
    lower = s - (k + 2) / 2
    upper = (k + 1) - s
    return {"K": K, "passed": bool(lower.min() >= 0 and upper.min() >= 0),
            "min_lower_margin": float(lower.min()),
            "min_upper_margin": float(upper.min())}


def ergodic_weights_apg(sigma, s, K, t=None) -> np.ndarray:
    """Weights ``pi_1..pi_K`` of the accelerated ergodic point.

    Parameters
    ----------
    sigma : array
        ``sigma_1, ..., sigma_K`` (index 0 holds ``sigma_1``).
    s : array
        ``s_0, ..., s_{K-1}``.
    t : array, optional
        ``t_1, ..., t_K`` for the backtracking weights; ``None`` selects the
        constant-step weights.
    """
    if K < 1:
        raise ConfigurationError("K must be >= 1")
    sig = np.asarray(sigma, dtype=float)[:K]
    st = sig if t is None else sig * np.asarray(t, dtype=float)[:K]
    s2 = np.asarray(s, dtype=float)[:K] ** 2
    pi = np.empty(K)
    pi[:-1] = s2[:-1] * (st[:-1] - st[1:])
    pi[-1] = st[-1] * s2[-1]
    return pi


def log_schedule(K: int, extra=()) -> list:
    """Iterations ``1, 2, 4, ...`` up to ``K``, plus ``K`` and ``extra``."""
    ks = set()
    k = 1
    while k <= K:
        ks.add(k)
        k *= 2
    ks.add(K)
    ks.update(int(e) for e in extra if 1 <= int(e) <= K)
    return sorted(ks)


# ---------------------------------------------------------------------------
# trace containers
# ---------------------------------------------------------------------------

@dataclass
class TraceRecord:
    """Snapshot at a logged iteration."""

    k: int
    sigma: float
    t: float
    x: np.ndarray
    phi: float
    omega: float
    erg_x: np.ndarray
    erg_phi: float
    erg_omega: float
    phi_gap: float = math.nan
    omega_gap: float = math.nan
    erg_phi_gap: float = math.nan
    erg_omega_gap: float = math.nan
    coupling_norm: float = math.nan
    erg_coupling_norm: float = math.nan
    kstar_criterion: float = math.nan


@dataclass
class WindowRecord:
    """Best iterate over ``{K+1, ..., 2K}`` for one window size ``K``."""

    K: int
    kstar: int
    x: np.ndarray
    criterion: float
    phi_gap: float
    omega_gap: float
    coupling_norm: float
    d_hat: float


@dataclass
class SolverTrace:
    config: SolverConfig
    x0: np.ndarray
    records: list
    sigma: np.ndarray
    t: np.ndarray
    phi: np.ndarray
    omega: np.ndarray
    windows: dict
    invariants: dict
    reference: Optional[ReferenceSolution] = None
    s: Optional[np.ndarray] = None
    d_hat: float = math.nan
    L1: float = math.nan
    L2: float = math.nan
    status: str = "ok"
    message: str = ""

    @property
    def iterations(self) -> int:
        return len(self.sigma)

    @property
    def final(self) -> TraceRecord:
        return self.records[-1]

    def record_at(self, k: int) -> TraceRecord:
        for r in self.records:
            if r.k == k:
                return r
        raise KeyError(f"iteration {k} was not logged")

    def invariants_passed(self) -> bool:
        return all(v["passed"] for v in self.invariants.values())


# ---------------------------------------------------------------------------
# shared bookkeeping
# ---------------------------------------------------------------------------

class _Invariant:
    def __init__(self, name):
        self.name = name
        self.worst_margin = math.inf
        self.worst_slack = math.inf
        self.first_violation = None
        self.count = 0

    def update(self, k, slack, allowed):
        if not math.isfinite(slack):
            return
        self.count += 1
        margin = slack + allowed
        if slack < self.worst_slack:
            self.worst_slack = slack
        if margin < self.worst_margin:
            self.worst_margin = margin
        if margin < 0 and self.first_violation is None:
            self.first_violation = k

    def as_dict(self):
        return {"passed": self.first_violation is None,
                "worst_margin": self.worst_margin,
                "worst_slack": self.worst_slack,
                "first_violation": self.first_violation,
                "checked": self.count}


class _Recorder:
    def __init__(self, p: BilevelProblem, cfg: SolverConfig, x0, ref):
        K = cfg.iterations
        self.p, self.cfg, self.ref = p, cfg, ref
        self.x0 = np.array(x0, dtype=float)
        self.sigma = np.empty(K)
        self.t = np.empty(K)
        self.phi = np.empty(K)
        self.omega = np.empty(K)
        self.logged = set(log_schedule(K, cfg.log_at))
        self.records = []
        self.invariants = {}
        self.windows = {}
        self._open = {}
        if ref is not None:
            sizes = set(cfg.kstar_windows)
            w = 1
            while 2 * w <= K:
                sizes.add(w)
                w *= 2
            self._sizes = sorted(int(s) for s in sizes if 1 <= s and 2 * s <= K)
            self.d_hat = float(np.linalg.norm(self.x0 - ref.x_star))
        else:
            self._sizes = []
            self.d_hat = math.nan

    def invariant(self, name) -> _Invariant:
        inv = self.invariants.get(name)
        if inv is None:
            inv = self.invariants[name] = _Invariant(name)
        return inv

    def _coupling(self, x):
        return self.p.coupling(x) if self.p.coupling is not None else math.nan

    def step(self, k, sigma, t, x, phi, omega, ergodic):
        i = k - 1
        self.sigma[i], self.t[i], self.phi[i], self.omega[i] = sigma, t, phi, omega
        ref = self.ref
        crit = math.nan
        if ref is not None:
            self.d_hat = max(self.d_hat, float(np.linalg.norm(x - ref.x_star)))
            crit = t * (phi - ref.phi_star) + t * sigma * (omega - ref.omega_star)
            for W in self._sizes:
                if W + 1 <= k <= 2 * W:
                    best = self._open.get(W)
                    if best is None or crit < best[0]:
                        self._open[W] = (crit, k, x.copy())
                    if k == 2 * W:
                        c, kk, xb = self._open.pop(W)
                        self.windows[W] = WindowRecord(
                            K=W, kstar=kk, x=xb, criterion=c,
                            phi_gap=float(self.phi[kk - 1] - ref.phi_star),
                            omega_gap=float(self.omega[kk - 1] - ref.omega_star),
                            coupling_norm=self._coupling(xb), d_hat=self.d_hat)
        if k in self.logged:
            xe = ergodic()
            rec = TraceRecord(k=k, sigma=sigma, t=t, x=x.copy(), phi=phi, omega=omega,
                              erg_x=xe, erg_phi=self.p.phi(xe), erg_omega=self.p.omega(xe),
                              coupling_norm=self._coupling(x),
                              erg_coupling_norm=self._coupling(xe),
                              kstar_criterion=crit)
            if ref is not None:
                rec.phi_gap = phi - ref.phi_star
                rec.omega_gap = omega - ref.omega_star
                rec.erg_phi_gap = rec.erg_phi - ref.phi_star
                rec.erg_omega_gap = rec.erg_omega - ref.omega_star
            self.records.append(rec)

    def finish(self, k_done, s=None, status="ok", message=""):
        cut = slice(0, k_done)
        return SolverTrace(
            config=self.cfg, x0=self.x0, records=self.records,
            sigma=self.sigma[cut].copy(), t=self.t[cut].copy(),
            phi=self.phi[cut].copy(), omega=self.omega[cut].copy(),
            windows=dict(sorted(self.windows.items())),
            invariants={n: v.as_dict() for n, v in self.invariants.items()},
            reference=self.ref, s=None if s is None else np.asarray(s[:k_done + 1]),
            d_hat=self.d_hat, L1=self.p.L1, L2=self.p.L2,
            status=status, message=message)


def _check_problem(p: BilevelProblem, x0):
    if p.joint_prox is None:
        raise ConfigurationError(
            "problem has no joint prox; lift it first (irebilevel.surrogate)")
    x0 = np.array(x0, dtype=float)
    if x0.shape != (p.dim,):
        raise ConfigurationError(f"x0 has shape {x0.shape}, expected ({p.dim},)")
    if not np.all(np.isfinite(x0)):
        raise ConfigurationError("x0 has non-finite entries")
    return x0


def _finite_or_fail(rec, k, x, s=None):
    if not np.all(np.isfinite(x)):
        raise NumericalError(f"non-finite iterate at k={k}",
                             trace=rec.finish(k - 1, s=s, status="numeric_failure",
                                              message=f"non-finite iterate at k={k}"))


def _values_or_fail(rec, k, phi, omega, s=None):
    if math.isnan(phi) or math.isnan(omega):
        raise NumericalError(f"NaN objective value at k={k}",
                             trace=rec.finish(k - 1, s=s, status="numeric_failure",
                                              message=f"NaN objective at k={k}"))


# ---------------------------------------------------------------------------
# IRE-PG
# ---------------------------------------------------------------------------

def ire_pg(p: BilevelProblem, cfg: SolverConfig, x0,
           ref: Optional[ReferenceSolution] = None) -> SolverTrace:
    """Iterative-regularization proximal gradient.

    The ergodic point uses weights ``sigma_k t_k``. With ``cfg.mode ==
    'verify'`` and a reference solution, the per-iteration distance
    recursion, the composite monotonicity and the sufficient decrease are
    checked at every iteration (see ``SolverTrace.invariants``).
    """
    if cfg.algorithm != "ire-pg":
        raise ConfigurationError("ire_pg called with a non ire-pg config")
    x = _check_problem(p, x0)
    rule, beta, K = cfg.step_rule, cfg.beta, cfg.iterations
    verify = cfg.mode == "verify"
    rec = _Recorder(p, cfg, x, ref)
    L1, L2 = p.L1, p.L2

    erg = x.copy()
    weight_sum = 0.0
    phi_prev, om_prev = p.phi(x), p.omega(x)
    if verify and ref is not None:
        scale = 1e-7 * (1.0 + float(np.linalg.norm(x - ref.x_star)) ** 2)
        dist_prev = float(np.linalg.norm(x - ref.x_star)) ** 2
        v_prev = (phi_prev - ref.phi_star) + 1.0 * (om_prev - ref.omega_low)

    for k in range(1, K + 1):
        sigma = float(k) ** (-beta)
        Fk = make_phi_k(p, sigma)
        if rule.backtracking:
            t, x_new, _ = backtrack(Fk.smooth, Fk.nonsmooth, x, rule.t_bar, rule.gamma)
        else:
            t = 1.0 / (L2 + sigma * L1)
            x_new = pg_step(Fk.smooth, Fk.nonsmooth, x, t)
        _finite_or_fail(rec, k, x_new)
        phi, om = p.phi(x_new), p.omega(x_new)
        _values_or_fail(rec, k, phi, om)

        if verify:
            d = x_new - x
            before = phi_prev + sigma * om_prev
            after = phi + sigma * om
            rec.invariant("sufficient_decrease").update(
                k, before - float(d @ d) / (2 * t) - after,
                1e-9 * max(1.0, abs(before)))
            if ref is not None:
                dist = float(np.linalg.norm(x_new - ref.x_star)) ** 2
                rhs = (dist_prev + 2 * sigma * t * (ref.omega_star - om)
                       + 2 * t * (ref.phi_star - phi))
                rec.invariant("distance_recursion").update(k, rhs - dist, scale)
                sigma_next = float(k + 1) ** (-beta)
                v = (phi - ref.phi_star) + sigma_next * (om - ref.omega_low)
                rec.invariant("composite_monotonicity").update(k, v_prev - v, scale)
                dist_prev, v_prev = dist, v

        pi = sigma * t
        weight_sum += pi
        erg += (pi / weight_sum) * (x_new - erg)
        rec.step(k, sigma, t, x_new, phi, om, erg.copy)
        x, phi_prev, om_prev = x_new, phi, om
    return rec.finish(K)


# ---------------------------------------------------------------------------
# IRE-APG
# ---------------------------------------------------------------------------

def ire_apg(p: BilevelProblem, cfg: SolverConfig, x0,
            ref: Optional[ReferenceSolution] = None) -> SolverTrace:
    """Accelerated iterative-regularization proximal gradient.

    Backtracking starts each search from the previous step, so steps are
    nonincreasing. The ergodic point is kept with lag-one accumulation: the
    weight of ``x_k`` is settled once ``sigma_{k+1}`` (and ``t_{k+1}``) is
    known, and the last iterate's special weight is applied when the point
    is evaluated.
    """
    if cfg.algorithm != "ire-apg":
        raise ConfigurationError("ire_apg called with a non ire-apg config")
    x = _check_problem(p, x0)
    rule, beta, K = cfg.step_rule, cfg.beta, cfg.iterations
    bt = rule.backtracking
    verify = cfg.mode == "verify" and ref is not None
    rec = _Recorder(p, cfg, x, ref)
    L1, L2 = p.L1, p.L2

    s_hist = np.empty(K + 1)
    seq = FistaSequence()
    s_hist[0] = seq.s
    y = x.copy()
    t_prev = rule.t_bar

    # settled part of the ergodic point
    erg_mean = x.copy()
    erg_sum = 0.0
    prev = None  # (x_{k-1}, s_{k-2}^2, sigma_{k-1} * tau_{k-1})

    if verify:
        r0 = float(np.linalg.norm(x - ref.x_star)) ** 2
        acc, acc_abs = 0.0, 0.0
        z_prev = None

    for k in range(1, K + 1):
        sigma = float(k) ** (-beta)
        Fk = make_phi_k(p, sigma)
        if bt:
            t, x_new, _ = backtrack(Fk.smooth, Fk.nonsmooth, y, t_prev, rule.gamma)
        else:
            t = 1.0 / (L2 + sigma * L1)
            x_new = pg_step(Fk.smooth, Fk.nonsmooth, y, t)
        _finite_or_fail(rec, k, x_new, s=s_hist)
        phi, om = p.phi(x_new), p.omega(x_new)
        _values_or_fail(rec, k, phi, om, s=s_hist)

        s_km1 = seq.s
        s_k = seq.advance()
        s_hist[k] = s_k
        tau = t if bt else 1.0
        st = sigma * tau

        if verify:
            v, z = phi - ref.phi_star, om - ref.omega_star
            dy = float(np.linalg.norm(y - ref.x_star)) ** 2
            dx = float(np.linalg.norm(x_new - ref.x_star)) ** 2
            gap_at_ref = t * ((ref.phi_star + sigma * ref.omega_star) - (phi + sigma * om))
            rec.invariant("prox_grad_inequality").update(
                k, gap_at_ref - 0.5 * (dx - dy),
                1e-9 * max(1.0, dy, abs(t * (phi + sigma * om))))
            if z_prev is not None:
                term = prev[1] * z_prev * (st - prev[2])
                acc += term
                acc_abs += abs(term)
            u = s_km1 * x_new - (s_km1 - 1.0) * x - ref.x_star
            uu = float(u @ u)
            if bt:
                lhs = 0.5 * uu + s_km1 ** 2 * t * v
                rhs = 0.5 * r0 + acc - st * s_km1 ** 2 * z
            else:
                lhs = uu / (2 * t) + s_km1 ** 2 * v
                rhs = 0.5 * (L1 + L2) * r0 + acc - st * s_km1 ** 2 * z
            rec.invariant("accumulated_recursion").update(
                k, rhs - lhs, 1e-9 * max(1.0, abs(lhs), abs(rhs), acc_abs))
            z_prev = z

        # settle the weight of x_{k-1} now that sigma_k tau_k is known
        if prev is not None:
            w = prev[1] * (prev[2] - st)
            erg_sum += w
            erg_mean += (w / erg_sum) * (prev[0] - erg_mean)
        prev = (x_new, s_km1 ** 2, st)

        def ergodic(xk=x_new, wk=st * s_km1 ** 2):
            total = erg_sum + wk
            return erg_mean + (wk / total) * (xk - erg_mean)

        rec.step(k, sigma, t, x_new, phi, om, ergodic)

        y = x_new + ((s_km1 - 1.0) / s_k) * (x_new - x)
        x = x_new
        t_prev = t
    return rec.finish(K, s=s_hist)


def solve(p: BilevelProblem, cfg: SolverConfig, x0,
          ref: Optional[ReferenceSolution] = None) -> SolverTrace:
    """Dispatch on ``cfg.algorithm``."""
    if cfg.algorithm == "ire-pg":
        return ire_pg(p, cfg, x0, ref)
    return ire_apg(p, cfg, x0, ref)


def best_iterate(trace: SolverTrace, ref: Optional[ReferenceSolution], K: int):
    """``(K*, x_{K*})`` for the window ``{K+1, ..., 2K}``.

    The running argmin is maintained by the solver while it iterates;
    this function looks it up. Ties resolve to the smallest index.
    """
    if ref is None or trace.reference is None:
        raise ConfigurationError("best iterate needs reference values; it is disabled "
                                 "for runs without a reference solution")
    if 2 * K > trace.iterations:
        raise WindowError(f"window {{{K + 1}..{2 * K}}} exceeds the "
                          f"{trace.iterations} recorded iterations")
    w = trace.windows.get(K)
    if w is None:
        raise WindowError(f"window size {K} was not tracked; add it to "
                          "SolverConfig.kstar_windows")
    return w.kstar, w.x
