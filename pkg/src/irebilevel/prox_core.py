"""Oracles, closed-form proximal operators and the proximal-gradient step.

A composite function is a pair ``f + g`` where ``f`` is available through a
:class:`SmoothOracle` (value, gradient, Lipschitz constant of the gradient)
and ``g`` through a :class:`ProxOracle` (value, proximal map). Everything in
this module is a pure function of its inputs.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, NamedTuple, Optional

import numpy as np

from .errors import (
    BacktrackingError,
    ConfigurationError,
    DomainError,
    EstimationError,
    NumericalError,
)

__all__ = [
    "SmoothOracle",
    "ProxOracle",
    "CompositeFunction",
    "BacktrackResult",
    "CheckResult",
    "prox_l1",
    "prox_box",
    "project_ball",
    "half_sq_dist_affine",
    "operator_norm",
    "pg_step",
    "sufficient_decrease",
    "backtrack",
    "sum_bound_check",
    "zero_smooth",
    "quadratic",
    "zero_nonsmooth",
    "l1_norm",
    "box_indicator",
    "check_gradient",
    "check_descent_lemma",
    "check_second_prox",
    "check_nonexpansive",
]

MAX_REDUCTIONS = 200


@dataclass(frozen=True)
class SmoothOracle:
    """Convex differentiable function with an L-Lipschitz gradient."""

    value: Callable[[np.ndarray], float]
    gradient: Callable[[np.ndarray], np.ndarray]
    smoothness: float

    def __post_init__(self):
        if not (self.smoothness >= 0 and math.isfinite(self.smoothness)):
            raise ConfigurationError(
                f"smoothness must be finite and >= 0, got {self.smoothness}")


@dataclass(frozen=True)
class ProxOracle:
    """Proper closed convex function with a computable proximal map.

    ``prox(x, lam)`` returns ``argmin_u g(u) + ||u - x||^2 / (2 lam)``.
    ``prox`` may be ``None`` for functions that are only evaluated, never
    proximated (e.g. ``||S x||_1`` before lifting).
    """

    value: Callable[[np.ndarray], float]
    prox: Optional[Callable[[np.ndarray, float], np.ndarray]] = None

    @property
    def prox_friendly(self) -> bool:
        return self.prox is not None


@dataclass(frozen=True)
class CompositeFunction:
    smooth: SmoothOracle
    nonsmooth: ProxOracle
    name: str = field(default="", compare=False)

    @property
    def smoothness(self) -> float:
        return self.smooth.smoothness

    def value(self, x: np.ndarray) -> float:
        g = self.nonsmooth.value(x)
        if g == math.inf:
            return math.inf
        return self.smooth.value(x) + g

    __call__ = value


class BacktrackResult(NamedTuple):
    t: float
    x_plus: np.ndarray
    reductions: int


@dataclass
class CheckResult:
    """Outcome of a sampled oracle self-consistency check.

    ``worst_margin`` is the smallest (tolerance - violation) seen; a check
    passes iff it is non-negative.
    """

    name: str
    passed: bool
    worst_margin: float
    probes: int
    worst_point: Optional[np.ndarray] = None

    def as_dict(self) -> dict:
        return {
            "name": self.name,
            "passed": bool(self.passed),
            "worst_margin": float(self.worst_margin),
            "probes": int(self.probes),
        }


def _require_finite(x, what="input"):
    x = np.asarray(x, dtype=float)
    if not np.all(np.isfinite(x)):
        raise DomainError(f"non-finite entries in {what}")
    return x


# ---------------------------------------------------------------------------
# closed-form proximal maps
# ---------------------------------------------------------------------------

def prox_l1(x, lam):
    """Soft thresholding: prox of ``lam * ||.||_1``."""
    if not lam > 0:
        raise ConfigurationError(f"lam must be > 0, got {lam}")
    x = _require_finite(x)
    return np.sign(x) * np.maximum(np.abs(x) - lam, 0.0)


def prox_box(x, lo, hi):
    """Euclidean projection onto ``[lo, hi]`` (prox of the box indicator)."""
    lo = np.asarray(lo, dtype=float)
    hi = np.asarray(hi, dtype=float)
    if np.any(lo > hi):
        raise ConfigurationError("box with lo > hi")
    x = _require_finite(x)
    return np.minimum(np.maximum(x, lo), hi)


def project_ball(z, center, radius):
    """Projection onto the closed ball ``B(center, radius)``.

    Returns ``z`` itself (not a copy) when it already lies in the ball.
    """
    if not radius >= 0:
        raise ConfigurationError(f"radius must be >= 0, got {radius}")
    z = _require_finite(z)
    d = z - center
    nd = math.sqrt(float(d @ d))
    if nd <= radius:
        return z
    return center + (radius / nd) * d


# ---------------------------------------------------------------------------
# oracle factories
# ---------------------------------------------------------------------------

def zero_smooth() -> SmoothOracle:
    return SmoothOracle(value=lambda x: 0.0,
                        gradient=lambda x: np.zeros_like(x, dtype=float),
                        smoothness=0.0)


def quadratic(center, weight=1.0) -> SmoothOracle:
    """``weight/2 * ||x - center||^2``."""
    c = np.asarray(center, dtype=float)

    def value(x):
        d = x - c
        return 0.5 * weight * float(d @ d)

    return SmoothOracle(value=value, gradient=lambda x: weight * (x - c),
                        smoothness=float(weight))


def zero_nonsmooth() -> ProxOracle:
    return ProxOracle(value=lambda x: 0.0, prox=lambda x, lam: x)


def l1_norm(weight=1.0) -> ProxOracle:
    def prox(x, lam):
        return prox_l1(x, lam * weight)

    return ProxOracle(value=lambda x: weight * float(np.abs(x).sum()), prox=prox)


def box_indicator(lo, hi, atol=1e-12) -> ProxOracle:
    """Indicator of a box.

    Membership is tested with an absolute slack ``atol`` so that convex
    combinations of projected points, which may drift by an ulp, still count
    as feasible.
    """
    lo = np.asarray(lo, dtype=float)
    hi = np.asarray(hi, dtype=float)
    if np.any(lo > hi):
        raise ConfigurationError("box with lo > hi")

    def value(x):
        if np.all(x >= lo - atol) and np.all(x <= hi + atol):
            return 0.0
        return math.inf

    return ProxOracle(value=value, prox=lambda x, lam: prox_box(x, lo, hi))


def half_sq_dist_affine(A, y, tau) -> SmoothOracle:
    """``x -> 0.5 * dist(A x, B(y, tau))^2``.

    The gradient is ``A^T (A x - P(A x))`` with ``P`` the projection onto the
    ball, and the declared smoothness is ``sigma_max(A)^2``.
    """
    A = np.asarray(A, dtype=float)
    y = np.asarray(y, dtype=float)
    if A.ndim != 2 or y.shape != (A.shape[0],):
        raise ConfigurationError(
            f"dimension mismatch: A {A.shape}, y {y.shape}")
    if not tau >= 0:
        raise ConfigurationError(f"tau must be >= 0, got {tau}")
    if not np.any(A):
        raise ConfigurationError("A must be nonzero")
    L = operator_norm(A) ** 2

    def residual(x):
        z = A @ x
        return z - project_ball(z, y, tau)

    def value(x):
        r = residual(x)
        return 0.5 * float(r @ r)

    def gradient(x):
        return A.T @ residual(x)

    return SmoothOracle(value=value, gradient=gradient, smoothness=L)


# ---------------------------------------------------------------------------
# linear algebra
# ---------------------------------------------------------------------------

def operator_norm(A, rtol=1e-14, max_iter=10_000, seed=0, squarings=8) -> float:
    """Largest singular value of ``A`` by power iteration.

    The iteration runs on ``M = (A^T A)^(2^squarings)`` (normalized after
    each squaring), which has the same leading eigenvector as the Gram
    matrix but a much larger relative spectral gap; the Rayleigh quotient is
    taken with the Gram matrix itself. Stops when the estimated error of the
    quotient (change times the observed contraction ratio) is below
    ``rtol`` relative.
    """
    A = np.asarray(A, dtype=float)
    if A.ndim == 1:
        A = A[None, :]
    if not np.any(A):
        raise ConfigurationError("operator_norm of a zero matrix")
    _require_finite(A, "A")
    G = A.T @ A if A.shape[1] <= A.shape[0] else A @ A.T
    M = G / np.linalg.norm(G)
    for _ in range(squarings):
        M = M @ M
        M /= np.linalg.norm(M)
    rng = np.random.default_rng(seed)
    v = rng.standard_normal(G.shape[0])
    v /= np.linalg.norm(v)
    mu = float(v @ G @ v)
    changes = []
    for _ in range(max_iter):
        w = M @ v
        nw = np.linalg.norm(w)
        if nw == 0.0:
            # start vector in the null space; restart from a fresh draw
            v = rng.standard_normal(G.shape[0])
            v /= np.linalg.norm(v)
            continue
        v = w / nw
        mu_new = float(v @ G @ v)
        change = abs(mu_new - mu)
        mu = mu_new
        if change <= 1e-15 * mu and len(changes) >= 3:
            return math.sqrt(mu)
        changes.append(change)
        if len(changes) >= 5:
            # contraction estimated pessimistically over the last few steps,
            # since fast-decaying components make single ratios optimistic
            ratio = max(c1 / c0 if c0 > 0 else 0.0
                        for c0, c1 in zip(changes[-4:-1], changes[-3:]))
            ratio = min(ratio, 0.999999)
            if change * ratio / (1.0 - ratio) <= rtol * mu:
                return math.sqrt(mu)
    raise EstimationError(
        f"power iteration did not converge in {max_iter} iterations",
        last=math.sqrt(mu))


# ---------------------------------------------------------------------------
# proximal gradient machinery
# ---------------------------------------------------------------------------

def pg_step(F: SmoothOracle, G: ProxOracle, x, t):
    """Proximal-gradient map ``prox_{tG}(x - t grad F(x))``."""
    if not t > 0:
        raise ConfigurationError(f"step size must be > 0, got {t}")
    g = F.gradient(x)
    if not np.all(np.isfinite(g)):
        raise NumericalError("non-finite gradient in pg_step")
    return G.prox(x - t * g, t)


def sufficient_decrease(F: SmoothOracle, x, x_plus, t, fx=None, gx=None,
                        rtol=1e-12) -> float:
    """Margin of the sufficient-decrease condition at step ``t``.

    Returns ``rhs - lhs + slack`` where the condition is
    ``F(x+) <= F(x) + <grad F(x), x+ - x> + ||x+ - x||^2 / (2t)``; the
    condition holds iff the result is >= 0. The slack ``rtol * max(1, |F|)``
    absorbs rounding when the inequality is tight.
    """
    if fx is None:
        fx = F.value(x)
    if gx is None:
        gx = F.gradient(x)
    d = x_plus - x
    lhs = F.value(x_plus)
    rhs = fx + float(gx @ d) + float(d @ d) / (2.0 * t)
    return rhs - lhs + rtol * max(1.0, abs(fx), abs(lhs))


def backtrack(F: SmoothOracle, G: ProxOracle, x, t_bar, gamma=0.5,
              max_reductions=MAX_REDUCTIONS) -> BacktrackResult:
    """Largest step ``t_bar * gamma**i`` passing the sufficient-decrease test."""
    if not t_bar > 0:
        raise ConfigurationError(f"t_bar must be > 0, got {t_bar}")
    if not 0 < gamma < 1:
        raise ConfigurationError(f"gamma must lie in (0, 1), got {gamma}")
    fx = F.value(x)
    gx = F.gradient(x)
    if not np.all(np.isfinite(gx)):
        raise NumericalError("non-finite gradient in backtrack")
    for i in range(max_reductions + 1):
        t = t_bar * gamma ** i
        x_plus = G.prox(x - t * gx, t)
        if sufficient_decrease(F, x, x_plus, t, fx=fx, gx=gx) >= 0:
            return BacktrackResult(t, x_plus, i)
    raise BacktrackingError(
        f"no step accepted after {max_reductions} reductions from t_bar={t_bar}"
        f" (declared smoothness {F.smoothness})")


# ---------------------------------------------------------------------------
# summation bounds for k^(1-beta)
# ---------------------------------------------------------------------------

def _power_sum(beta, K):
    k = np.arange(1, K + 1, dtype=float)
    return math.fsum(k ** (1.0 - beta))


def sum_bound_check(beta, K, rtol=1e-12) -> dict:
    """Verify the three bounds on ``sum_{k<=K} k^(1-beta)`` by direct summation.

    Returns a dict with the sum, one entry per bound (value, bound, margin,
    passed) and an overall ``passed`` flag.
    """
    if beta < 0 or K < 1:
        raise ConfigurationError("need beta >= 0 and K >= 1")
    total = _power_sum(beta, K)
    checks = []

    def add(name, value, bound, upper):
        slack = rtol * max(abs(value), abs(bound))
        margin = (bound - value if upper else value - bound) + slack
        checks.append({"name": name, "value": value, "bound": bound,
                       "margin": margin, "passed": margin >= 0})

    if beta < 2:
        add("upper", total, (K + 1) ** (2 - beta) / (2 - beta), True)
        add("lower", total, K ** (2 - beta) / 2, False)
    elif beta == 2:
        add("upper", total, 1 + math.log(K), True)
        add("lower", total, math.log(K + 1), False)
    else:
        add("upper", total, (beta - 1) / (beta - 2), True)

    k = np.arange(1, K, dtype=float)
    log_sum = math.fsum(2 * np.log(k) / (k + 1) ** 3) + math.log(K) / (K + 1) ** 2
    add("log_weighted", log_sum, 1.0, True)
    return {"beta": beta, "K": K, "sum": total, "checks": checks,
            "passed": all(c["passed"] for c in checks)}


# ---------------------------------------------------------------------------
# sampled self-consistency checks
# ---------------------------------------------------------------------------

def _rng(rng):
    return rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)


def check_gradient(F: SmoothOracle, dim, probes=20, rtol=1e-6, scale=1.0,
                   rng=0, sampler=None) -> CheckResult:
    """Compare ``F.gradient`` with central finite differences.

    Stencil ``h = 1e-5 (1 + ||x||)``; pass when
    ``||g - g_fd|| <= rtol * max(1, ||g||)``.
    """
    rng = _rng(rng)
    worst, worst_x = math.inf, None
    eye = np.eye(dim)
    for _ in range(probes):
        x = sampler(rng) if sampler else scale * rng.standard_normal(dim)
        h = 1e-5 * (1 + np.linalg.norm(x))
        g = F.gradient(x)
        fd = np.array([(F.value(x + h * e) - F.value(x - h * e)) / (2 * h)
                       for e in eye])
        margin = rtol * max(1.0, np.linalg.norm(g)) - np.linalg.norm(g - fd)
        if margin < worst:
            worst, worst_x = margin, x
    return CheckResult("gradient_fd", worst >= 0, worst, probes, worst_x)


def check_descent_lemma(F: SmoothOracle, dim, probes=1000, L=None, scale=1.0,
                        atol=1e-9, rng=0, sampler=None, power_steps=3) -> CheckResult:
    """Quadratic upper bound at the declared (or given) smoothness constant.

    Every other probe bends its direction towards high curvature with a few
    gradient-difference power steps; purely random directions rarely see
    the largest eigenvalue of the Hessian in higher dimensions.
    """
    rng = _rng(rng)
    L = F.smoothness if L is None else L
    worst, worst_x = math.inf, None
    for i in range(probes):
        if sampler:
            x, y = sampler(rng), sampler(rng)
        else:
            x = scale * rng.standard_normal(dim)
            y = x + scale * rng.standard_normal(dim) * rng.uniform(0.01, 1)
        d = y - x
        if i % 2:
            r = np.linalg.norm(d)
            g0 = F.gradient(x)
            for _ in range(power_steps):
                w = F.gradient(x + d) - g0
                nw = np.linalg.norm(w)
                if nw == 0:
                    break
                d = (r / nw) * w
            y = x + d
        fx, fy = F.value(x), F.value(y)
        rhs = fx + float(F.gradient(x) @ d) + 0.5 * L * float(d @ d)
        margin = rhs - fy + atol * max(1.0, abs(fx), abs(fy))
        if margin < worst:
            worst, worst_x = margin, x
    return CheckResult("descent_lemma", worst >= 0, worst, probes, worst_x)


def check_second_prox(G: ProxOracle, dim, probes=1000, scale=1.0, atol=1e-9,
                      rng=0, sampler=None) -> CheckResult:
    """``<x - u, y - u> <= lam (g(y) - g(u))`` with ``u = prox(x, lam)``.

    Points ``y`` with infinite ``g`` are replaced by their prox so that the
    inequality is informative.
    """
    rng = _rng(rng)
    worst, worst_x = math.inf, None
    for _ in range(probes):
        x = sampler(rng) if sampler else scale * rng.standard_normal(dim)
        y = sampler(rng) if sampler else scale * rng.standard_normal(dim)
        lam = float(np.exp(rng.uniform(np.log(1e-2), np.log(1e2))))
        u = G.prox(x, lam)
        gy = G.value(y)
        if not math.isfinite(gy):
            y = G.prox(y, 1.0)
            gy = G.value(y)
        gu = G.value(u)
        lhs = float((x - u) @ (y - u))
        rhs = lam * (gy - gu)
        margin = rhs - lhs + atol * max(1.0, abs(lhs), abs(rhs))
        if not math.isfinite(margin):
            margin = -math.inf
        if margin < worst:
            worst, worst_x = margin, x
    return CheckResult("second_prox", worst >= 0, worst, probes, worst_x)


def check_nonexpansive(G: ProxOracle, dim, probes=1000, scale=1.0, rng=0,
                       sampler=None) -> CheckResult:
    rng = _rng(rng)
    worst, worst_x = math.inf, None
    for _ in range(probes):
        x = sampler(rng) if sampler else scale * rng.standard_normal(dim)
        y = sampler(rng) if sampler else scale * rng.standard_normal(dim)
        lam = float(np.exp(rng.uniform(np.log(1e-2), np.log(1e2))))
        dxy = np.linalg.norm(x - y)
        dp = np.linalg.norm(G.prox(x, lam) - G.prox(y, lam))
        margin = dxy * (1 + 1e-12) + 1e-12 - dp
        if margin < worst:
            worst, worst_x = margin, x
    return CheckResult("nonexpansive", worst >= 0, worst, probes, worst_x)
