"""Bilevel problem data, the regularization schedule and reference values."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .errors import ConfigurationError
from .prox_core import (
    CompositeFunction,
    ProxOracle,
    SmoothOracle,
    check_descent_lemma,
    check_gradient,
    check_nonexpansive,
    check_second_prox,
)

__all__ = [
    "BilevelProblem",
    "RegularizationSchedule",
    "ReferenceSolution",
    "make_phi_k",
    "validate",
]

JointProx = Callable[[np.ndarray, float, float], np.ndarray]


@dataclass(frozen=True)
class BilevelProblem:
    """``min omega(x)`` over ``argmin phi``.

    Parameters
    ----------
    inner, outer : CompositeFunction
        ``phi = f2 + g2`` and ``omega = f1 + g1``.
    dim : int
        Dimension of the decision variable.
    joint_prox : callable, optional
        ``(x, t, sigma) -> prox_{t (g2 + sigma g1)}(x)``. Solvers refuse
        problems without it; use :mod:`irebilevel.surrogate` to obtain one.
    coupling : callable, optional
        ``x -> float`` residual norm reported for lifted problems.
    sampler : callable, optional
        ``rng -> point`` used by :func:`validate` to draw probes from a
        meaningful region. Defaults to standard normal draws.
    """

    inner: CompositeFunction
    outer: CompositeFunction
    dim: int
    joint_prox: Optional[JointProx] = None
    coupling: Optional[Callable[[np.ndarray], float]] = None
    sampler: Optional[Callable] = None
    name: str = ""
    notes: tuple = field(default=())

    def __post_init__(self):
        for label, L in (("L2", self.inner.smoothness), ("L1", self.outer.smoothness)):
            if not (L >= 0 and math.isfinite(L)):
                raise ConfigurationError(f"{label} must be finite and >= 0, got {L}")
        if self.dim < 1:
            raise ConfigurationError("dim must be >= 1")

    @property
    def L1(self) -> float:
        return self.outer.smoothness

    @property
    def L2(self) -> float:
        return self.inner.smoothness

    def phi(self, x) -> float:
        return self.inner.value(x)

    def omega(self, x) -> float:
        return self.outer.value(x)


@dataclass(frozen=True)
class RegularizationSchedule:
    """``sigma_k = k**(-beta)`` for ``k >= 1``."""

    beta: float

    def __post_init__(self):
        if not (self.beta >= 0 and math.isfinite(self.beta)):
            raise ConfigurationError(f"beta must be finite and >= 0, got {self.beta}")

    def __call__(self, k: int) -> float:
        if k < 1:
            raise ConfigurationError("the schedule starts at k = 1")
        return float(k) ** (-self.beta)

    def values(self, K: int) -> np.ndarray:
        """``sigma_1, ..., sigma_K`` as an array."""
        return np.arange(1, K + 1, dtype=float) ** (-self.beta)


@dataclass(frozen=True)
class ReferenceSolution:
    """High-accuracy values the rate bounds are measured against.

    ``omega_low`` is the unconstrained minimum of the outer function.
    ``tolerance`` is the accuracy the producing method certifies.
    """

    x_star: np.ndarray
    phi_star: float
    omega_star: float
    omega_low: float
    method: str = ""
    tolerance: float = math.nan
    low_confidence: bool = False
    details: dict = field(default_factory=dict)

    def __post_init__(self):
        vals = (self.phi_star, self.omega_star, self.omega_low)
        if not all(math.isfinite(v) for v in vals):
            raise ConfigurationError("reference values must be finite")
        if self.omega_low > self.omega_star:
            raise ConfigurationError("omega_low exceeds omega_star")

    @property
    def delta_omega(self) -> float:
        return self.omega_star - self.omega_low

    def as_dict(self) -> dict:
        return {
            "phi_star": self.phi_star,
            "omega_star": self.omega_star,
            "omega_low": self.omega_low,
            "delta_omega": self.delta_omega,
            "method": self.method,
            "tolerance": self.tolerance,
            "low_confidence": self.low_confidence,
            **{k: v for k, v in self.details.items()
               if isinstance(v, (int, float, str, bool))},
        }


def make_phi_k(p: BilevelProblem, sigma: float) -> CompositeFunction:
    """The regularized function ``phi + sigma * omega`` as a composite."""
    if not sigma >= 0:
        raise ConfigurationError(f"sigma must be >= 0, got {sigma}")
    if p.joint_prox is None:
        raise ConfigurationError(
            "problem has no joint prox for g2 + sigma*g1; lift it first "
            "(irebilevel.surrogate.lift or lift_matrix)")
    f2, f1 = p.inner.smooth, p.outer.smooth
    g2, g1 = p.inner.nonsmooth, p.outer.nonsmooth
    if sigma == 0:
        jp = p.joint_prox
        return CompositeFunction(
            f2, ProxOracle(g2.value, lambda x, t: jp(x, t, 0.0)), name="phi_0")

    def value(x):
        return f2.value(x) + sigma * f1.value(x)

    def gradient(x):
        return f2.gradient(x) + sigma * f1.gradient(x)

    def g_value(x):
        a = g2.value(x)
        if a == math.inf:
            return math.inf
        return a + sigma * g1.value(x)

    jp = p.joint_prox
    smooth = SmoothOracle(value, gradient, f2.smoothness + sigma * f1.smoothness)
    return CompositeFunction(smooth, ProxOracle(g_value, lambda x, t: jp(x, t, sigma)),
                             name=f"phi_sigma={sigma:g}")


def validate(p: BilevelProblem, probes: int = 1000, seed: int = 0,
             gradient_probes: int = 20) -> dict:
    """Run the oracle self-consistency checks on both levels.

    Returns a report with one entry per check and an overall ``passed``
    flag. Boundedness of the outer solution set cannot be verified
    numerically; it is listed under ``untestable``.
    """
    if probes < 1:
        raise ConfigurationError("probes must be >= 1")
    rng = np.random.default_rng(seed)
    checks = []

    def record(level, res):
        entry = res.as_dict()
        entry["level"] = level
        if res.worst_point is not None and not res.passed:
            entry["worst_point"] = [float(v) for v in res.worst_point]
        checks.append(entry)

    for level, comp in (("inner", p.inner), ("outer", p.outer)):
        kw = dict(rng=rng, sampler=p.sampler)
        record(level, check_gradient(comp.smooth, p.dim,
                                     probes=min(probes, gradient_probes), **kw))
        record(level, check_descent_lemma(comp.smooth, p.dim, probes=probes, **kw))
        if comp.nonsmooth.prox is not None:
            record(level, check_second_prox(comp.nonsmooth, p.dim, probes=probes, **kw))
            record(level, check_nonexpansive(comp.nonsmooth, p.dim, probes=probes, **kw))
    if p.joint_prox is not None and p.inner.nonsmooth.prox is not None:
        worst = math.inf
        for _ in range(min(probes, 100)):
            x = p.sampler(rng) if p.sampler else rng.standard_normal(p.dim)
            t = float(np.exp(rng.uniform(-3, 3)))
            d = np.linalg.norm(p.joint_prox(x, t, 0.0) - p.inner.nonsmooth.prox(x, t))
            worst = min(worst, 1e-12 * (1 + np.linalg.norm(x)) - d)
        checks.append({"name": "joint_prox_sigma0", "level": "joint",
                       "passed": worst >= 0, "worst_margin": float(worst),
                       "probes": min(probes, 100)})
    return {
        "passed": all(c["passed"] for c in checks),
        "checks": checks,
        "untestable": ["bounded outer solution set (argmin of omega over the inner "
                       "solution set) is assumed, not verified"] + list(p.notes),
    }
