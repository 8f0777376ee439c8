"""Signal-recovery instances and high-accuracy reference solutions.

An instance recovers a piecewise-constant signal from ``n/2`` noisy ternary
measurements: the inner problem keeps ``A x`` within ``tau`` of ``y`` inside
the box ``[-1, 1]^n`` and the outer problem minimizes the total variation
``||S x||_1``.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .errors import ConfigurationError, EstimationError
from .model import BilevelProblem, ReferenceSolution, make_phi_k
from .prox_core import (
    CompositeFunction,
    ProxOracle,
    SmoothOracle,
    box_indicator,
    half_sq_dist_affine,
    pg_step,
    zero_smooth,
)
from .solvers import SolverConfig, StepRule, ire_apg
from .surrogate import LiftedProblem, lift_matrix

__all__ = [
    "InstanceSpec",
    "Instance",
    "make_rng",
    "tv_matrix",
    "ball_noise",
    "gen_instance",
    "fista",
    "reference_solve",
    "reference_solve_generic",
    "barrier_reference",
    "write_instance",
    "read_instance",
    "instance_hash",
]

FORMAT_HEADER = "irebilevel-instance v1"


@dataclass(frozen=True)
class InstanceSpec:
    n: int = 50
    tau: float = 0.1
    seed: int = 0
    rho: float = 1.0

    def __post_init__(self):
        if not isinstance(self.n, (int, np.integer)) or self.n < 4 or self.n % 2:
            raise ConfigurationError(f"n must be an even integer >= 4, got {self.n}")
        if not self.tau >= 0:
            raise ConfigurationError(f"tau must be >= 0, got {self.tau}")
        if not 0 <= int(self.seed) < 2 ** 64:
            raise ConfigurationError("seed must be a 64-bit unsigned integer")
        if not self.rho > 0:
            raise ConfigurationError(f"rho must be > 0, got {self.rho}")


def make_rng(seed: int) -> np.random.Generator:
    """Counter-based generator keyed by ``seed`` (platform independent)."""
    return np.random.Generator(np.random.Philox(key=int(seed)))


def tv_matrix(n: int) -> np.ndarray:
    """``(n-1) x n`` forward differences; row ``i`` is ``e_{i+1} - e_i``."""
    if n < 2:
        raise ConfigurationError("n must be >= 2")
    S = np.zeros((n - 1, n))
    idx = np.arange(n - 1)
    S[idx, idx] = -1.0
    S[idx, idx + 1] = 1.0
    return S


def ball_noise(radius: float, dim: int, rng: np.random.Generator) -> np.ndarray:
    """Uniform draw from the Euclidean ball of the given radius."""
    if not radius >= 0:
        raise ConfigurationError(f"radius must be >= 0, got {radius}")
    d = rng.standard_normal(dim)
    u = rng.uniform()
    if radius == 0:
        return np.zeros(dim)
    return (radius * u ** (1.0 / dim) / np.linalg.norm(d)) * d


@dataclass(frozen=True)
class Instance:
    spec: InstanceSpec
    A: np.ndarray
    y: np.ndarray
    x_true: np.ndarray
    S: np.ndarray
    problem: BilevelProblem = field(repr=False, compare=False)

    @property
    def lo(self) -> np.ndarray:
        return -np.ones(self.spec.n)

    @property
    def hi(self) -> np.ndarray:
        return np.ones(self.spec.n)

    def lifted(self, rho: Optional[float] = None) -> LiftedProblem:
        return lift_matrix(self.problem, self.S, self.spec.rho if rho is None else rho)


def _signal_problem(A, y, tau, S) -> BilevelProblem:
    n = A.shape[1]
    inner = CompositeFunction(half_sq_dist_affine(A, y, tau),
                              box_indicator(-np.ones(n), np.ones(n)), name="dist+box")

    def tv(x):
        return float(np.abs(S @ x).sum())

    outer = CompositeFunction(zero_smooth(), ProxOracle(tv, None), name="tv")
    return BilevelProblem(
        inner=inner, outer=outer, dim=n, sampler=lambda rng: rng.uniform(-1, 1, n),
        name=f"signal(n={n}, tau={tau:g})",
        notes=("outer ||S x||_1 has no cheap prox; lift with S before solving",))


def gen_instance(spec: InstanceSpec) -> Instance:
    """Draw ``A`` (entries uniform on {-1, 0, 1}) and ``y = A x_true + eta``."""
    n = spec.n
    rng = make_rng(spec.seed)
    A = rng.integers(-1, 2, size=(n // 2, n)).astype(float)
    if not np.any(A):
        raise ConfigurationError("degenerate draw: A is zero")
    x_true = np.concatenate([-0.5 * np.ones(n // 2), 0.5 * np.ones(n // 2)])
    y = A @ x_true + ball_noise(spec.tau, n // 2, rng)
    S = tv_matrix(n)
    return Instance(spec=spec, A=A, y=y, x_true=x_true, S=S,
                    problem=_signal_problem(A, y, spec.tau, S))


# ---------------------------------------------------------------------------
# reference solutions
# ---------------------------------------------------------------------------

@dataclass
class FistaResult:
    x: np.ndarray
    value: float
    mapping_norm: float
    iterations: int
    converged: bool


def fista(F: SmoothOracle, G: ProxOracle, x0, iterations=1_000_000, tol=1e-10,
          step=None) -> FistaResult:
    """Accelerated proximal gradient with constant step ``1/L``.

    Stops when the gradient-mapping norm ``||x - T(x)|| / t`` at the
    current point drops below ``tol``.
    """
    L = F.smoothness
    t = step if step is not None else (1.0 / L if L > 0 else 1.0)
    x = np.array(x0, dtype=float)
    y = x.copy()
    s = 1.0
    gm = math.inf
    for it in range(1, iterations + 1):
        x_new = pg_step(F, G, y, t)
        s_new = (1 + math.sqrt(1 + 4 * s * s)) / 2
        y = x_new + ((s - 1) / s_new) * (x_new - x)
        x, s = x_new, s_new
        if it % 50 == 0 or it == iterations:
            gm = float(np.linalg.norm(x - pg_step(F, G, x, t))) / t
            if gm < tol:
                return FistaResult(x, F.value(x) + G.value(x), gm, it, True)
    return FistaResult(x, F.value(x) + G.value(x), gm, iterations, gm < tol)


def _barrier_terms(A, y, tau, S, lo, hi, x, s):
    Sx = S @ x
    r = A @ x - y
    cons = [Sx - s, -Sx - s, x - hi, lo - x]
    q = 0.5 * (float(r @ r) - tau * tau) if tau > 0 else None
    return cons, q, r


def barrier_reference(A, y, tau, S, lo, hi, x_start, tol=1e-10, mu=10.0,
                      max_newton=200) -> dict:
    """Minimize ``||S x||_1`` over ``{lo <= x <= hi, ||A x - y|| <= tau}``.

    Log-barrier interior-point method on the epigraph form
    ``min 1's  s.t.  -s <= S x <= s`` started from the strictly feasible
    ``x_start``. The barrier weight grows by ``mu`` until the duality-gap
    bound ``m / t`` drops below ``tol``. For ``tau == 0`` the measurement
    constraint becomes the equality ``A x = y`` (kept exactly by solving the
    Newton KKT system).
    """
    n = A.shape[1]
    q_dim = S.shape[0]
    x = np.array(x_start, dtype=float)
    s = np.abs(S @ x) + 1.0
    cons, qv, _ = _barrier_terms(A, y, tau, S, lo, hi, x, s)
    if any(np.any(c >= 0) for c in cons) or (qv is not None and qv >= 0):
        raise ConfigurationError("barrier start point is not strictly feasible")
    m = 2 * q_dim + 2 * n + (1 if tau > 0 else 0)
    AtA = A.T @ A
    Z = None
    if tau == 0:
        # Newton steps live in the null space of [A 0] so A x = y is kept
        eq = np.hstack([A, np.zeros((A.shape[0], q_dim))])
        _, sv, vt = np.linalg.svd(eq)
        rank = int(np.sum(sv > sv[0] * 1e-12))
        Z = vt[rank:].T

    def fval(x, s, t):
        cons, qv, _ = _barrier_terms(A, y, tau, S, lo, hi, x, s)
        if any(np.any(c >= 0) for c in cons) or (qv is not None and qv >= 0):
            return math.inf
        val = t * float(s.sum()) - sum(float(np.log(-c).sum()) for c in cons)
        if qv is not None:
            val -= math.log(-qv)
        return val

    t = 1.0
    newton_total = 0
    last_decrement = math.nan
    while True:
        for _ in range(max_newton):
            cons, qv, r = _barrier_terms(A, y, tau, S, lo, hi, x, s)
            da, db, dc1, dc2 = (1.0 / -c for c in cons)
            gx = S.T @ (da - db) + dc1 - dc2
            gs = t - da - db
            wa, wb = da * da, db * db
            Hxx = S.T @ ((wa + wb)[:, None] * S) + np.diag(dc1 * dc1 + dc2 * dc2)
            if qv is not None:
                dq = 1.0 / -qv
                Atr = A.T @ r
                gx = gx + dq * Atr
                Hxx += dq * dq * np.outer(Atr, Atr) + dq * AtA
            Hxs = S.T * (wb - wa)
            H = np.block([[Hxx, Hxs], [Hxs.T, np.diag(wa + wb)]])
            g = np.concatenate([gx, gs])
            if Z is None:
                try:
                    step = -np.linalg.solve(H, g)
                except np.linalg.LinAlgError:
                    step = -np.linalg.lstsq(H, g, rcond=None)[0]
            else:
                step = -Z @ np.linalg.solve(Z.T @ H @ Z, Z.T @ g)
            dec = float(-g @ step)
            last_decrement = dec
            newton_total += 1
            if dec / 2 <= 1e-13:
                break
            f0 = fval(x, s, t)
            alpha = 1.0
            while alpha > 1e-20:
                xn, sn = x + alpha * step[:n], s + alpha * step[n:]
                fn = fval(xn, sn, t)
                if fn <= f0 - 0.25 * alpha * dec:
                    break
                alpha *= 0.5
            else:
                break
            x, s = xn, sn
        if m / t <= tol:
            break
        t *= mu
    return {"x": x, "s": s, "objective": float(np.abs(S @ x).sum()), "gap_bound": m / t,
            "newton_steps": newton_total, "last_decrement": last_decrement,
            "barrier_weight": t, "constraints": m}


def _mapping_norm(problem: BilevelProblem, x, t=None) -> float:
    """Gradient-mapping norm of the inner problem at ``x``."""
    t = t if t is not None else 1.0 / max(problem.L2, 1e-12)
    F, G = problem.inner.smooth, problem.inner.nonsmooth
    return float(np.linalg.norm(x - pg_step(F, G, x, t))) / t


def reference_solve(p: BilevelProblem, instance: Optional[Instance] = None, *,
                    x0=None, tol=1e-10, **kw) -> ReferenceSolution:
    """High-accuracy ``x*``, ``phi*``, ``omega*`` and ``omega_low``.

    For signal instances (``instance`` given) the bilevel problem is the
    convex program ``min ||S x||_1`` over the inner solution set, solved by
    :func:`barrier_reference`; ``phi* = 0`` because ``x_true`` is inner
    feasible and the returned ``x*`` is strictly feasible, and
    ``omega_low = 0`` is attained by constant vectors. Other problems go
    through :func:`reference_solve_generic`.
    """
    if instance is None:
        if x0 is None:
            x0 = np.zeros(p.dim)
        return reference_solve_generic(p, x0, **kw)
    A, y, tau, S = instance.A, instance.y, instance.spec.tau, instance.S
    res = barrier_reference(A, y, tau, S, instance.lo, instance.hi, instance.x_true,
                            tol=tol)
    x_star = res["x"]
    phi_star = 0.0
    phi_at_ref = p.phi(x_star)
    omega_star = p.omega(x_star)
    const = np.full(p.dim, 0.25)
    omega_low_check = p.omega(const)
    mapping = _mapping_norm(p, x_star)
    confident = (phi_at_ref <= 1e-14 and res["gap_bound"] <= 1e-8
                 and mapping < 1e-8 * (1 + np.linalg.norm(x_star)))
    details = {
        "stage1_omega_low_at_constant": omega_low_check,
        "stage2_phi_at_x_true": p.phi(instance.x_true),
        "stage3_gap_bound": res["gap_bound"],
        "stage3_newton_steps": res["newton_steps"],
        "stage3_last_decrement": res["last_decrement"],
        "inner_mapping_norm": mapping,
        "phi_at_reference": phi_at_ref,
        "omega_true_signal": p.omega(instance.x_true),
    }
    return ReferenceSolution(x_star=x_star, phi_star=phi_star, omega_star=omega_star,
                             omega_low=0.0, method="log-barrier",
                             tolerance=res["gap_bound"], low_confidence=not confident,
                             details=details)


def reference_solve_generic(p: BilevelProblem, x0, *, apg_iterations=100_000,
                            fista_iterations=1_000_000, polish_sigma=1e-8,
                            tol=1e-10) -> ReferenceSolution:
    """Reference values from first-order runs.

    ``phi*`` from FISTA on the inner problem, ``x*`` from an IRE-APG run
    (``beta = 1``) polished by FISTA on ``phi + polish_sigma * omega``, and
    ``omega_low`` from FISTA on the outer problem (needs a prox of the outer
    nonsmooth part). The reported tolerance is the largest final
    gradient-mapping norm; failing to reach ``tol`` marks the result as low
    confidence.
    """
    x0 = np.asarray(x0, dtype=float)
    inner = fista(p.inner.smooth, p.inner.nonsmooth, x0, fista_iterations, tol)
    cfg = SolverConfig(algorithm="ire-apg", beta=1.0, step_rule=StepRule("constant"),
                       iterations=apg_iterations)
    tr = ire_apg(p, cfg, x0)
    reg = make_phi_k(p, polish_sigma)
    polished = fista(reg.smooth, reg.nonsmooth, tr.final.x, fista_iterations, tol * polish_sigma)
    x_star = polished.x
    if p.outer.nonsmooth.prox is None:
        raise EstimationError("outer minimum needs a prox of the outer nonsmooth part")
    low = fista(p.outer.smooth, p.outer.nonsmooth, x0, fista_iterations, tol)
    phi_star = min(inner.value, p.phi(x_star))
    omega_star = p.omega(x_star)
    omega_low = min(low.value, omega_star)
    tolerance = max(inner.mapping_norm, low.mapping_norm, polished.mapping_norm)
    return ReferenceSolution(
        x_star=x_star, phi_star=phi_star, omega_star=omega_star, omega_low=omega_low,
        method="first-order", tolerance=tolerance,
        low_confidence=not (inner.converged and low.converged and polished.converged),
        details={"inner_iterations": inner.iterations,
                 "polish_iterations": polished.iterations,
                 "outer_iterations": low.iterations})


# ---------------------------------------------------------------------------
# text serialization
# ---------------------------------------------------------------------------

def _fmt(v) -> str:
    return repr(float(v))


def write_instance(inst: Instance) -> str:
    """Self-describing decimal text: dimensions, row-major ``A``, vectors."""
    sp = inst.spec
    lines = [FORMAT_HEADER, f"n {sp.n}", f"tau {_fmt(sp.tau)}", f"seed {int(sp.seed)}",
             f"rho {_fmt(sp.rho)}", f"A {inst.A.shape[0]} {inst.A.shape[1]}"]
    lines += [" ".join(_fmt(v) for v in row) for row in inst.A]
    for name in ("y", "x_true"):
        vec = getattr(inst, name)
        lines.append(f"{name} {vec.size}")
        lines.append(" ".join(_fmt(v) for v in vec))
    return "\n".join(lines) + "\n"


def read_instance(text: str) -> Instance:
    lines = text.splitlines()
    if not lines or lines[0].strip() != FORMAT_HEADER:
        raise ConfigurationError("not an instance file")
    pos = 1

    def field_line(key):
        nonlocal pos
        parts = lines[pos].split()
        if parts[0] != key:
            raise ConfigurationError(f"line {pos + 1}: expected {key!r}, got {parts[0]!r}")
        pos += 1
        return parts[1:]

    n = int(field_line("n")[0])
    tau = float(field_line("tau")[0])
    seed = int(field_line("seed")[0])
    rho = float(field_line("rho")[0])
    rows, cols = map(int, field_line("A"))
    A = np.array([[float(v) for v in lines[pos + i].split()] for i in range(rows)])
    pos += rows
    if A.shape != (rows, cols):
        raise ConfigurationError("matrix block has the wrong shape")
    vecs = {}
    for name in ("y", "x_true"):
        size = int(field_line(name)[0])
        vecs[name] = np.array([float(v) for v in lines[pos].split()])
        pos += 1
        if vecs[name].size != size:
            raise ConfigurationError(f"{name} has the wrong length")
    spec = InstanceSpec(n=n, tau=tau, seed=seed, rho=rho)
    S = tv_matrix(n)
    return Instance(spec=spec, A=A, y=vecs["y"], x_true=vecs["x_true"], S=S,
                    problem=_signal_problem(A, vecs["y"], tau, S))


def instance_hash(inst: Instance) -> str:
    """Hash of the problem data (independent of ``rho``)."""
    text = write_instance(inst).splitlines()
    text = [ln for ln in text if not ln.startswith("rho ")]
    return hashlib.sha256("\n".join(text).encode()).hexdigest()[:16]
