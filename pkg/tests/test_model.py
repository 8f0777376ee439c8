import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from irebilevel.errors import ConfigurationError
from irebilevel.model import (
    BilevelProblem,
    ReferenceSolution,
    RegularizationSchedule,
    make_phi_k,
    validate,
)
from irebilevel.prox_core import (
    CompositeFunction,
    ProxOracle,
    SmoothOracle,
    check_descent_lemma,
    l1_norm,
    quadratic,
    zero_nonsmooth,
)


def _quadratic_problem(n=3):
    e1 = np.eye(n)[0]
    inner = CompositeFunction(quadratic(np.zeros(n)), zero_nonsmooth())
    outer = CompositeFunction(quadratic(e1), zero_nonsmooth())
    return BilevelProblem(inner, outer, n, joint_prox=lambda x, t, s: x.copy())


def test_make_phi_k_sigma_zero_is_inner():
    p = _quadratic_problem()
    F = make_phi_k(p, 0.0)
    x = np.array([0.3, -1.0, 2.0])
    assert F.smooth is p.inner.smooth
    assert F.value(x) == p.phi(x)
    assert np.array_equal(F.nonsmooth.prox(x, 0.5), x)


def test_make_phi_k_gradient_is_sum():
    p = _quadratic_problem()
    rng = np.random.default_rng(0)
    for sigma in (1.0, 0.37, 1e-6):
        F = make_phi_k(p, sigma)
        assert F.smoothness == p.L2 + sigma * p.L1
        for _ in range(20):
            x = rng.standard_normal(3)
            expected = p.inner.smooth.gradient(x) + sigma * p.outer.smooth.gradient(x)
            assert np.array_equal(F.smooth.gradient(x), expected)


def test_make_phi_k_descent_lemma(instance):
    lp = instance.lifted(1.0)
    for sigma in (1.0, 0.1):
        F = make_phi_k(lp.lifted, sigma)
        assert check_descent_lemma(F.smooth, lp.lifted.dim, probes=1000,
                                   sampler=lp.lifted.sampler, rng=3).passed


def test_make_phi_k_needs_joint_prox(instance):
    with pytest.raises(ConfigurationError, match="lift"):
        make_phi_k(instance.problem, 0.5)
    with pytest.raises(ConfigurationError):
        make_phi_k(_quadratic_problem(), -1.0)


def test_problem_rejects_bad_constants():
    bad = CompositeFunction(SmoothOracle(lambda x: 0.0, lambda x: x, 1.0), zero_nonsmooth())
    object.__setattr__(bad.smooth, "smoothness", math.inf)
    with pytest.raises(ConfigurationError):
        BilevelProblem(bad, bad, 2)


def test_schedule():
    for beta in (0.0, 0.3, 1.0, 2.0):
        sched = RegularizationSchedule(beta)
        assert sched(1) == 1.0
        vals = sched.values(10 ** 6)
        assert np.all(np.diff(vals) <= 0)
        assert vals[0] == 1.0
    assert RegularizationSchedule(0.5)(4) == 0.5
    with pytest.raises(ConfigurationError):
        RegularizationSchedule(0.5)(0)
    with pytest.raises(ConfigurationError):
        RegularizationSchedule(-1.0)


def test_schedule_partial_sums():
    # for beta <= 1 the partial sums dominate log(K + 1), hence diverge
    K = 10 ** 6
    for beta in (0.5, 1.0):
        s = np.cumsum(RegularizationSchedule(beta).values(K))
        for k in (10, 10 ** 3, K):
            assert s[k - 1] >= math.log(k + 1)
    s = RegularizationSchedule(2.0).values(K)
    assert s.sum() < math.pi ** 2 / 6


@given(st.floats(0.0, 4.0), st.integers(1, 10 ** 6))
def test_schedule_monotone_property(beta, k):
    sched = RegularizationSchedule(beta)
    assert sched(k) >= sched(k + 1) > 0


def test_reference_solution_invariants():
    with pytest.raises(ConfigurationError):
        ReferenceSolution(np.zeros(1), 0.0, 0.0, 1.0)
    with pytest.raises(ConfigurationError):
        ReferenceSolution(np.zeros(1), math.nan, 0.0, 0.0)
    ref = ReferenceSolution(np.zeros(1), 0.0, 0.5, 0.0)
    assert ref.delta_omega == 0.5


def test_validate_signal_instance(instance):
    rep = validate(instance.lifted(1.0).lifted, probes=1000, seed=0)
    assert rep["passed"], [c for c in rep["checks"] if not c["passed"]]
    assert any("bounded" in u for u in rep["untestable"])


def test_validate_detects_understated_smoothness(instance):
    lp = instance.lifted(1.0)
    inner = lp.lifted.inner
    small = SmoothOracle(inner.smooth.value, inner.smooth.gradient,
                         inner.smooth.smoothness / 10)
    bad = BilevelProblem(CompositeFunction(small, inner.nonsmooth), lp.lifted.outer,
                         lp.lifted.dim, joint_prox=lp.lifted.joint_prox,
                         sampler=lp.lifted.sampler)
    rep = validate(bad, probes=1000)
    failed = {(c["name"], c["level"]) for c in rep["checks"] if not c["passed"]}
    assert ("descent_lemma", "inner") in failed
    entry = next(c for c in rep["checks"] if c["name"] == "descent_lemma"
                 and c["level"] == "inner")
    assert entry["worst_margin"] < 0 and "worst_point" in entry


def test_validate_detects_identity_prox():
    n = 4
    fake_l1 = ProxOracle(l1_norm().value, lambda x, lam: x.copy())
    inner = CompositeFunction(quadratic(np.zeros(n)), zero_nonsmooth())
    outer = CompositeFunction(quadratic(np.ones(n)), fake_l1)
    p = BilevelProblem(inner, outer, n, joint_prox=lambda x, t, s: x.copy())
    rep = validate(p, probes=200)
    assert not rep["passed"]
    failed = {(c["name"], c["level"]) for c in rep["checks"] if not c["passed"]}
    assert ("second_prox", "outer") in failed


def test_validate_joint_prox_sigma_zero():
    n = 3
    inner = CompositeFunction(quadratic(np.zeros(n)), l1_norm())
    outer = CompositeFunction(quadratic(np.ones(n)), zero_nonsmooth())
    wrong = BilevelProblem(inner, outer, n, joint_prox=lambda x, t, s: x.copy())
    rep = validate(wrong, probes=50)
    entry = next(c for c in rep["checks"] if c["name"] == "joint_prox_sigma0")
    assert not entry["passed"]
    with pytest.raises(ConfigurationError):
        validate(wrong, probes=0)
