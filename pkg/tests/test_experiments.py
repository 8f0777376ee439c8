import math

import numpy as np
import pytest

from irebilevel.errors import ConfigurationError
from irebilevel.experiments import (
    InstanceSpec,
    ball_noise,
    gen_instance,
    instance_hash,
    make_rng,
    read_instance,
    reference_solve,
    tv_matrix,
    write_instance,
)
from irebilevel.model import BilevelProblem
from irebilevel.prox_core import CompositeFunction, pg_step, quadratic, zero_nonsmooth


def test_spec_validation():
    for bad in (dict(n=5), dict(n=2), dict(tau=-0.1), dict(rho=0.0), dict(seed=-1)):
        with pytest.raises(ConfigurationError):
            InstanceSpec(**bad)


def test_instance_construction(instance):
    n = 50
    assert instance.A.shape == (n // 2, n)
    assert set(np.unique(instance.A)) <= {-1.0, 0.0, 1.0}
    assert np.array_equal(instance.x_true[: n // 2], np.full(n // 2, -0.5))
    assert np.array_equal(instance.x_true[n // 2:], np.full(n // 2, 0.5))
    assert instance.problem.phi(instance.x_true) == 0.0
    assert np.linalg.norm(instance.A @ instance.x_true - instance.y) <= 0.1
    assert instance.problem.omega(instance.x_true) == 1.0


def test_tv_matrix_small():
    S = tv_matrix(4)
    x = np.array([-0.5, -0.5, 0.5, 0.5])
    assert np.array_equal(S @ x, [0.0, 1.0, 0.0])
    assert np.array_equal(S[0], [-1.0, 1.0, 0.0, 0.0])


def test_regeneration_is_bit_identical():
    a, b = gen_instance(InstanceSpec(seed=11)), gen_instance(InstanceSpec(seed=11))
    assert np.array_equal(a.A, b.A) and np.array_equal(a.y, b.y)
    c = gen_instance(InstanceSpec(seed=12))
    assert not np.array_equal(a.A, c.A)


def test_ball_noise_zero_radius():
    assert np.array_equal(ball_noise(0.0, 4, make_rng(0)), np.zeros(4))
    with pytest.raises(ConfigurationError):
        ball_noise(-1.0, 3, make_rng(0))


def test_ball_noise_monte_carlo():
    rng = make_rng(123)
    dim, N, r = 3, 100_000, 2.0
    X = np.array([ball_noise(r, dim, rng) for _ in range(N)])
    norms = np.linalg.norm(X, axis=1)
    assert norms.max() <= r
    se = X.std(axis=0, ddof=1) / math.sqrt(N)
    assert np.all(np.abs(X.mean(axis=0)) <= 3 * se)
    # uniform in volume: P(|eta| <= r/2) = 2^-dim
    frac = float(np.mean(norms <= r / 2))
    p = 2.0 ** -dim
    assert abs(frac - p) <= 4 * math.sqrt(p * (1 - p) / N)


def test_reference_toy_closed_form():
    e1 = np.array([1.0, 0.0])
    p = BilevelProblem(CompositeFunction(quadratic(np.zeros(2)), zero_nonsmooth()),
                       CompositeFunction(quadratic(e1), zero_nonsmooth()), 2,
                       joint_prox=lambda x, t, s: x.copy())
    ref = reference_solve(p, x0=np.array([0.7, -0.3]), apg_iterations=20_000)
    np.testing.assert_allclose(ref.x_star, 0.0, atol=1e-6)
    assert ref.phi_star == pytest.approx(0.0, abs=1e-12)
    assert ref.omega_star == pytest.approx(0.5, abs=1e-6)
    assert ref.omega_low == pytest.approx(0.0, abs=1e-12)


def test_signal_reference(instance, reference):
    p = instance.problem
    assert reference.phi_star == 0.0
    assert p.phi(reference.x_star) == 0.0
    assert not reference.low_confidence
    assert reference.tolerance <= 1e-8
    assert reference.omega_low == 0.0
    assert reference.details["stage1_omega_low_at_constant"] == 0.0
    # inner first-order condition at x*
    t = 1.0 / p.L2
    F, G = p.inner.smooth, p.inner.nonsmooth
    x = reference.x_star
    mapping = np.linalg.norm(x - pg_step(F, G, x, t)) / t
    assert mapping < 1e-8 * (1 + np.linalg.norm(x))
    # x_true is inner optimal here, so it cannot beat the bilevel optimum
    assert p.phi(instance.x_true) <= reference.phi_star + 1e-10
    assert reference.omega_star <= p.omega(instance.x_true)


def _cvxpy_value(inst):
    cp = pytest.importorskip("cvxpy")
    x = cp.Variable(inst.spec.n)
    cons = [x >= -1, x <= 1]
    if inst.spec.tau > 0:
        cons.append(cp.norm(inst.A @ x - inst.y, 2) <= inst.spec.tau)
    else:
        cons.append(inst.A @ x == inst.y)
    prob = cp.Problem(cp.Minimize(cp.norm(inst.S @ x, 1)), cons)
    prob.solve(solver=cp.CLARABEL, tol_gap_abs=1e-10, tol_gap_rel=1e-10,
               tol_feas=1e-10)
    return prob.value


def test_reference_agrees_with_conic_solver(instance, reference):
    assert reference.omega_star == pytest.approx(_cvxpy_value(instance), abs=1e-7)


def test_reference_equality_case():
    inst = gen_instance(InstanceSpec(n=16, tau=0.0, seed=3))
    ref = reference_solve(inst.problem, inst)
    assert np.allclose(inst.A @ ref.x_star, inst.y, atol=1e-9)
    assert not ref.low_confidence
    assert ref.omega_star == pytest.approx(_cvxpy_value(inst), abs=1e-7)


def test_serialization_round_trip(instance):
    text = write_instance(instance)
    assert text.startswith("irebilevel-instance v1\n") and text.endswith("\n")
    back = read_instance(text)
    assert np.array_equal(back.A, instance.A)
    assert np.array_equal(back.y, instance.y)
    assert np.array_equal(back.x_true, instance.x_true)
    assert back.spec == instance.spec
    assert write_instance(back) == text
    assert instance_hash(back) == instance_hash(instance)


def test_hash_ignores_rho_only():
    a = gen_instance(InstanceSpec(seed=1, rho=1.0))
    b = gen_instance(InstanceSpec(seed=1, rho=10.0))
    c = gen_instance(InstanceSpec(seed=2))
    assert instance_hash(a) == instance_hash(b) != instance_hash(c)


def test_read_instance_rejects_garbage(instance):
    with pytest.raises(ConfigurationError):
        read_instance("hello\n")
    lines = write_instance(instance).splitlines()
    lines[1] = "m 50"
    with pytest.raises(ConfigurationError, match="line 2"):
        read_instance("\n".join(lines))
