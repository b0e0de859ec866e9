import jax
import jax.numpy as jnp
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from picprop.hypergrad import (
    CGBreakdownError,
    CGConvergenceError,
    HypergradConfig,
    NeumannDivergenceError,
    cg_solve,
    hypergrad_aid,
    hypergrad_reverse,
    neumann_inv_hvp,
    quadratic_hypergrads,
    quadratic_instance,
    relative_error,
)


def matvec(A):
    A = jnp.asarray(A)
    return lambda v: A @ v


def test_neumann_identity():
    p = jnp.array([1.0, -2.0, 3.0])
    for K in (1, 5, 40):
        np.testing.assert_allclose(neumann_inv_hvp(lambda v: v, p, 1.0, K), p, rtol=1e-15)


def test_neumann_geometric_sum():
    p = jnp.array([2.0, -4.0])
    A = 2.0 * jnp.eye(2)
    x = neumann_inv_hvp(matvec(A), p, 0.25, 20)
    # 0.25 * sum_{k<=20} 0.5^k = 0.5 (1 - 0.5^21)
    np.testing.assert_allclose(x, p * 0.5 * (1 - 0.5**21), rtol=1e-14)
    assert np.max(np.abs(x - p / 2)) < 1e-3


def test_neumann_divergence_detected():
    with pytest.raises(NeumannDivergenceError, match="smaller"):
        neumann_inv_hvp(matvec(2.0 * jnp.eye(2)), jnp.ones(2), 2.0, 30)


def test_neumann_error_decays_geometrically():
    inst = quadratic_instance(0, 6, cond=5.0)
    lo, hi = inst.eig_range
    p = jnp.asarray(inst.c)
    exact = np.linalg.solve(inst.A, inst.c)
    errs = [np.linalg.norm(np.asarray(neumann_inv_hvp(matvec(inst.A), p, 1 / hi, K)) - exact) for K in (10, 20, 40, 80)]
    assert np.all(np.diff(errs) < 0)
    rho = 1 - lo / hi
    assert errs[-1] <= errs[0] * rho**60 * 10


def test_cg_small_system():
    res = cg_solve(matvec(jnp.diag(jnp.array([2.0, 4.0]))), jnp.array([2.0, 4.0]), iters=10)
    np.testing.assert_allclose(res.x, [1.0, 1.0], rtol=1e-14)
    assert res.iterations <= 2 and res.converged


def test_cg_zero_rhs():
    res = cg_solve(matvec(jnp.eye(3)), jnp.zeros(3), iters=5)
    assert res.iterations == 0
    np.testing.assert_array_equal(res.x, 0.0)


@pytest.mark.parametrize("d", [3, 7, 15])
def test_cg_finite_termination(d):
    A = jnp.diag(jnp.arange(1.0, d + 1))
    p = jnp.asarray(np.random.default_rng(d).normal(size=d))
    res = cg_solve(matvec(A), p, iters=50, tol=1e-12)
    assert res.iterations <= d
    np.testing.assert_allclose(res.x, np.asarray(p) / np.arange(1.0, d + 1), rtol=1e-10)


def test_cg_error_decreases_in_energy_norm():
    inst = quadratic_instance(3, 12, cond=50.0)
    A, p = inst.A, inst.c
    exact = np.linalg.solve(A, p)
    errs = []
    for k in range(1, 12):
        x = np.asarray(cg_solve(matvec(A), jnp.asarray(p), iters=k, tol=1e-30).x)
        e = x - exact
        errs.append(e @ A @ e)
    assert np.all(np.diff(errs) <= 1e-12)


def test_cg_breakdown_and_budget():
    with pytest.raises(CGBreakdownError):
        cg_solve(matvec(-jnp.eye(2)), jnp.ones(2), iters=5)
    inst = quadratic_instance(1, 10, cond=100.0)
    res = cg_solve(matvec(inst.A), jnp.asarray(inst.c), iters=2, tol=1e-12)
    assert not res.converged and res.iterations == 2


def test_reverse_single_exact_step():
    # L = 0.5 |theta - z|^2, lr 1 from zero: theta_1 = z, so dJ/dz = grad J
    c = jnp.array([0.5, -1.0, 2.0])
    step = lambda s, z: (s[0] - jax.grad(lambda t: 0.5 * jnp.sum((t - z) ** 2))(s[0]),)  # noqa: E731
    res = hypergrad_reverse(step, lambda t: c @ t, (jnp.zeros(3),), jnp.array([1.0, 2.0, 3.0]), 1)
    np.testing.assert_allclose(res.grad, c, rtol=1e-15)


def test_reverse_zero_upper_gradient():
    step = lambda s, z: (s[0] - 0.1 * (s[0] - z),)  # noqa: E731
    res = hypergrad_reverse(step, lambda t: 0.0 * jnp.sum(t), (jnp.zeros(2),), jnp.ones(2), 5)
    np.testing.assert_array_equal(res.grad, 0.0)


def test_reverse_converges_monotonically_in_depth():
    inst = quadratic_instance(2, 5, cond=4.0)
    lo, hi = inst.eig_range
    lr = 1 / hi
    step = lambda s, z: (s[0] - lr * jax.grad(inst.loss)(s[0], z),)  # noqa: E731
    oracle = inst.oracle()
    theta0 = (jnp.zeros(5),)
    errs = [
        relative_error(hypergrad_reverse(step, inst.upper, theta0, jnp.asarray(inst.z), K).grad, oracle)
        for K in (1, 3, 10, 30, 100)
    ]
    assert np.all(np.diff(errs) < 0)
    assert errs[-1] < 1e-4


def test_reverse_depth_longer_than_trajectory():
    from picprop.hypergrad import HypergradError

    step = lambda s, z: (s[0] - z,)  # noqa: E731
    with pytest.raises(HypergradError, match="shorter"):
        hypergrad_reverse(step, jnp.sum, (jnp.zeros(1),), jnp.ones(1), 3, depth=5)


def test_aid_on_shifted_quadratic():
    # L = 0.5 |theta - M z|^2, J = c' theta: hypergradient M'c
    rng = np.random.default_rng(0)
    M = jnp.asarray(rng.normal(size=(6, 4)))
    c = jnp.asarray(rng.normal(size=6))
    z = jnp.asarray(rng.normal(size=4))
    loss = lambda t, zz: 0.5 * jnp.sum((t - M @ zz) ** 2)  # noqa: E731
    theta = M @ z
    for cfg in (HypergradConfig("aid_ns", 60, ns_scale=0.5), HypergradConfig("aid_cg", 10)):
        res = hypergrad_aid(loss, lambda t: c @ t, theta, z, cfg)
        np.testing.assert_allclose(res.grad, np.asarray(M.T @ c), rtol=1e-6)
        assert not res.warnings


def test_aid_flags_non_stationary_inner_state():
    loss = lambda t, z: 0.5 * jnp.sum((t - z) ** 2)  # noqa: E731
    res = hypergrad_aid(loss, jnp.sum, jnp.full(3, 5.0), jnp.zeros(3), HypergradConfig("aid_cg", 5))
    assert any("stationary" in w for w in res.warnings)


def test_aid_cg_strictness():
    inst = quadratic_instance(4, 10, cond=100.0)
    theta = jnp.asarray(inst.solution())
    with pytest.raises(CGConvergenceError):
        hypergrad_aid(inst.loss, inst.upper, theta, jnp.asarray(inst.z), HypergradConfig("aid_cg", 2, cg_tol=1e-12))
    res = hypergrad_aid(
        inst.loss, inst.upper, theta, jnp.asarray(inst.z), HypergradConfig("aid_cg", 2, cg_tol=1e-12, cg_strict=False)
    )
    assert any("did not converge" in w for w in res.warnings)


@settings(max_examples=10)
@given(st.integers(0, 2**32 - 1), st.integers(1, 20), st.integers(1, 20))
def test_three_estimators_match_closed_form(seed, dim, zdim):
    inst = quadratic_instance(seed, dim, zdim)
    oracle = inst.oracle()
    for name, g in quadratic_hypergrads(inst).items():
        assert relative_error(g, oracle) <= 1e-4, name


def test_config_validation():
    with pytest.raises(ValueError):
        HypergradConfig("forward")
    with pytest.raises(ValueError):
        HypergradConfig(iterations=0)
    with pytest.raises(ValueError):
        HypergradConfig(ns_scale=-1.0)
