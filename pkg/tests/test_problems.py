import jax
import jax.numpy as jnp
import numpy as np
import pytest

from picprop.problems import (
    BURGERS_NU,
    BoundaryDataset,
    burgers,
    burgers_residual,
    clean_dataset,
    get_problem,
    pedagogical,
    pedagogical_residual,
    poisson2d,
    poisson2d_residual,
    sample_dataset,
)

PI = np.pi


def exact_derivatives(u, X, names, coords):
    """Derivative fields of a scalar closed-form function by nested jax.grad."""

    def partial(f, axis):
        return lambda p: jax.grad(f)(p)[axis]

    out = {}
    for name in names:
        f = u
        for c in name[2:] if name != "u" else "":
            f = partial(f, coords.index(c))
        out[name] = jax.vmap(f)(X)
    return out


@pytest.mark.parametrize("x", [-1.0, -0.37, 0.0, 0.21, 0.5, 0.93, 1.0])
def test_pedagogical_exact_solution_residual(x):
    u = np.sin(PI * x)
    ux = PI * np.cos(PI * x)
    uxx = -(PI**2) * np.sin(PI * x)
    assert abs(float(pedagogical_residual(u, ux, uxx, x))) < 1e-9


def test_pedagogical_zero_field():
    assert float(pedagogical_residual(0.0, 0.0, 0.0, 0.5)) == pytest.approx(PI**2, rel=1e-12)
    assert abs(float(pedagogical_residual(0.0, 0.0, 0.0, 0.0))) < 1e-15


def test_poisson_residual_values():
    assert abs(float(poisson2d_residual(np.exp(0.3), np.exp(-0.7), 0.3, -0.7))) < 1e-12
    assert float(poisson2d_residual(0.0, 0.0, 0.0, 0.0)) == pytest.approx(-2.0)
    assert float(poisson2d_residual(0.0, 0.0, 1.0, 1.0)) == pytest.approx(-2 * np.e)


def test_burgers_residual_values():
    assert float(burgers_residual(0.0, 0.0, 0.0, 0.0, 0.3, 0.4)) == 0.0
    assert float(burgers_residual(2.5, 0.0, 0.0, 0.0, -0.3, 0.9)) == 0.0
    # u = -sin(pi x): u_x = -pi cos(pi x), u_xx = pi^2 sin(pi x); at x = 0.5 only -nu u_xx survives
    x = 0.5
    u, ux, uxx = -np.sin(PI * x), -PI * np.cos(PI * x), PI**2 * np.sin(PI * x)
    got = float(burgers_residual(u, ux, uxx, 0.0, x, 0.0))
    assert got == pytest.approx(-BURGERS_NU * PI**2, rel=1e-9)
    x = 0.3
    u, ux, uxx = -np.sin(PI * x), -PI * np.cos(PI * x), PI**2 * np.sin(PI * x)
    expected = PI * np.sin(PI * x) * np.cos(PI * x) - BURGERS_NU * PI**2 * np.sin(PI * x)
    assert float(burgers_residual(u, ux, uxx, 0.0, x, 0.0)) == pytest.approx(expected, rel=1e-12)


def test_burgers_linear_advection_switch():
    args = (0.5, 2.0, 0.0, 0.0, 0.0, 0.5)
    assert float(burgers_residual(*args)) == pytest.approx(1.0)
    assert float(burgers_residual(*args, linear_advection=True)) == pytest.approx(2.0)
    p = burgers(linear_advection=True)
    X = jnp.array([[0.1, 0.2]])
    d = {"u": jnp.array([0.5]), "u_x": jnp.array([2.0]), "u_xx": jnp.array([0.0]), "u_t": jnp.array([0.0])}
    assert float(p.residual(d, X)[0]) == pytest.approx(2.0)


@pytest.mark.parametrize(
    "problem, u",
    [
        (pedagogical(), lambda p: jnp.sin(jnp.pi * p[0])),
        (poisson2d(), lambda p: jnp.exp(p[0]) + jnp.exp(p[1])),
    ],
)
def test_exact_solution_residual_vanishes_in_domain(problem, u):
    rng = np.random.default_rng(0)
    X = jnp.asarray(rng.uniform(problem.lower, problem.upper, (1000, problem.dim)))
    d = exact_derivatives(u, X, problem.derivatives, problem.coords)
    assert float(jnp.max(jnp.abs(problem.residual(d, X)))) <= 1e-6
    np.testing.assert_allclose(problem.exact_solution(np.asarray(X)), jax.vmap(u)(X), rtol=1e-12)


def test_multi_index_from_names():
    p = burgers()
    assert p.multi_index("u") == (0, 0)
    assert p.multi_index("u_xx") == (2, 0)
    assert p.multi_index("u_t") == (0, 1)


def test_unknown_problem_and_noise():
    with pytest.raises(ValueError, match="unknown problem"):
        get_problem("heat")
    with pytest.raises(ValueError, match="noise"):
        sample_dataset("pedagogical", {"kind": "cauchy", "scale": 1.0})


def test_pedagogical_gaussian_dataset():
    ds = sample_dataset("pedagogical", {"kind": "gaussian", "scale": 0.05}, seed=7)
    assert ds.n_noisy == 2
    assert np.all(np.isfinite(ds.noisy_values))
    assert np.all(np.abs(ds.noisy_values) < 5 * 0.05)
    np.testing.assert_array_equal(ds.noisy_points[:, 0], [-1.0, 1.0])
    assert ds.n_force == 128


def test_gaussian_noise_is_roughly_normal_over_seeds():
    from scipy import stats as sst

    z = np.stack([sample_dataset("pedagogical", {"kind": "gaussian", "scale": 0.05}, seed=s).noisy_values for s in range(2000)])
    for j in range(2):
        assert sst.kstest(z[:, j] / 0.05, "norm").pvalue > 1e-3


def test_noise_is_zero_mean():
    sigma = 0.05
    z = np.stack(
        [sample_dataset("pedagogical", {"kind": "gaussian", "scale": sigma}, {"collocation": 1}, seed=s).noisy_values for s in range(10_000)]
    )
    assert np.all(np.abs(z.mean(axis=0)) <= 4 * sigma / np.sqrt(10_000))


def test_burgers_initial_points_evenly_spaced():
    ds = clean_dataset("burgers", {"collocation_grid": (4, 3)})
    ic = ds.noisy_points
    assert len(ic) == 256
    np.testing.assert_allclose(ic[:, 0], np.linspace(-1, 1, 256))
    np.testing.assert_array_equal(ic[:, 1], 0.0)
    np.testing.assert_allclose(ds.noisy_values, -np.sin(PI * ic[:, 0]))
    # clean boundary rows at x = +-1 with value zero
    bc = ds.boundary_points[~ds.noisy]
    assert len(bc) == 200
    np.testing.assert_array_equal(np.abs(bc[:, 0]), 1.0)
    np.testing.assert_array_equal(ds.boundary_values[~ds.noisy], 0.0)
    assert ds.n_force == 12


def test_clean_dataset_equals_exact_boundary_values():
    ds = clean_dataset("poisson2d", {"grid": 5})
    np.testing.assert_array_equal(ds.boundary_values, np.exp(ds.boundary_points[:, 0]) + np.exp(ds.boundary_points[:, 1]))
    assert ds.n_noisy == 40
    assert np.all(np.max(np.abs(ds.boundary_points), axis=1) == 1.0)


def test_sampler_determinism():
    a = sample_dataset("poisson2d", {"kind": "uniform", "scale": 0.05}, {"grid": 4}, seed=3)
    b = sample_dataset("poisson2d", {"kind": "uniform", "scale": 0.05}, {"grid": 4}, seed=3)
    np.testing.assert_array_equal(a.boundary_values, b.boundary_values)
    c = sample_dataset("poisson2d", {"kind": "uniform", "scale": 0.05}, {"grid": 4}, seed=4)
    assert not np.array_equal(a.boundary_values, c.boundary_values)


def test_template_groups_repeated_measurements():
    ds = sample_dataset("pedagogical", {"kind": "gaussian", "scale": 0.05}, {"per_side": 5}, seed=1)
    locs, obs = ds.observation_matrix()
    assert obs.shape == (5, 2)
    t = ds.template()
    assert t.n_noisy == 2
    np.testing.assert_allclose(t.noisy_values, obs.mean(axis=0))
    np.testing.assert_array_equal(t.noisy_points[:, 0], locs[:, 0])


def test_dataset_roundtrip(tmp_path):
    ds = sample_dataset("burgers", {"kind": "gaussian", "scale": 0.1}, {"collocation_grid": (3, 2), "boundary": 6, "initial": 5}, seed=2)
    ds.to_csv(tmp_path / "d.csv", ("x", "t"))
    back = BoundaryDataset.from_csv(tmp_path / "d.csv")
    for b in (back, BoundaryDataset.from_dict(ds.to_dict())):
        np.testing.assert_array_equal(b.force_points, ds.force_points)
        np.testing.assert_array_equal(b.boundary_values, ds.boundary_values)
        np.testing.assert_array_equal(b.noisy, ds.noisy)
        assert b.roles == ds.roles
    ds.to_json(tmp_path / "d.json")
    assert BoundaryDataset.from_json(tmp_path / "d.json").noise_meta == ds.noise_meta


def test_dataset_rejects_empty_and_bad_replacement():
    with pytest.raises(ValueError):
        BoundaryDataset(np.zeros((0, 1)), [[1.0]], [0.0], ("boundary",), [True])
    ds = clean_dataset("pedagogical")
    with pytest.raises(ValueError):
        ds.with_noisy_values([1.0, 2.0, 3.0])
    np.testing.assert_array_equal(ds.with_noisy_values([0.1, 0.2]).noisy_values, [0.1, 0.2])
