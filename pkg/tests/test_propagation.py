import numpy as np
import pytest

from picprop.approximator import NetworkSpec
from picprop.hypergrad import HypergradConfig
from picprop.pinn import DivergenceError, PinnConfig
from picprop.problems import clean_dataset, pedagogical
from picprop.propagation import PicPropConfig, Propagator, picprop_band
from picprop.regions import chi_squared_region, fixed_region, point_region

SPEC = NetworkSpec(1, 32, 2)


def desk_config(region, **kw):
    opts = dict(
        pinn=PinnConfig(dtype="float32", warmup_steps=2000, inner_steps=200),
        hypergrad=HypergradConfig("aid_ns", iterations=50, ns_scale=1e-3),
        meta_lr=0.08,
        meta_steps=20,
    )
    opts.update(kw)
    return PicPropConfig(region, **opts)


@pytest.fixture(scope="module")
def problem():
    return pedagogical()


@pytest.fixture(scope="module")
def template(problem):
    return clean_dataset(problem)


@pytest.fixture(scope="module")
def chi2_prop(problem, template):
    region = chi_squared_region([0.0, 0.0], 0.05**2 * np.eye(2), 0.95)
    return Propagator(problem, template, desk_config(region), SPEC)


def test_point_region_gives_equal_bounds(problem, template):
    cfg = desk_config(point_region([0.0, 0.0]), meta_steps=3, pinn=PinnConfig(warmup_steps=500, inner_steps=20))
    band = picprop_band(problem, template, cfg, [[-0.5], [0.3]], SPEC)
    np.testing.assert_array_equal(band.lower, band.upper)
    padded = picprop_band(problem, template, PicPropConfig(**{**cfg.__dict__, "eta": 0.1}), [[-0.5], [0.3]], SPEC)
    np.testing.assert_allclose(padded.upper - padded.lower, 0.2, rtol=1e-12)
    np.testing.assert_allclose(padded.lower, band.lower - 0.1, rtol=1e-12)


def test_meta_iterates_stay_in_region(chi2_prop):
    for bound in ("lower", "upper"):
        r = chi2_prop.query([-1.0], bound, keep_history=True)
        assert r.z_history.shape == (21, 2)
        assert np.all(chi2_prop.config.region.contains(r.z_history))
        assert len(r.trajectory) == 21


def test_boundary_width_in_reported_range(chi2_prop):
    lo = chi2_prop.query([-1.0], "lower")
    hi = chi2_prop.query([-1.0], "upper")
    assert 0.1 <= hi.value - lo.value <= 0.3


def test_lower_upper_antisymmetry(chi2_prop):
    # odd forcing, symmetric region: L(x) = -U(-x)
    for x in (0.5, 1.0):
        lo = chi2_prop.query([x], "lower").value
        hi = chi2_prop.query([-x], "upper").value
        assert abs(lo + hi) <= 0.05


def test_best_seen_never_worse_than_last(chi2_prop):
    r = chi2_prop.query([0.2], "lower")
    assert r.best_value <= r.value
    assert r.best_value == pytest.approx(r.trajectory.min())
    u = chi2_prop.query([0.2], "upper")
    assert u.best_value >= u.value


def test_singleton_band_matches_query(problem, template, chi2_prop):
    band = picprop_band(problem, template, chi2_prop.config, [[0.4]], SPEC, propagator=chi2_prop)
    assert len(band) == 1
    assert band.lower[0] == chi2_prop.query([0.4], "lower").value
    assert band.upper[0] == chi2_prop.query([0.4], "upper").value


def test_workers_do_not_change_band(problem, template, chi2_prop):
    q = [[-0.6], [0.0], [0.6]]
    a = picprop_band(problem, template, chi2_prop.config, q, SPEC, propagator=chi2_prop, workers=1)
    b = picprop_band(problem, template, chi2_prop.config, q, SPEC, propagator=chi2_prop, workers=3)
    np.testing.assert_array_equal(a.lower, b.lower)
    np.testing.assert_array_equal(a.upper, b.upper)
    assert a.provenance["config_hash"] == b.provenance["config_hash"]


def test_exact_solution_inside_band_for_inflated_clean_box(problem, template):
    cfg = desk_config(fixed_region([-0.05, -0.05], [0.05, 0.05]), pinn=PinnConfig(warmup_steps=2000, inner_steps=200))
    q = np.array([[-0.75], [0.0], [0.5]])
    band = picprop_band(problem, template, cfg, q, SPEC)
    assert band.complete
    assert np.all(band.contains(np.sin(np.pi * q[:, 0])))
    assert np.all(band.width > 0)


def test_monotone_objective_on_quadratic_surrogate(problem, template):
    # without the physics term the inner problem is a two-point interpolation the
    # network solves almost exactly, so the meta objective is a smooth function of z.
    # The Hessian is rank deficient there, so a truncated Neumann series is used.
    cfg = PicPropConfig(
        fixed_region([-0.3, -0.3], [0.3, 0.3]),
        PinnConfig(w_f=0.0, warmup_steps=3000, inner_steps=300, lr=3e-3),
        HypergradConfig("aid_ns", iterations=100, ns_scale=3e-3),
        meta_lr=0.5,
        meta_steps=8,
    )
    prop = Propagator(problem, template, cfg, NetworkSpec(1, 8, 1))
    lo = prop.query([0.4], "lower").trajectory
    hi = prop.query([0.4], "upper").trajectory
    assert np.all(np.diff(lo) <= 1e-6)
    assert np.all(np.diff(hi) >= -1e-6)
    assert hi[-1] - lo[-1] > 0.1


def test_failed_jobs_are_flagged(problem, template, chi2_prop, monkeypatch):
    real = chi2_prop.query

    def flaky(x_q, bound, keep_history=False):
        if bound == "upper" and float(np.ravel(x_q)[0]) > 0:
            raise DivergenceError("forced", step=3)
        return real(x_q, bound, keep_history)

    monkeypatch.setattr(chi2_prop, "query", flaky)
    band = picprop_band(problem, template, chi2_prop.config, [[-0.5], [0.5]], SPEC, propagator=chi2_prop)
    assert not band.complete
    assert np.isnan(band.upper[1]) and np.isfinite(band.lower[1])
    assert band.failures == [{"query": 1, "bound": "upper", "error": "DivergenceError: forced"}]


def test_config_and_query_validation(problem, template):
    region = point_region([0.0, 0.0])
    with pytest.raises(ValueError, match="unroll depth"):
        PicPropConfig(region, PinnConfig(inner_steps=5), HypergradConfig("reverse"), unroll_depth=10)
    with pytest.raises(ValueError):
        PicPropConfig(region, meta_steps=0)
    with pytest.raises(ValueError):
        PicPropConfig(region, inner_schedule=(1, 2), meta_steps=3)
    with pytest.raises(ValueError, match="dimension"):
        Propagator(problem, template, PicPropConfig(point_region([0.0])), SPEC)
    prop = Propagator(problem, template, PicPropConfig(region, PinnConfig(warmup_steps=1, inner_steps=1), meta_steps=1), SPEC)
    with pytest.raises(ValueError, match="outside"):
        prop.query([1.5], "lower")
    with pytest.raises(ValueError):
        prop.query([0.0], "middle")
    with pytest.raises(ValueError, match="empty"):
        picprop_band(problem, template, prop.config, np.zeros((0, 1)), SPEC, propagator=prop)


def test_reverse_hypergradient_runs_and_stays_feasible(problem, template):
    region = chi_squared_region([0.0, 0.0], 0.05**2 * np.eye(2), 0.95)
    cfg = PicPropConfig(
        region,
        PinnConfig(warmup_steps=500, inner_steps=20),
        HypergradConfig("reverse"),
        meta_lr=0.5,
        meta_steps=4,
        unroll_depth=10,
        grad_clip=1.0,
    )
    r = Propagator(problem, template, cfg, NetworkSpec(1, 8, 2)).query([0.9], "upper", keep_history=True)
    assert np.all(region.contains(r.z_history))
    assert len(r.diagnostics["hypergrad_norms"]) == 4
