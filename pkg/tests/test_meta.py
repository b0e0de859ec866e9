import jax.numpy as jnp
import numpy as np
import pytest

from picprop.approximator import NetworkSpec, apply, init_params
from picprop.meta import (
    BandOrderWarning,
    EffiConfig,
    MetaModel,
    Targets,
    _meta_inputs,
    collect_targets,
    effi_loss,
    eval_band,
    meta_spec,
    train_meta,
)
from picprop.pinn import PinnConfig
from picprop.problems import clean_dataset, pedagogical
from picprop.propagation import PicPropConfig, Propagator
from picprop.regions import point_region

FAST = EffiConfig(hidden_width=16, steps=1500, lr=3e-3)


def synthetic_targets(K=6, G=25, lo=-0.1, hi=0.1):
    q = np.linspace(-1, 1, K)[:, None]
    grid = np.linspace(-1, 1, G)[:, None]
    base = np.sin(np.pi * grid[:, 0])
    fields = {"lower": np.tile(base + lo, (K, 1)), "upper": np.tile(base + hi, (K, 1))}
    at_q = {"lower": np.sin(np.pi * q[:, 0]) + lo, "upper": np.sin(np.pi * q[:, 0]) + hi}
    z = {s: np.zeros((K, 2)) for s in ("lower", "upper")}
    return Targets(q, grid, z, fields, at_q)


def test_zero_lambda_is_diagonal_only():
    t = synthetic_targets()
    spec = meta_spec(1, FAST)
    psi = jnp.asarray(init_params(spec, 0).values)
    fi, fo, di, do = (jnp.asarray(a) for a in _meta_inputs(t))
    diag = float(jnp.mean((apply(spec, psi, di) - do) ** 2))
    assert float(effi_loss(spec, psi, fi, fo, di, do, 0.0)) == pytest.approx(diag, rel=1e-12)
    # corrupting the field targets does not change the lam=0 loss
    assert float(effi_loss(spec, psi, fi, fo + 5.0, di, do, 0.0)) == float(effi_loss(spec, psi, fi, fo, di, do, 0.0))
    assert float(effi_loss(spec, psi, fi, fo + 5.0, di, do, 1.0)) != float(effi_loss(spec, psi, fi, fo, di, do, 1.0))


def test_same_seed_gives_identical_models():
    t = synthetic_targets()
    a = train_meta(t, FAST, lam=0.0)
    b = train_meta(t, FAST, lam=0.0)
    np.testing.assert_array_equal(a.params.values, b.params.values)
    assert a.lam == 0.0


def test_realizable_targets_are_fitted():
    cfg = EffiConfig(hidden_width=8, steps=6000, lr=3e-3)
    spec = meta_spec(1, cfg)
    teacher = MetaModel(init_params(spec, 11), 1.0)
    t = synthetic_targets(K=5, G=15)
    for s, sign in (("lower", -1.0), ("upper", 1.0)):
        for k in range(len(t)):
            t.fields[s][k] = teacher.predict(t.queries[k], t.grid, sign)
            t.at_query[s][k] = teacher.predict(t.queries[k], t.queries[k : k + 1], sign)[0]
    student = train_meta(t, cfg, lam=0.5)
    assert student.losses[-1] <= 1e-6


def test_padding_adds_exactly_twice_eta():
    model = train_meta(synthetic_targets(), FAST)
    q = np.linspace(-1, 1, 17)[:, None]
    a, b = eval_band(model, q), eval_band(model, q, eta=0.1)
    np.testing.assert_allclose(b.width - a.width, 0.2, atol=1e-12)
    with pytest.raises(ValueError):
        eval_band(model, q, eta=-0.1)


def test_indicator_must_be_sign():
    model = MetaModel(init_params(meta_spec(1, FAST), 0), 1.0)
    with pytest.raises(ValueError, match="indicator"):
        model.predict([0.0], [[0.0]], 0.5)


def test_crossed_bounds_are_swapped_with_warning():
    model = train_meta(synthetic_targets(lo=0.2, hi=-0.2), FAST)
    with pytest.warns(BandOrderWarning):
        band = eval_band(model, np.linspace(-1, 1, 9)[:, None])
    assert np.all(band.lower <= band.upper)
    assert band.provenance["swapped"] > 0


def test_checkpoint_roundtrip(tmp_path):
    model = train_meta(synthetic_targets(), FAST)
    model.save(tmp_path / "meta.npz")
    back = MetaModel.load(tmp_path / "meta.npz", lam=model.lam)
    q = np.linspace(-1, 1, 5)[:, None]
    np.testing.assert_array_equal(eval_band(back, q).lower, eval_band(model, q).lower)


def test_targets_roundtrip(tmp_path):
    t = synthetic_targets()
    t.to_npz(tmp_path / "t.npz")
    back = Targets.from_npz(tmp_path / "t.npz")
    for s in ("lower", "upper"):
        np.testing.assert_array_equal(back.fields[s], t.fields[s])
    np.testing.assert_array_equal(t.subset([1, 3]).queries, t.queries[[1, 3]])


def test_validation_selection_picks_from_grid():
    cfg = EffiConfig(hidden_width=16, steps=500, lr=3e-3, selection="validation")
    model = train_meta(synthetic_targets(K=10), cfg)
    assert model.lam in cfg.lambdas
    assert set(model.selection["scores"]) == set(cfg.lambdas)
    assert len(model.selection["validation_queries"]) == 1
    with pytest.raises(ValueError, match="two queries"):
        train_meta(synthetic_targets(K=1), cfg)


def test_config_validation():
    with pytest.raises(ValueError):
        EffiConfig(lam=1.5)
    with pytest.raises(ValueError):
        EffiConfig(selection="grid")
    with pytest.raises(ValueError):
        EffiConfig(lambdas=(0.0, 2.0))
    with pytest.raises(ValueError):
        train_meta(synthetic_targets(), FAST, lam=-0.1)


@pytest.fixture(scope="module")
def point_targets():
    problem = pedagogical()
    ds = clean_dataset(problem)
    cfg = PicPropConfig(point_region([0.0, 0.0]), PinnConfig(warmup_steps=2000, inner_steps=50), meta_steps=2)
    prop = Propagator(problem, ds, cfg, NetworkSpec(1, 32, 2))
    calls = []
    real = prop.query

    def counting(x_q, bound, keep_history=False):
        calls.append((float(np.ravel(x_q)[0]), bound))
        return real(x_q, bound, keep_history)

    prop.query = counting
    queries = np.linspace(-1, 1, 6)[:, None]
    targets = collect_targets(problem, ds, cfg, queries, prop.spec, propagator=prop)
    return targets, calls


def test_six_queries_run_twelve_propagations(point_targets):
    targets, calls = point_targets
    assert len(calls) == 12
    assert sorted(calls) == sorted((float(q), s) for q in np.linspace(-1, 1, 6) for s in ("lower", "upper"))


def test_point_region_targets_are_the_clean_solution(point_targets):
    targets, _ = point_targets
    np.testing.assert_array_equal(targets.fields["lower"], targets.fields["upper"])
    np.testing.assert_array_equal(targets.z["lower"], 0.0)
    exact = np.sin(np.pi * targets.grid[:, 0])
    assert np.max(np.abs(targets.fields["lower"] - exact)) <= 0.05
