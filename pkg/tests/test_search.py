import numpy as np
import pytest

from picprop.approximator import NetworkSpec
from picprop.pinn import PinnConfig
from picprop.problems import clean_dataset, pedagogical
from picprop.regions import chi_squared_region, point_region
from picprop.search import ExhaustiveSearch, exhaustive_search, trial_sample

QUERIES = np.linspace(-1, 1, 5)[:, None]
SPEC = NetworkSpec(1, 16, 2)


@pytest.fixture(scope="module")
def setup():
    problem = pedagogical()
    ds = clean_dataset(problem, {"collocation": 32})
    region = chi_squared_region([0.0, 0.0], 0.05**2 * np.eye(2), 0.95)
    return problem, ds, region


@pytest.fixture(scope="module")
def search(setup):
    problem, ds, region = setup
    es = ExhaustiveSearch(problem, ds, region, PinnConfig(warmup_steps=100), SPEC, QUERIES, seed=5, warm_start_steps=500)
    return es.run(12)


def test_trial_samples_do_not_depend_on_run_length(setup):
    region = setup[2]
    a = [trial_sample(region, 1, i) for i in range(6)]
    np.testing.assert_array_equal(a[3], trial_sample(region, 1, 3))
    assert not np.array_equal(trial_sample(region, 1, 3), trial_sample(region, 2, 3))
    assert all(region.contains(z) for z in a)


def test_single_trial_band_is_that_solution(search):
    band = search.band(1)
    np.testing.assert_array_equal(band.lower, band.upper)
    np.testing.assert_array_equal(band.lower, search.records[0].predictions)


def test_nested_trials_widen_band(search):
    widths = np.stack([search.band(t).width for t in (1, 2, 4, 8, 12)])
    assert np.all(np.diff(widths, axis=0) >= 0)


def test_band_is_min_max_over_trials(search):
    preds = search.predictions(12)
    band = search.band(12, eta=0.05)
    np.testing.assert_allclose(band.lower, preds.min(0) - 0.05)
    np.testing.assert_allclose(band.upper, preds.max(0) + 0.05)
    assert band.provenance["effective_trials"] == 12


def test_trial_samples_are_members(search):
    z = search.trial_table(12)["z"]
    assert np.all(search.region.contains(z))


def test_cached_trials_are_reused(search):
    before = {k: v.predictions.copy() for k, v in search.records.items()}
    search.run(12)
    for k, v in before.items():
        np.testing.assert_array_equal(search.records[k].predictions, v)


def test_worker_count_does_not_change_results(setup):
    problem, ds, region = setup
    cfg = PinnConfig(warmup_steps=50)
    a = exhaustive_search(problem, ds, region, 6, cfg, QUERIES, seed=2, spec=SPEC, workers=1)
    b = exhaustive_search(problem, ds, region, 6, cfg, QUERIES, seed=2, spec=SPEC, workers=3)
    np.testing.assert_array_equal(a.lower, b.lower)
    np.testing.assert_array_equal(a.upper, b.upper)


def test_diverging_trials_are_skipped(setup):
    problem, ds, _ = setup
    region = chi_squared_region([0.0, 0.0], 0.05**2 * np.eye(2), 0.95)
    es = ExhaustiveSearch(problem, ds, region, PinnConfig(optimizer="sgd", lr=50.0, warmup_steps=50), SPEC, QUERIES)
    with pytest.raises(RuntimeError, match="every trial diverged"):
        es.band(3)
    assert all(r.error for r in es.records.values())


def test_point_region_collapses_band(setup):
    problem, ds, _ = setup
    band = exhaustive_search(problem, ds, point_region([0.0, 0.0]), 4, PinnConfig(warmup_steps=50), QUERIES, spec=SPEC)
    np.testing.assert_array_equal(band.width, 0.0)
