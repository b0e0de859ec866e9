"""Exhaustive-search reference bands: sample the region, solve each sample, take min/max."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .approximator import NetworkSpec
from .band import CiBand, config_hash, run_jobs
from .pinn import DivergenceError, OptState, PinnConfig, PinnSystem
from .problems import BoundaryDataset, PdeProblem
from .regions import ConfidenceRegion

log = logging.getLogger(__name__)


def trial_sample(region: ConfidenceRegion, seed: int, index: int) -> np.ndarray:
    """Sample for trial ``index``; independent of how many trials are run."""
    return region.sample(np.random.default_rng([seed, index]))


@dataclass
class TrialRecord:
    index: int
    z: np.ndarray
    predictions: np.ndarray | None  # None when the trial diverged
    error: str | None = None


@dataclass
class ExhaustiveSearch:
    """Trains one network per sampled boundary configuration.

    Every trial starts from the same initialization, so the solver is a
    deterministic function of ``z``. With ``warm_start_steps`` set, the
    shared start is a network trained that long at the region center, and
    each trial fine-tunes for ``config.warmup_steps``.
    """

    problem: PdeProblem
    dataset: BoundaryDataset
    region: ConfidenceRegion
    config: PinnConfig
    spec: NetworkSpec
    queries: np.ndarray
    seed: int = 0
    warm_start_steps: int | None = None
    records: dict[int, TrialRecord] = field(default_factory=dict)

    def __post_init__(self):
        if self.region.dim != self.dataset.n_noisy:
            raise ValueError(f"region dimension {self.region.dim} != number of noisy values {self.dataset.n_noisy}")
        self.queries = np.atleast_2d(np.asarray(self.queries, dtype=np.float64))
        self.system = PinnSystem(self.problem, self.dataset, self.spec, self.config)
        self._start: OptState | None = None

    def start_state(self) -> OptState:
        if self._start is None:
            state = self.system.initial_state()
            if self.warm_start_steps:
                state, _ = self.system.run(state, self.region.center, self.warm_start_steps)
            self._start = state
        return self._start

    def _trial(self, index: int) -> TrialRecord:
        z = trial_sample(self.region, self.seed, index)
        if not self.region.contains(z):
            raise AssertionError(f"trial {index} sample left the region")
        try:
            state, _ = self.system.run(self.start_state(), z, self.config.warmup_steps)
        except DivergenceError as exc:
            log.warning("trial %d diverged and is skipped: %s", index, exc)
            return TrialRecord(index, z, None, str(exc))
        return TrialRecord(index, z, self.system.evaluate(state.theta, self.queries))

    def run(self, trials: int, workers: int = 1) -> "ExhaustiveSearch":
        """Make sure trials ``0..trials-1`` are solved; cached trials are reused."""
        if trials < 1:
            raise ValueError("trials must be >= 1")
        self.start_state()
        todo = [t for t in range(trials) if t not in self.records]
        for rec in run_jobs(self._trial, todo, workers):
            self.records[rec.index] = rec
        return self

    def predictions(self, trials: int) -> np.ndarray:
        self.run(trials)
        ok = [self.records[t].predictions for t in range(trials) if self.records[t].predictions is not None]
        if not ok:
            raise RuntimeError("every trial diverged")
        return np.stack(ok)

    def band(self, trials: int, eta: float = 0.0) -> CiBand:
        preds = self.predictions(trials)
        failures = [
            {"trial": t, "error": self.records[t].error} for t in range(trials) if self.records[t].predictions is None
        ]
        return CiBand(
            self.queries,
            preds.min(axis=0) - eta,
            preds.max(axis=0) + eta,
            eta=eta,
            method="es",
            coords=self.problem.coords,
            provenance={
                "method": "es",
                "config_hash": config_hash(
                    {"pinn": self.config.__dict__, "region": self.region.to_dict(), "warm": self.warm_start_steps}
                ),
                "seed": self.seed,
                "trials": trials,
                "effective_trials": len(preds),
            },
            failures=failures,
        )

    def trial_table(self, trials: int) -> dict:
        """Per-trial samples and predictions, for audits."""
        recs = [self.records[t] for t in range(trials)]
        return {
            "z": np.stack([r.z for r in recs]),
            "predictions": np.stack(
                [r.predictions if r.predictions is not None else np.full(len(self.queries), np.nan) for r in recs]
            ),
        }


def exhaustive_search(
    problem: PdeProblem,
    dataset: BoundaryDataset,
    region: ConfidenceRegion,
    trials: int,
    config: PinnConfig,
    queries,
    seed: int = 0,
    spec: NetworkSpec | None = None,
    eta: float = 0.0,
    workers: int = 1,
    warm_start_steps: int | None = None,
) -> CiBand:
    spec = spec or NetworkSpec(problem.dim, 32, 2)
    es = ExhaustiveSearch(problem, dataset, region, config, spec, queries, seed, warm_start_steps)
    return es.run(trials, workers).band(trials, eta)
