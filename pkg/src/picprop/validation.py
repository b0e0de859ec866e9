"""Coverage checks: the closed-form linear toy model and replicated PINN studies."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import stats
from .approximator import NetworkSpec
from .band import CiBand, config_hash, run_jobs
from .pinn import PinnConfig, PinnSystem
from .problems import BoundaryDataset, NoiseSpec, PdeProblem, clean_dataset, sample_dataset
from .regions import ConfidenceRegion

log = logging.getLogger(__name__)

TOY_KINDS = ("normal_union", "chi2_joint")


def toy_critical_value(kind: str, p: float) -> float:
    level = stats.upper_critical_level(p)
    if kind == "normal_union":
        return stats.normal_quantile(level)
    if kind == "chi2_joint":
        return math.sqrt(stats.chi2_quantile(level, 2))
    raise ValueError(f"unknown toy interval kind {kind!r}; expected one of {TOY_KINDS}")


def toy_model(theta, x) -> np.ndarray:
    """(1 - x) theta_0 + x theta_1; broadcasts over leading axes of ``theta``."""
    theta = np.asarray(theta, dtype=np.float64)
    x = np.asarray(x, dtype=np.float64)
    return (1.0 - x) * theta[..., :1] + x * theta[..., 1:2]


def toy_intervals(Z, kind: str, p: float, x, k: float | None = None) -> CiBand:
    """Closed-form k-interval around the fitted line; ``k`` overrides the critical value."""
    x = np.asarray(x, dtype=np.float64).ravel()
    if np.any((x < 0) | (x > 1)):
        raise ValueError("toy grid must lie in [0, 1]")
    Z = np.asarray(Z, dtype=np.float64).ravel()
    if Z.shape != (2,):
        raise ValueError("observation must be a 2-vector")
    k = toy_critical_value(kind, p) if k is None else float(k)
    mid = (1.0 - x) * Z[0] + x * Z[1]
    half = k * np.sqrt(2.0 * x**2 - 2.0 * x + 1.0)
    return CiBand(x[:, None], mid - half, mid + half, method=f"toy-{kind}", coords=("x",), provenance={"k": k, "p": p})


@dataclass
class ConfidenceEstimate:
    proportion: float
    standard_error: float
    successes: int
    replications: int
    running: np.ndarray = field(repr=False, default_factory=lambda: np.zeros(0))

    def to_dict(self) -> dict:
        return {
            "J": self.replications,
            "successes": self.successes,
            "proportion": self.proportion,
            "standard_error": self.standard_error,
        }


def _estimate(hits: np.ndarray) -> ConfidenceEstimate:
    hits = np.asarray(hits, dtype=bool)
    J = len(hits)
    p_hat = float(hits.mean())
    running = np.cumsum(hits) / np.arange(1, J + 1)
    return ConfidenceEstimate(p_hat, stats.binomial_standard_error(p_hat, J), int(hits.sum()), J, running)


def empirical_confidence(
    interval: Callable[[np.ndarray, np.ndarray], CiBand],
    truth: Callable[[np.ndarray], np.ndarray],
    eps: float,
    replications: int,
    seed: int = 0,
    theta_star=(0.0, 0.0),
) -> ConfidenceEstimate:
    """Fraction of replications whose band strictly contains the truth on {0, eps, ..., floor(1/eps) eps}.

    Each replication draws Z ~ N(theta_star, I) and calls ``interval(Z, grid)``.
    """
    if replications < 1:
        raise ValueError("replications must be >= 1")
    if not eps > 0:
        raise ValueError("eps must be positive")
    grid = np.arange(int(math.floor(1.0 / eps + 1e-12)) + 1) * eps
    u = np.asarray(truth(grid))
    rng = np.random.default_rng(seed)
    Zs = rng.standard_normal((replications, 2)) + np.asarray(theta_star, dtype=np.float64)
    hits = np.array([bool(np.all(interval(Z, grid).contains(u, strict=True))) for Z in Zs])
    return _estimate(hits)


def toy_convergence(kind: str, p: float, eps: float, replications: int, seed: int = 0, theta_star=(0.0, 0.0), k: float | None = None) -> ConfidenceEstimate:
    """Vectorized empirical confidence of the toy k-interval."""
    k = toy_critical_value(kind, p) if k is None else float(k)
    grid = np.arange(int(math.floor(1.0 / eps + 1e-12)) + 1) * eps
    theta_star = np.asarray(theta_star, dtype=np.float64)
    rng = np.random.default_rng(seed)
    Zs = rng.standard_normal((replications, 2)) + theta_star
    mid = toy_model(Zs, grid)
    half = k * np.sqrt(2.0 * grid**2 - 2.0 * grid + 1.0)
    u = toy_model(theta_star, grid)
    hits = np.all((mid - half < u) & (u < mid + half), axis=1)
    return _estimate(hits)


# -- replicated PINN studies ---------------------------------------------------


@dataclass
class ValidityReport:
    replications: int
    successes: int
    proportion: float
    standard_error: float
    lower_bound: float  # one-sided binomial bound at ``confidence``
    confidence: float
    eta: float
    valid: np.ndarray = field(repr=False)
    config_hash: str = ""
    failures: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "J": self.replications,
            "successes": self.successes,
            "proportion": self.proportion,
            "standard_error": self.standard_error,
            "lower_bound": self.lower_bound,
            "bound_confidence": self.confidence,
            "eta": self.eta,
            "valid": self.valid.astype(int).tolist(),
            "config_hash": self.config_hash,
            "failures": self.failures,
        }


def clean_solver_error(problem: PdeProblem, config: PinnConfig, spec: NetworkSpec, grid, counts=None) -> float:
    """Max absolute error on ``grid`` of a network trained on clean boundary data."""
    if problem.exact_solution is None:
        raise ValueError(f"problem {problem.name!r} has no exact solution")
    ds = clean_dataset(problem, counts).template()
    system = PinnSystem(problem, ds, spec, config)
    res = system.train()
    grid = np.atleast_2d(np.asarray(grid, dtype=np.float64))
    return float(np.max(np.abs(system.evaluate(res.params.values, grid) - problem.exact_solution(grid))))


def picprop_validity_study(
    problem: PdeProblem,
    make_region: Callable[[BoundaryDataset], ConfidenceRegion],
    propagate: Callable[[BoundaryDataset, ConfidenceRegion, np.ndarray], CiBand],
    replications: int,
    grid,
    seed: int = 0,
    noise: NoiseSpec | None = None,
    eta: float = 0.0,
    counts=None,
    workers: int = 1,
    confidence: float = 0.99,
    provenance: dict | None = None,
) -> ValidityReport:
    """Resample the boundary data, rebuild region and band, count joint containment.

    ``make_region`` receives the raw dataset (with repeated observations);
    ``propagate`` receives the one-value-per-location template, the region and
    the grid, and returns a band without padding. ``eta`` is added here.
    """
    if replications < 1:
        raise ValueError("replications must be >= 1")
    if problem.exact_solution is None:
        raise ValueError(f"problem {problem.name!r} has no exact solution")
    noise = noise or NoiseSpec("gaussian", 0.05)
    grid = np.atleast_2d(np.asarray(grid, dtype=np.float64))
    if grid.shape[1] != problem.dim:
        grid = grid.reshape(-1, problem.dim)
    truth = problem.exact_solution(grid)

    def one(j):
        ds = sample_dataset(problem, noise, counts, seed=seed * 1_000_003 + j)
        region = make_region(ds)
        try:
            band = propagate(ds.template(), region, grid)
        except (FloatingPointError, RuntimeError) as exc:
            log.warning("replication %d failed: %s", j, exc)
            return None, f"{type(exc).__name__}: {exc}"
        ok = (band.lower - eta < truth) & (truth < band.upper + eta)
        return bool(np.all(ok)), None

    results = run_jobs(one, range(replications), workers)
    failures = [{"replication": j, "error": e} for j, (v, e) in enumerate(results) if v is None]
    valid = np.array([bool(v) for v, _ in results])
    succ = int(valid.sum())
    p_hat = succ / replications
    return ValidityReport(
        replications,
        succ,
        p_hat,
        stats.binomial_standard_error(p_hat, replications),
        stats.binomial_lower_bound(succ, replications, confidence),
        confidence,
        eta,
        valid,
        config_hash({"seed": seed, "noise": noise.to_dict(), "eta": eta, **(provenance or {})}),
        failures,
    )
