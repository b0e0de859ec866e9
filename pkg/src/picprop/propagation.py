"""Per-query bi-level propagation of a boundary-data confidence region.

For a query point the boundary values ``z`` are moved inside the region to
push the trained network's prediction down (lower bound) or up (upper
bound). Each meta step warm-starts the inner training from the previous
state, computes the hypergradient of the prediction with respect to ``z`` and
takes a projected step.
"""

from __future__ import annotations

import logging
import threading
from dataclasses import dataclass, field
from typing import Any

import jax
import jax.numpy as jnp
import numpy as np

from .approximator import NetworkSpec, apply
from .band import CiBand, config_hash, run_jobs
from .hypergrad import HypergradConfig, HypergradError, aid_traced, check_aid, unrolled_traced
from .pinn import DivergenceError, OptState, PinnConfig, PinnSystem, fresh_state
from .problems import BoundaryDataset, PdeProblem
from .regions import ConfidenceRegion
from .stats import moving_average

log = logging.getLogger(__name__)

BOUNDS = ("lower", "upper")


@dataclass(frozen=True)
class PicPropConfig:
    region: ConfidenceRegion
    pinn: PinnConfig = field(default_factory=PinnConfig)
    hypergrad: HypergradConfig = field(default_factory=HypergradConfig)
    meta_optimizer: str = "sgd"
    meta_lr: float = 0.01
    meta_steps: int = 50
    inner_schedule: tuple[int, ...] | None = None
    unroll_depth: int | None = None  # reverse only; defaults to the inner step count
    eta: float = 0.0
    final_steps: int | None = None  # inner steps at the last z; defaults to the last schedule entry
    meta_betas: tuple[float, float] = (0.9, 0.999)
    meta_eps: float = 1e-8
    grad_clip: float | None = None  # cap on the hypergradient norm per meta step

    def __post_init__(self):
        if not self.meta_lr > 0:
            raise ValueError("meta learning rate must be positive")
        if self.meta_steps < 1:
            raise ValueError("meta_steps must be >= 1")
        if self.meta_optimizer not in ("sgd", "adam"):
            raise ValueError(f"unknown meta optimizer {self.meta_optimizer!r}")
        if self.eta < 0:
            raise ValueError("eta must be nonnegative")
        if self.grad_clip is not None and not self.grad_clip > 0:
            raise ValueError("grad_clip must be positive")
        if self.inner_schedule is not None:
            sched = tuple(int(n) for n in self.inner_schedule)
            if len(sched) != self.meta_steps:
                raise ValueError("inner_schedule must have one entry per meta step")
            if min(sched) < 0:
                raise ValueError("inner steps must be nonnegative")
            object.__setattr__(self, "inner_schedule", sched)
        if self.hypergrad.method == "reverse":
            depth = self.depth
            if depth < 1 or depth > min(self.schedule):
                raise ValueError(f"unroll depth {depth} must lie in [1, min inner steps]")

    @property
    def schedule(self) -> tuple[int, ...]:
        return self.inner_schedule or (self.pinn.inner_steps,) * self.meta_steps

    @property
    def depth(self) -> int:
        return self.unroll_depth if self.unroll_depth is not None else min(self.schedule)

    def to_dict(self) -> dict:
        return {
            "region": self.region.to_dict(),
            "pinn": self.pinn.__dict__,
            "hypergrad": self.hypergrad.__dict__,
            "meta_optimizer": self.meta_optimizer,
            "meta_lr": self.meta_lr,
            "meta_steps": self.meta_steps,
            "inner_schedule": list(self.schedule),
            "unroll_depth": self.unroll_depth,
            "eta": self.eta,
            "final_steps": self.final_steps,
            "grad_clip": self.grad_clip,
        }


@dataclass
class QueryResult:
    bound: str
    query: np.ndarray
    value: float  # bound value, including the eta padding
    z: np.ndarray  # final boundary values
    prediction: float  # u at the query for the final z
    best_value: float
    best_z: np.ndarray
    trajectory: np.ndarray  # prediction before each meta update, then the final one
    z_history: np.ndarray | None = None
    theta: np.ndarray | None = None
    diagnostics: dict = field(default_factory=dict)


class Propagator:
    """Compiled bi-level machinery shared by every query on one dataset layout.

    The warmup state at the region center is computed once and reused by all
    jobs; each job then carries its own copy of the optimizer state.
    """

    def __init__(self, problem: PdeProblem, dataset: BoundaryDataset, config: PicPropConfig, spec: NetworkSpec):
        if config.region.dim != dataset.n_noisy:
            raise ValueError(f"region dimension {config.region.dim} != number of noisy values {dataset.n_noisy}")
        self.problem = problem
        self.dataset = dataset
        self.config = config
        self.spec = spec
        self.system = PinnSystem(problem, dataset, spec, config.pinn)
        self._warm: OptState | None = None
        self._lock = threading.Lock()
        hg = config.hypergrad
        sys_ = self.system
        lr = config.pinn.lr

        def upper(theta, xq):
            return apply(spec, theta, xq[None, :])[0]

        if hg.method == "reverse":

            def reverse(state, z, xq, n):
                return unrolled_traced(sys_._step, lambda th: upper(th, xq), state, z, n, config.depth)

            self._reverse = jax.jit(reverse, static_argnums=3)
        else:

            def aid(theta, z, xq):
                return aid_traced(sys_._loss, lambda th: upper(th, xq), theta, z, hg, lr)

            self._aid = jax.jit(aid)
        self._upper = jax.jit(upper)

    def warm_state(self) -> OptState:
        with self._lock:
            if self._warm is None:
                z0 = self.config.region.center
                self._warm = self.system.train(z0, self.config.pinn.warmup_steps).state
            return self._warm

    def _reset(self, state: OptState) -> OptState:
        return fresh_state(state.theta) if self.config.pinn.reset_optimizer else state

    def query(self, x_q, bound: str, keep_history: bool = False) -> QueryResult:
        if bound not in BOUNDS:
            raise ValueError(f"bound must be one of {BOUNDS}")
        cfg = self.config
        region = cfg.region
        x_q = np.asarray(x_q, dtype=np.float64).ravel()
        if x_q.shape[0] != self.problem.dim:
            raise ValueError(f"query has {x_q.shape[0]} coordinates, problem has {self.problem.dim}")
        if not self.problem.contains(x_q):
            raise ValueError(f"query {x_q.tolist()} lies outside the domain")
        sign = -1.0 if bound == "lower" else 1.0
        xq = jnp.asarray(x_q, self.system.dtype)
        state = self.warm_state()
        z = region.center.copy()
        m = np.zeros_like(z)
        v = np.zeros_like(z)
        b1, b2 = cfg.meta_betas
        traj, zs, warns = [], [z.copy()], []
        diag: dict[str, Any] = {"hypergrad_norms": [], "clipped_steps": 0}

        for k, n in enumerate(cfg.schedule):
            zj = self.system.cast_z(z)
            state = self._reset(state)
            if cfg.hypergrad.method == "reverse":
                pre = n - cfg.depth
                if pre:
                    state, _ = self.system.run(state, zj, pre)
                value, g, state = self._reverse(state, zj, xq, cfg.depth)
                if not bool(jnp.all(jnp.isfinite(state.theta))) or not np.isfinite(float(value)):
                    raise DivergenceError(f"inner training diverged during meta step {k}", step=k)
            else:
                state, _ = self.system.run(state, zj, n)
                g, d = self._aid(state.theta, zj, xq)
                try:
                    w = check_aid(d, cfg.hypergrad)
                except HypergradError as exc:
                    raise type(exc)(f"meta step {k}: {exc}") from exc
                if w and not warns:
                    log.debug("meta step %d: %s", k, w[0])
                warns.extend(w)
                value = self._upper(state.theta, xq)
            g = np.asarray(g, dtype=np.float64)
            if not np.all(np.isfinite(g)):
                raise HypergradError(f"non-finite hypergradient at meta step {k}")
            traj.append(float(value))
            gnorm = float(np.linalg.norm(g))
            diag["hypergrad_norms"].append(gnorm)
            if cfg.grad_clip is not None and gnorm > cfg.grad_clip:
                g = g * (cfg.grad_clip / gnorm)
                diag["clipped_steps"] += 1
            step_dir = sign * g  # ascend for upper, descend for lower
            if cfg.meta_optimizer == "sgd":
                z = z + cfg.meta_lr * step_dir
            else:
                m = b1 * m + (1 - b1) * step_dir
                v = b2 * v + (1 - b2) * step_dir**2
                mhat = m / (1 - b1 ** (k + 1))
                vhat = v / (1 - b2 ** (k + 1))
                z = z + cfg.meta_lr * mhat / (np.sqrt(vhat) + cfg.meta_eps)
            z = region.project(z)
            zs.append(z.copy())

        final_n = cfg.final_steps if cfg.final_steps is not None else cfg.schedule[-1]
        state, _ = self.system.run(self._reset(state), self.system.cast_z(z), final_n)
        pred = float(self._upper(state.theta, xq))
        traj.append(pred)
        traj = np.asarray(traj)
        # trajectory[k] belongs to zs[k] (the z the inner phase trained on)
        pick = np.argmin if bound == "lower" else np.argmax
        best = int(pick(traj))
        diag["smoothed_trend"] = float(np.diff(moving_average(traj, 5))[-1]) if len(traj) > 5 else 0.0
        diag["stationarity_warnings"] = len(warns)
        return QueryResult(
            bound=bound,
            query=x_q,
            value=pred + sign * cfg.eta,
            z=z,
            prediction=pred,
            best_value=float(traj[best]) + sign * cfg.eta,
            best_z=zs[best],
            trajectory=traj,
            z_history=np.asarray(zs) if keep_history else None,
            theta=np.asarray(state.theta),
            diagnostics=diag,
        )


def picprop_query(
    problem: PdeProblem,
    dataset: BoundaryDataset,
    config: PicPropConfig,
    x_q,
    bound: str = "lower",
    spec: NetworkSpec | None = None,
) -> QueryResult:
    spec = spec or NetworkSpec(problem.dim, 32, 2)
    return Propagator(problem, dataset, config, spec).query(x_q, bound)


def picprop_band(
    problem: PdeProblem,
    dataset: BoundaryDataset,
    config: PicPropConfig,
    queries,
    spec: NetworkSpec | None = None,
    workers: int = 1,
    propagator: Propagator | None = None,
    use_best: bool = False,
    keep_results: bool = False,
) -> CiBand:
    """Lower and upper bounds at every query; failed jobs leave NaN and are listed in ``failures``."""
    queries = np.atleast_2d(np.asarray(queries, dtype=np.float64))
    if queries.shape[0] == 0:
        raise ValueError("query set is empty")
    if queries.shape[1] != problem.dim and queries.shape[0] == problem.dim and problem.dim == 1:
        queries = queries.T
    spec = spec or NetworkSpec(problem.dim, 32, 2)
    prop = propagator or Propagator(problem, dataset, config, spec)
    prop.warm_state()
    jobs = [(i, b) for i in range(len(queries)) for b in BOUNDS]

    def job(item):
        i, b = item
        try:
            return prop.query(queries[i], b)
        except (DivergenceError, HypergradError, FloatingPointError) as exc:
            log.warning("query %d (%s) failed: %s", i, b, exc)
            return exc

    results = run_jobs(job, jobs, workers)
    lower = np.full(len(queries), np.nan)
    upper = np.full(len(queries), np.nan)
    failures, trajectories, kept = [], {"lower": [], "upper": []}, []
    for (i, b), r in zip(jobs, results):
        if isinstance(r, Exception):
            failures.append({"query": i, "bound": b, "error": f"{type(r).__name__}: {r}"})
            trajectories[b].append(None)
            continue
        val = r.best_value if use_best else r.value
        (lower if b == "lower" else upper)[i] = val
        trajectories[b].append(r.trajectory.tolist())
        kept.append(r)
    band = CiBand(
        queries,
        lower,
        upper,
        eta=config.eta,
        method="picprop",
        coords=problem.coords,
        provenance={
            "method": "picprop",
            "config_hash": config_hash(config.to_dict()),
            "seed": config.pinn.seed,
            "return": "best" if use_best else "last",
        },
        trajectories=trajectories,
        failures=failures,
    )
    if keep_results:
        band.results = kept  # type: ignore[attr-defined]
    return band
