"""Amortized bands: one network u(x_q, x, s) fit to propagated solution fields.

``s = -1`` selects the lower-bound field and ``s = +1`` the upper one. The
loss mixes the mismatch at the query itself (weight ``1 - lam``) with the
mismatch over the whole collocation grid (weight ``lam``); ``lam = 0`` fits
only the diagonal.
"""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import jax
import jax.numpy as jnp
import numpy as np

from .approximator import NetworkSpec, ParamVector, apply, init_params
from .band import CiBand, config_hash, run_jobs
from .pinn import DTYPES
from .propagation import BOUNDS, PicPropConfig, Propagator
from .problems import BoundaryDataset, PdeProblem

log = logging.getLogger(__name__)

LAMBDA_GRID = (0.0, 0.25, 0.5, 0.75, 1.0)


class BandOrderWarning(UserWarning):
    pass


@dataclass
class Targets:
    """Propagated solutions for each training query.

    ``fields[s]`` has shape (K, G): the network trained at the optimized
    boundary values for bound ``s`` evaluated on the grid; ``at_query[s]`` is
    that network's value at its own query.
    """

    queries: np.ndarray
    grid: np.ndarray
    z: dict[str, np.ndarray]
    fields: dict[str, np.ndarray]
    at_query: dict[str, np.ndarray]
    failures: list = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.queries)

    def subset(self, idx) -> "Targets":
        idx = np.asarray(idx)
        pick = lambda d: {k: v[idx] for k, v in d.items()}  # noqa: E731
        return Targets(self.queries[idx], self.grid, pick(self.z), pick(self.fields), pick(self.at_query))

    def to_npz(self, path: str | Path) -> None:
        arrays = {"queries": self.queries, "grid": self.grid}
        for s in BOUNDS:
            arrays[f"z_{s}"] = self.z[s]
            arrays[f"fields_{s}"] = self.fields[s]
            arrays[f"at_query_{s}"] = self.at_query[s]
        np.savez(path, **arrays)

    @classmethod
    def from_npz(cls, path: str | Path) -> "Targets":
        d = np.load(path)
        return cls(
            d["queries"],
            d["grid"],
            {s: d[f"z_{s}"] for s in BOUNDS},
            {s: d[f"fields_{s}"] for s in BOUNDS},
            {s: d[f"at_query_{s}"] for s in BOUNDS},
        )


def collect_targets(
    problem: PdeProblem,
    dataset: BoundaryDataset,
    config: PicPropConfig,
    queries,
    spec: NetworkSpec,
    grid=None,
    workers: int = 1,
    retrain: bool = False,
    propagator: Propagator | None = None,
) -> Targets:
    """Run propagation at each query and record the solution fields.

    By default the fields come from the final inner state of each run.
    ``retrain=True`` instead trains a fresh network at the optimized boundary
    values for the warmup budget.
    """
    queries = np.atleast_2d(np.asarray(queries, dtype=np.float64))
    if len(queries) < 1:
        raise ValueError("need at least one query")
    grid = dataset.force_points if grid is None else np.atleast_2d(np.asarray(grid, dtype=np.float64))
    prop = propagator or Propagator(problem, dataset, config, spec)
    prop.warm_state()
    jobs = [(i, s) for i in range(len(queries)) for s in BOUNDS]
    results = run_jobs(lambda it: prop.query(queries[it[0]], it[1]), jobs, workers)
    K, G = len(queries), len(grid)
    z = {s: np.zeros((K, config.region.dim)) for s in BOUNDS}
    fields = {s: np.zeros((K, G)) for s in BOUNDS}
    at_q = {s: np.zeros(K) for s in BOUNDS}
    sysm = prop.system
    for (i, s), r in zip(jobs, results):
        if not config.region.contains(r.z):
            raise AssertionError(f"optimized boundary values for query {i} ({s}) left the region")
        theta = r.theta
        if retrain:
            theta = sysm.train(r.z, config.pinn.warmup_steps).params.values
        z[s][i] = r.z
        fields[s][i] = sysm.evaluate(theta, grid)
        at_q[s][i] = float(sysm.evaluate(theta, queries[i : i + 1])[0])
    return Targets(queries, grid, z, fields, at_q)


@dataclass(frozen=True)
class EffiConfig:
    lam: float = 1.0
    selection: str = "fixed"  # or "validation"
    lambdas: tuple[float, ...] = LAMBDA_GRID
    val_fraction: float = 0.1
    hidden_width: int = 32
    hidden_depth: int = 2
    steps: int = 20000
    lr: float = 1e-3
    seed: int = 0
    dtype: str = "float64"

    def __post_init__(self):
        if not 0.0 <= self.lam <= 1.0:
            raise ValueError(f"lam must lie in [0, 1], got {self.lam}")
        if any(not 0.0 <= v <= 1.0 for v in self.lambdas):
            raise ValueError("candidate lambdas must lie in [0, 1]")
        if self.selection not in ("fixed", "validation"):
            raise ValueError(f"unknown lambda selection mode {self.selection!r}")
        if not 0.0 < self.val_fraction < 1.0:
            raise ValueError("val_fraction must lie in (0, 1)")
        if self.steps < 0 or not self.lr > 0:
            raise ValueError("steps must be nonnegative and lr positive")


@dataclass(eq=False)
class MetaModel:
    params: ParamVector
    lam: float
    losses: np.ndarray = field(default_factory=lambda: np.zeros(0), repr=False)
    selection: dict = field(default_factory=dict)

    @property
    def spec(self) -> NetworkSpec:
        return self.params.spec

    @property
    def query_dim(self) -> int:
        return (self.spec.input_dim - 1) // 2

    def predict(self, x_q, x, indicator) -> np.ndarray:
        x_q = np.atleast_2d(np.asarray(x_q, dtype=np.float64))
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        s = np.broadcast_to(np.asarray(indicator, dtype=np.float64), (len(x),))
        if not np.all(np.abs(s) == 1.0):
            raise ValueError("indicator must be -1 or +1")
        inp = np.concatenate([np.broadcast_to(x_q, x.shape), x, s[:, None]], axis=1)
        return np.asarray(apply(self.spec, jnp.asarray(self.params.values), jnp.asarray(inp)))

    def save(self, path: str | Path) -> None:
        self.params.save(path)

    @classmethod
    def load(cls, path: str | Path, lam: float = float("nan")) -> "MetaModel":
        return cls(ParamVector.load(path), lam)


def meta_spec(query_dim: int, config: EffiConfig) -> NetworkSpec:
    return NetworkSpec(2 * query_dim + 1, config.hidden_width, config.hidden_depth)


def _meta_inputs(targets: Targets):
    """Stacked inputs for (query, grid point, sign) and the diagonal rows."""
    K, G = len(targets.queries), len(targets.grid)
    d = targets.queries.shape[1]
    rows, vals, diag_rows, diag_vals = [], [], [], []
    for s, sign in (("lower", -1.0), ("upper", 1.0)):
        xq = np.repeat(targets.queries, G, axis=0)
        x = np.tile(targets.grid, (K, 1))
        rows.append(np.concatenate([xq, x, np.full((K * G, 1), sign)], axis=1))
        vals.append(targets.fields[s].reshape(-1))
        diag_rows.append(np.concatenate([targets.queries, targets.queries, np.full((K, 1), sign)], axis=1))
        diag_vals.append(targets.at_query[s])
    field_in = np.concatenate(rows).reshape(2, K, G, 2 * d + 1)
    field_out = np.concatenate(vals).reshape(2, K, G)
    return field_in, field_out, np.concatenate(diag_rows), np.concatenate(diag_vals)


def effi_loss(spec: NetworkSpec, psi, field_in, field_out, diag_in, diag_out, lam):
    """(1/2K) sum over queries and bounds of (1-lam) diag^2 + lam mean_x field^2."""
    diag_err = apply(spec, psi, diag_in) - diag_out
    diag_term = jnp.mean(diag_err**2)
    if isinstance(lam, (int, float)) and lam == 0.0:
        return diag_term
    pred = apply(spec, psi, field_in.reshape(-1, field_in.shape[-1])).reshape(field_out.shape)
    field_term = jnp.mean((pred - field_out) ** 2)
    return (1.0 - lam) * diag_term + lam * field_term


def train_meta(targets: Targets, config: EffiConfig, lam: float | None = None) -> MetaModel:
    """Fit the meta-model; with ``selection='validation'`` pick lam on held-out queries first."""
    if len(targets) < 1:
        raise ValueError("targets are empty")
    if lam is None and config.selection == "validation":
        return _select_and_train(targets, config)
    lam = config.lam if lam is None else float(lam)
    if not 0.0 <= lam <= 1.0:
        raise ValueError(f"lam must lie in [0, 1], got {lam}")
    dt = DTYPES[config.dtype]
    spec = meta_spec(targets.queries.shape[1], config)
    fi, fo, di, do = (jnp.asarray(a, dt) for a in _meta_inputs(targets))
    loss = lambda psi: effi_loss(spec, psi, fi, fo, di, do, lam)  # noqa: E731
    psi = jnp.asarray(init_params(spec, config.seed, dt).values)
    psi, losses = _adam(loss, psi, config.steps, config.lr)
    losses = np.asarray(losses)
    if not np.all(np.isfinite(losses)) or not bool(jnp.all(jnp.isfinite(psi))):
        raise FloatingPointError("meta-model training diverged")
    return MetaModel(ParamVector(spec, psi), lam, losses)


def _adam(loss, psi, steps: int, lr: float, b1=0.9, b2=0.999, eps=1e-8):
    vg = jax.value_and_grad(loss)

    def step(carry, _):
        p, m, v, t = carry
        val, g = vg(p)
        t = t + 1
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        p = p - lr * (m / (1 - b1**t)) / (jnp.sqrt(v / (1 - b2**t)) + eps)
        return (p, m, v, t), val

    @jax.jit
    def run(p):
        z = jnp.zeros_like(p)
        (p, *_), vals = jax.lax.scan(step, (p, z, z, jnp.zeros((), p.dtype)), None, length=steps)
        return p, vals

    return run(psi)


def _select_and_train(targets: Targets, config: EffiConfig) -> MetaModel:
    K = len(targets)
    if K < 2:
        raise ValueError("validation-split selection needs at least two queries")
    n_val = max(1, int(round(config.val_fraction * K)))
    perm = np.random.default_rng(config.seed).permutation(K)
    val, tr = perm[:n_val], perm[n_val:]
    train_t, val_t = targets.subset(tr), targets.subset(val)
    scores = {}
    for lam in config.lambdas:
        m = train_meta(train_t, config, lam)
        b = eval_band(m, val_t.queries)
        scores[lam] = float(
            np.mean((b.lower - val_t.at_query["lower"]) ** 2 + (b.upper - val_t.at_query["upper"]) ** 2) / 2
        )
    best = min(scores, key=lambda k: (scores[k], k))
    log.info("selected lam=%s from validation scores %s", best, scores)
    model = train_meta(targets, config, best)
    model.selection = {"scores": scores, "validation_queries": val.tolist(), "lam": best}
    return model


def eval_band(model: MetaModel, queries, eta: float = 0.0, method: str = "effipicprop") -> CiBand:
    """Diagonal evaluation u(x, x, -1) - eta and u(x, x, +1) + eta."""
    if eta < 0:
        raise ValueError("eta must be nonnegative")
    queries = np.atleast_2d(np.asarray(queries, dtype=np.float64))
    lo = model.predict(queries, queries, -1.0)
    hi = model.predict(queries, queries, 1.0)
    swap = lo > hi
    if swap.any():
        warnings.warn(
            f"meta-model bounds crossed at {int(swap.sum())} queries; swapped", BandOrderWarning, stacklevel=2
        )
        lo, hi = np.where(swap, hi, lo), np.where(swap, lo, hi)
    return CiBand(
        queries,
        lo - eta,
        hi + eta,
        eta=eta,
        method=method,
        coords=tuple(f"x{i}" for i in range(queries.shape[1])),
        provenance={
            "method": method,
            "lam": model.lam,
            "config_hash": config_hash({"spec": model.spec.__dict__, "lam": model.lam}),
            "swapped": int(swap.sum()),
        },
    )


def effipicprop_band(
    problem: PdeProblem,
    dataset: BoundaryDataset,
    config: PicPropConfig,
    effi: EffiConfig,
    train_queries,
    eval_queries,
    spec: NetworkSpec,
    workers: int = 1,
) -> tuple[CiBand, MetaModel, Targets]:
    targets = collect_targets(problem, dataset, config, train_queries, spec, workers=workers)
    model = train_meta(targets, effi)
    method = "simpicprop" if model.lam == 0.0 else "effipicprop"
    band = eval_band(model, eval_queries, config.eta, method)
    band.coords = problem.coords
    return band, model, targets
