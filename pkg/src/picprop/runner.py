"""Turns a validated run configuration into objects, executes it and persists the results."""

from __future__ import annotations

import csv
import datetime as _dt
import logging
import os
import platform
import time
from dataclasses import replace
from pathlib import Path

import jax
import numpy as np

from . import __version__
from .approximator import NetworkSpec
from .band import CiBand, config_hash, to_json_text
from .config import RunConfig, load_config
from .hypergrad import HypergradConfig, quadratic_hypergrads, quadratic_instance, relative_error
from .meta import EffiConfig, collect_targets, eval_band, train_meta
from .pinn import PinnConfig
from .problems import BoundaryDataset, NoiseSpec, PdeProblem, get_problem, sample_dataset
from .propagation import PicPropConfig, picprop_band
from .regions import ConfidenceRegion, fixed_region, point_region, region_from_observations
from .search import ExhaustiveSearch
from .validation import clean_solver_error, picprop_validity_study, toy_convergence, toy_intervals

log = logging.getLogger("picprop")

OUTPUT_ENV = "PICPROP_OUTPUT_ROOT"
DEFAULT_ROOT = "runs"


class PartialFailure(RuntimeError):
    def __init__(self, message: str, run_dir: Path):
        super().__init__(message)
        self.run_dir = run_dir


# -- factories --------------------------------------------------------------------


def build_problem(cfg: RunConfig) -> PdeProblem:
    return get_problem(cfg.problem.name, **cfg.problem.options)


def _counts(cfg: RunConfig) -> dict:
    counts = dict(cfg.problem.counts)
    for k, v in counts.items():
        if isinstance(v, list):
            counts[k] = tuple(v)
    return counts


def build_dataset(cfg: RunConfig, problem: PdeProblem, seed: int | None = None) -> BoundaryDataset:
    noise = NoiseSpec(cfg.problem.noise.kind, cfg.problem.noise.scale)
    return sample_dataset(problem, noise, _counts(cfg), cfg.problem.data_seed if seed is None else seed)


def build_region(cfg: RunConfig, dataset: BoundaryDataset) -> ConfidenceRegion:
    r = cfg.region
    if r.kind in ("chi2", "hotelling", "hoeffding"):
        _, obs = dataset.observation_matrix()
        return region_from_observations(obs, r.kind, r.p, r.sigma, r.support_half_width, None, r.one_sided)
    center = dataset.template().noisy_values
    if r.kind == "fixed":
        reg = fixed_region(center - r.half_width, center + r.half_width, r.p)
        return reg
    return point_region(center)


def network_spec(cfg: RunConfig, problem: PdeProblem) -> NetworkSpec:
    return NetworkSpec(problem.dim, cfg.problem.network.width, cfg.problem.network.depth)


def pinn_config(cfg: RunConfig) -> PinnConfig:
    o = cfg.optimizer.inner
    return PinnConfig(
        w_f=o.w_f,
        w_b=o.w_b,
        optimizer=o.name,
        lr=o.lr,
        warmup_steps=o.warmup_steps,
        inner_steps=o.inner_steps,
        seed=o.seed,
        reset_optimizer=o.reset,
        dtype=cfg.problem.dtype,
    )


def picprop_config(cfg: RunConfig, region: ConfidenceRegion) -> PicPropConfig:
    h = cfg.method.hypergrad
    meta = cfg.optimizer.meta
    return PicPropConfig(
        region=region,
        pinn=pinn_config(cfg),
        hypergrad=HypergradConfig(h.method, h.iterations, h.ns_scale, h.cg_tol, h.cg_strict),
        meta_optimizer=meta.name,
        meta_lr=meta.lr,
        meta_steps=meta.steps,
        unroll_depth=h.unroll_depth,
        eta=cfg.method.eta,
        grad_clip=meta.grad_clip,
        final_steps=meta.final_steps,
    )


def effi_config(cfg: RunConfig) -> EffiConfig:
    m = cfg.method
    sim = m.kind == "simpicprop" or (m.kind == "validity" and m.propagation == "simpicprop")
    return EffiConfig(
        lam=0.0 if sim else m.lam,
        selection="fixed" if sim else m.selection,
        hidden_width=m.meta_width or cfg.problem.network.width,
        hidden_depth=m.meta_depth or cfg.problem.network.depth,
        steps=m.meta_steps,
        lr=m.meta_lr,
        seed=cfg.optimizer.inner.seed,
        dtype=cfg.problem.dtype,
    )


# -- persistence ------------------------------------------------------------------


def output_root(cfg: RunConfig, override: str | Path | None = None) -> Path:
    if override is not None:
        return Path(override)
    env = os.environ.get(OUTPUT_ENV)
    if env:
        return Path(env)
    return Path(cfg.output.root or DEFAULT_ROOT)


def make_run_dir(root: Path, label: str) -> Path:
    stamp = _dt.datetime.now().strftime("%Y%m%d-%H%M%S-%f")
    path = root / f"{stamp}_{label}"
    path.mkdir(parents=True, exist_ok=False)
    return path


def _write_csv(path: Path, header: list[str], rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for r in rows:
            w.writerow([repr(float(v)) if isinstance(v, (float, np.floating)) else v for v in r])


def _write_json(path: Path, obj) -> None:
    path.write_text(to_json_text(obj))


# -- executors --------------------------------------------------------------------


def _picprop(cfg: RunConfig, run_dir: Path, workers: int) -> dict:
    problem = build_problem(cfg)
    ds = build_dataset(cfg, problem)
    tmpl = ds.template()
    region = build_region(cfg, ds)
    pcfg = picprop_config(cfg, region)
    spec = network_spec(cfg, problem)
    queries = cfg.queries.resolve()
    band = picprop_band(problem, tmpl, pcfg, queries, spec, workers, use_best=cfg.method.return_best)
    band.provenance["data_seed"] = cfg.problem.data_seed
    band.to_csv(run_dir / "band.csv")
    band.to_json(run_dir / "band.json")
    _write_json(run_dir / "trajectories.json", band.trajectories)
    region.to_json(run_dir / "region.json")
    return {"queries": len(band), "failures": band.failures, "mean_width": float(np.nanmean(band.width))}


def _es(cfg: RunConfig, run_dir: Path, workers: int) -> dict:
    problem = build_problem(cfg)
    ds = build_dataset(cfg, problem)
    tmpl = ds.template()
    region = build_region(cfg, ds)
    m = cfg.method
    es = ExhaustiveSearch(
        problem, tmpl, region, pinn_config(cfg), network_spec(cfg, problem), cfg.queries.resolve(),
        cfg.problem.data_seed,
        m.warm_start_steps,
    )
    es.run(m.trials, workers)
    widths = {}
    for c in [*[c for c in m.checkpoints if c < m.trials], m.trials]:
        b = es.band(c, m.eta)
        b.coords = problem.coords
        b.to_csv(run_dir / f"band_es_{c}.csv")
        widths[c] = float(np.mean(b.width))
    band = es.band(m.trials, m.eta)
    band.coords = problem.coords
    band.to_csv(run_dir / "band.csv")
    band.to_json(run_dir / "band.json")
    region.to_json(run_dir / "region.json")
    if m.save_trials:
        np.savez(run_dir / "trials.npz", **es.trial_table(m.trials))
    return {"trials": m.trials, "mean_width": widths, "skipped_trials": band.failures}


def _effi(cfg: RunConfig, run_dir: Path, workers: int) -> dict:
    problem = build_problem(cfg)
    ds = build_dataset(cfg, problem)
    tmpl = ds.template()
    region = build_region(cfg, ds)
    pcfg = picprop_config(cfg, region)
    spec = network_spec(cfg, problem)
    train_q = cfg.queries.resolve("train")
    eval_q = cfg.queries.resolve()
    eval_q = train_q if eval_q is None else eval_q
    targets = collect_targets(problem, tmpl, pcfg, train_q, spec, workers=workers, retrain=cfg.method.retrain_targets)
    model = train_meta(targets, effi_config(cfg))
    band = eval_band(model, eval_q, cfg.method.eta, cfg.method.kind)
    band.coords = problem.coords
    band.to_csv(run_dir / "band.csv")
    band.to_json(run_dir / "band.json")
    targets.to_npz(run_dir / "targets.npz")
    model.save(run_dir / "meta_model.npz")
    region.to_json(run_dir / "region.json")
    _write_json(run_dir / "selection.json", {"lam": model.lam, **model.selection})
    tq = CiBand(
        train_q,
        np.minimum(targets.at_query["lower"], targets.at_query["upper"]) - cfg.method.eta,
        np.maximum(targets.at_query["lower"], targets.at_query["upper"]) + cfg.method.eta,
        coords=problem.coords,
        method="picprop-targets",
    )
    tq.to_csv(run_dir / "band_targets.csv")
    return {"lam": model.lam, "queries": len(band), "mean_width": float(np.mean(band.width))}


def validity_propagator(cfg: RunConfig, problem: PdeProblem, spec: NetworkSpec):
    """Returns propagate(template, region, grid) -> CiBand for the configured method."""
    m = cfg.method

    def propagate(tmpl: BoundaryDataset, region: ConfidenceRegion, grid: np.ndarray) -> CiBand:
        pcfg = replace(picprop_config(cfg, region), eta=0.0)
        if m.propagation == "picprop":
            band = picprop_band(problem, tmpl, pcfg, grid, spec)
            if band.failures:
                raise RuntimeError(f"{len(band.failures)} propagation jobs failed")
            return band
        train_q = cfg.queries.resolve("train")
        targets = collect_targets(problem, tmpl, pcfg, train_q, spec, retrain=m.retrain_targets)
        model = train_meta(targets, effi_config(cfg))
        return eval_band(model, grid, 0.0)

    return propagate


def _validity(cfg: RunConfig, run_dir: Path, workers: int) -> dict:
    problem = build_problem(cfg)
    spec = network_spec(cfg, problem)
    m = cfg.method
    grid = cfg.queries.resolve()
    if grid is None:
        lo, hi = problem.lower[0], problem.upper[0]
        grid = np.linspace(lo, hi, m.grid_points)[:, None]
    eta = m.eta
    if m.measure_eta:
        eta = clean_solver_error(problem, pinn_config(cfg), spec, grid, _counts(cfg))
    noise = NoiseSpec(cfg.problem.noise.kind, cfg.problem.noise.scale)
    report = picprop_validity_study(
        problem,
        lambda ds: build_region(cfg, ds),
        validity_propagator(cfg, problem, spec),
        m.replications,
        grid,
        seed=cfg.problem.data_seed,
        noise=noise,
        eta=eta,
        counts=_counts(cfg),
        workers=workers,
        provenance={"config": cfg.model_dump()},
    )
    _write_json(run_dir / "validity.json", report.to_dict())
    return report.to_dict()


def _toy(cfg: RunConfig, run_dir: Path, workers: int) -> dict:
    m = cfg.method
    p = cfg.region.p
    seed = cfg.problem.data_seed
    curves = {k: toy_convergence(k, p, m.eps, m.replications, seed) for k in ("chi2_joint", "normal_union")}
    J = np.arange(1, m.replications + 1)
    _write_csv(
        run_dir / "convergence.csv",
        ["J", "chi2_joint", "normal_union"],
        zip(J, curves["chi2_joint"].running, curves["normal_union"].running),
    )
    Z = np.random.default_rng(seed).standard_normal(2)
    x = np.arange(int(np.floor(1.0 / m.eps + 1e-12)) + 1) * m.eps
    for k in ("chi2_joint", "normal_union"):
        toy_intervals(Z, k, p, x).to_csv(run_dir / f"band_toy_{k}.csv")
    return {k: v.to_dict() for k, v in curves.items()}


def _hypergrad_check(cfg: RunConfig, run_dir: Path, workers: int) -> dict:
    m = cfg.method
    rng = np.random.default_rng(cfg.problem.data_seed)
    rows = []
    for i in range(m.instances):
        dim = int(rng.integers(2, m.max_dim + 1))
        zdim = int(rng.integers(1, m.max_dim + 1))
        inst = quadratic_instance(rng, dim, zdim)
        est = quadratic_hypergrads(inst, ns_terms=max(m.hypergrad.iterations, 200), cg_tol=m.hypergrad.cg_tol)
        ref = inst.oracle()
        rows.append([i, dim, zdim, *(relative_error(est[k], ref) for k in ("reverse", "aid_ns", "aid_cg"))])
    _write_csv(run_dir / "hypergrad_check.csv", ["instance", "dim", "zdim", "reverse", "aid_ns", "aid_cg"], rows)
    arr = np.array([r[3:] for r in rows])
    return {"max_rel_error": dict(zip(("reverse", "aid_ns", "aid_cg"), arr.max(axis=0).tolist()))}


EXECUTORS = {
    "picprop": _picprop,
    "es": _es,
    "simpicprop": _effi,
    "effipicprop": _effi,
    "validity": _validity,
    "toy-linear": _toy,
    "hypergrad-check": _hypergrad_check,
}


def execute(cfg: RunConfig, run_dir: Path, workers: int | None = None, source_text: str | None = None) -> dict:
    """Run ``cfg`` inside an existing directory; writes snapshot, provenance, log and artifacts."""
    workers = workers or cfg.output.workers
    run_dir = Path(run_dir)
    if source_text is not None:
        (run_dir / "config.toml").write_text(source_text)
    _write_json(run_dir / "config.json", cfg.model_dump())
    handler = logging.FileHandler(run_dir / "run.log")
    handler.setFormatter(logging.Formatter("%(asctime)s %(levelname)s %(name)s: %(message)s"))
    log.addHandler(handler)
    log.setLevel(logging.INFO)
    prov = {
        "version": __version__,
        "kind": cfg.method.kind,
        "config_hash": config_hash(cfg.model_dump()),
        "data_seed": cfg.problem.data_seed,
        "init_seed": cfg.optimizer.inner.seed,
        "workers": workers,
        "python": platform.python_version(),
        "jax": jax.__version__,
        "numpy": np.__version__,
        "started": _dt.datetime.now().isoformat(timespec="seconds"),
    }
    t0 = time.perf_counter()
    try:
        log.info("run %s (%s)", cfg.method.kind, cfg.problem.name)
        summary = EXECUTORS[cfg.method.kind](cfg, run_dir, workers)
        failures = summary.get("failures") if isinstance(summary, dict) else None
        prov["status"] = "partial" if failures else "ok"
    except Exception as exc:
        prov["status"] = "failed"
        prov["error"] = f"{type(exc).__name__}: {exc}"
        log.exception("run failed")
        raise
    finally:
        prov["seconds"] = round(time.perf_counter() - t0, 3)
        _write_json(run_dir / "provenance.json", prov)
        log.removeHandler(handler)
        handler.close()
    _write_json(run_dir / "summary.json", summary)
    if prov["status"] == "partial":
        raise PartialFailure(f"{len(summary['failures'])} jobs failed; partial artifacts kept", run_dir)
    return summary


def run(config_path: str | Path, output: str | Path | None = None, workers: int | None = None) -> Path:
    config_path = Path(config_path)
    text = config_path.read_text()
    cfg = load_config(config_path)
    root = output_root(cfg, output)
    label = cfg.output.name or f"{cfg.problem.name}_{cfg.method.kind}"
    run_dir = make_run_dir(root, label)
    execute(cfg, run_dir, workers, text)
    return run_dir
