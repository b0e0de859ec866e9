"""Figures from a run directory's CSV files."""

from __future__ import annotations

import csv
import json
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .band import CiBand  # noqa: E402
from .problems import get_problem  # noqa: E402

SLICES = {"poisson2d": ("x", (-0.5, 0.0, 0.5, 1.0)), "burgers": ("t", (0.0, 0.25, 0.5, 0.75))}


class PlotError(FileNotFoundError):
    pass


def _bands(run_dir: Path) -> dict[str, CiBand]:
    out = {}
    for p in sorted(run_dir.glob("band*.csv")):
        out[p.stem] = CiBand.from_csv(p)
    return out


def _problem_name(run_dir: Path) -> str | None:
    cfg = run_dir / "config.json"
    if cfg.exists():
        return json.loads(cfg.read_text())["problem"]["name"]
    return None


def _label(stem: str) -> str:
    return {"band": "main", "band_targets": "training queries"}.get(stem, stem.replace("band_", ""))


def _plot_1d(bands: dict[str, CiBand], exact, path: Path, title: str) -> Path:
    fig, ax = plt.subplots(figsize=(6, 4))
    for stem, b in bands.items():
        x = b.points[:, 0]
        order = np.argsort(x)
        style = "o" if len(x) < 10 else "-"
        (line,) = ax.plot(x[order], b.lower[order], style, label=f"{_label(stem)} L", ms=4)
        ax.plot(x[order], b.upper[order], "--" if style == "-" else "o", color=line.get_color(), label=f"{_label(stem)} U", ms=4)
    if exact is not None:
        xs = np.linspace(min(b.points[:, 0].min() for b in bands.values()), max(b.points[:, 0].max() for b in bands.values()), 201)
        ax.plot(xs, exact(xs[:, None]), "k:", label="exact")
    ax.set_xlabel("x")
    ax.set_ylabel("u")
    ax.set_title(title)
    ax.legend(fontsize=7)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def _plot_slices(bands: dict[str, CiBand], name: str, run_dir: Path, exact) -> list[Path]:
    coord, values = SLICES[name]
    axis = 0 if coord == "x" else 1
    other = 1 - axis
    paths = []
    for v in values:
        fig, ax = plt.subplots(figsize=(6, 4))
        drawn = False
        for stem, b in bands.items():
            line_vals = np.unique(b.points[:, axis])
            nearest = line_vals[np.argmin(np.abs(line_vals - v))]
            if abs(nearest - v) > 1e-6 + 0.5 * (np.diff(line_vals).min() if len(line_vals) > 1 else 0):
                continue
            sel = np.isclose(b.points[:, axis], nearest)
            s = b.points[sel, other]
            order = np.argsort(s)
            (ln,) = ax.plot(s[order], b.lower[sel][order], "-", label=f"{_label(stem)} L")
            ax.plot(s[order], b.upper[sel][order], "--", color=ln.get_color(), label=f"{_label(stem)} U")
            drawn = True
        if exact is not None:
            s = np.linspace(-1, 1, 201)
            pts = np.column_stack([np.full_like(s, v), s] if axis == 0 else [s, np.full_like(s, v)])
            ax.plot(s, exact(pts), "k:", label="exact")
        ax.set_xlabel("y" if axis == 0 else "x")
        ax.set_title(f"{name}: {coord} = {v:g}" + ("" if drawn else " (no queries on this line)"))
        ax.legend(fontsize=7)
        fig.tight_layout()
        path = run_dir / f"slice_{coord}_{v:+.2f}.png"
        fig.savefig(path, dpi=120)
        plt.close(fig)
        paths.append(path)
    return paths


def _plot_convergence(run_dir: Path) -> Path:
    with open(run_dir / "convergence.csv", newline="") as fh:
        rows = list(csv.reader(fh))
    data = np.array(rows[1:], dtype=float)
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.plot(data[:, 0], data[:, 1], label=rows[0][1])
    ax.plot(data[:, 0], data[:, 2], label=rows[0][2])
    ax.axhline(0.95, color="k", ls=":", lw=1)
    ax.set_xscale("log")
    ax.set_xlabel("replications J")
    ax.set_ylabel("empirical confidence")
    ax.legend()
    fig.tight_layout()
    path = run_dir / "convergence.png"
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def plot_run(run_dir: str | Path) -> list[Path]:
    """Render every figure the directory's data supports; file names are fixed per figure."""
    run_dir = Path(run_dir)
    if not run_dir.is_dir():
        raise PlotError(f"{run_dir} is not a directory")
    paths = []
    if (run_dir / "convergence.csv").exists():
        paths.append(_plot_convergence(run_dir))
    bands = _bands(run_dir)
    if not bands:
        if paths:
            return paths
        raise PlotError(f"no plottable data in {run_dir}: expected band.csv, band_*.csv or convergence.csv")
    name = _problem_name(run_dir)
    problem = get_problem(name) if name else None
    exact = problem.exact_solution if problem is not None else None
    dim = next(iter(bands.values())).points.shape[1]
    if dim == 1:
        toy = {k: v for k, v in bands.items() if k.startswith("band_toy")}
        rest = {k: v for k, v in bands.items() if k not in toy}
        if rest:
            paths.append(_plot_1d(rest, exact, run_dir / "band.png", name or "band"))
        if toy:
            paths.append(_plot_1d(toy, lambda x: np.zeros(len(x)), run_dir / "toy_band.png", "toy linear system"))
    elif name in SLICES:
        paths.extend(_plot_slices(bands, name, run_dir, exact))
    else:
        raise PlotError(f"do not know how to slice {dim}-D problem {name!r}")
    return paths
