"""Registered PDE problems and their noisy boundary datasets."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Mapping

import jax.numpy as jnp
import numpy as np

PI = np.pi
BURGERS_NU = 0.01 / np.pi

ROLES = ("force", "boundary", "initial")


# -- pointwise residual operators -------------------------------------------------


def pedagogical_forcing(x):
    return -PI**2 * jnp.sin(PI * x) - PI * jnp.cos(PI * x) * jnp.sin(PI * x) ** 2


def pedagogical_residual(u, u_x, u_xx, x):
    """u_xx - u^2 u_x - f(x) on [-1, 1]."""
    return u_xx - u**2 * u_x - pedagogical_forcing(x)


def poisson2d_forcing(x, y):
    return jnp.exp(x) + jnp.exp(y)


def poisson2d_residual(u_xx, u_yy, x, y):
    return u_xx + u_yy - poisson2d_forcing(x, y)


def burgers_residual(u, u_x, u_xx, u_t, x, t, nu=BURGERS_NU, linear_advection=False):
    """Viscous Burgers residual u_t + u u_x - nu u_xx.

    ``linear_advection=True`` gives the linear form u_t + u_x - nu u_xx.
    """
    advection = u_x if linear_advection else u * u_x
    return u_t + advection - nu * u_xx


# -- problem definitions ---------------------------------------------------------


@dataclass(frozen=True)
class BoundarySet:
    points: np.ndarray
    values: np.ndarray
    roles: tuple[str, ...]
    noisy: np.ndarray


@dataclass(frozen=True)
class PdeProblem:
    """A code-registered PDE with domain, operators and data layout.

    ``residual`` receives a mapping from derivative names (``"u"``, ``"u_x"``,
    ``"u_xx"``, ``"u_t"``, ...) to arrays plus the (N, d) points.
    """

    name: str
    coords: tuple[str, ...]
    lower: tuple[float, ...]
    upper: tuple[float, ...]
    derivatives: tuple[str, ...]
    residual: Callable[[Mapping[str, jnp.ndarray], jnp.ndarray], jnp.ndarray]
    boundary_values: Callable[[np.ndarray], np.ndarray]
    make_collocation: Callable[[Mapping], np.ndarray]
    make_boundary: Callable[[Mapping], BoundarySet]
    default_counts: Mapping = field(default_factory=dict)
    exact_solution: Callable[[np.ndarray], np.ndarray] | None = None

    @property
    def dim(self) -> int:
        return len(self.coords)

    def multi_index(self, name: str) -> tuple[int, ...]:
        if name == "u":
            return (0,) * self.dim
        if not name.startswith("u_"):
            raise ValueError(f"bad derivative name {name!r}")
        index = [0] * self.dim
        for c in name[2:]:
            index[self.coords.index(c)] += 1
        return tuple(index)

    def counts(self, overrides: Mapping | None = None) -> dict:
        out = dict(self.default_counts)
        out.update(overrides or {})
        return out

    def collocation(self, counts: Mapping | None = None) -> np.ndarray:
        return self.make_collocation(self.counts(counts))

    def boundary(self, counts: Mapping | None = None) -> BoundarySet:
        return self.make_boundary(self.counts(counts))

    def contains(self, points) -> np.ndarray:
        points = np.atleast_2d(points)
        return np.all((points >= np.array(self.lower) - 1e-12) & (points <= np.array(self.upper) + 1e-12), axis=1)


def _pedagogical_residual(d, X):
    return pedagogical_residual(d["u"], d["u_x"], d["u_xx"], X[:, 0])


def _pedagogical_collocation(counts):
    n = int(counts["collocation"])
    return np.linspace(-1.0, 1.0, n + 2)[1:-1, None]


def _pedagogical_boundary(counts):
    m = int(counts["per_side"])
    pts = np.tile(np.array([[-1.0], [1.0]]), (m, 1))
    return BoundarySet(pts, np.zeros(2 * m), ("boundary",) * (2 * m), np.ones(2 * m, dtype=bool))


def _poisson_exact(X):
    X = np.asarray(X)
    return np.exp(X[:, 0]) + np.exp(X[:, 1])


def _poisson_residual(d, X):
    return poisson2d_residual(d["u_xx"], d["u_yy"], X[:, 0], X[:, 1])


def _poisson_collocation(counts):
    n = int(counts["grid"])
    g = np.linspace(-1.0, 1.0, n + 2)[1:-1]
    xx, yy = np.meshgrid(g, g, indexing="ij")
    return np.column_stack([xx.ravel(), yy.ravel()])


def _poisson_boundary(counts):
    m = int(counts["per_side"])
    s = -1.0 + (2.0 * np.arange(m) + 1.0) / m
    one = np.ones(m)
    pts = np.concatenate(
        [
            np.column_stack([-one, s]),
            np.column_stack([one, s]),
            np.column_stack([s, -one]),
            np.column_stack([s, one]),
        ]
    )
    n = len(pts)
    return BoundarySet(pts, _poisson_exact(pts), ("boundary",) * n, np.ones(n, dtype=bool))


def _burgers_ic(x):
    return -np.sin(np.pi * np.asarray(x))


def _burgers_collocation(counts):
    nx, nt = (int(v) for v in counts["collocation_grid"])
    x = np.linspace(-1.0, 1.0, nx + 2)[1:-1]
    t = np.linspace(0.0, 1.0, nt + 1)[1:]
    xx, tt = np.meshgrid(x, t, indexing="ij")
    return np.column_stack([xx.ravel(), tt.ravel()])


def _burgers_boundary(counts):
    nb = int(counts["boundary"])
    ni = int(counts["initial"])
    t = np.linspace(0.0, 1.0, nb // 2)
    bc = np.concatenate([np.column_stack([-np.ones_like(t), t]), np.column_stack([np.ones_like(t), t])])
    x0 = np.linspace(-1.0, 1.0, ni)
    ic = np.column_stack([x0, np.zeros_like(x0)])
    pts = np.concatenate([ic, bc])
    values = np.concatenate([_burgers_ic(x0), np.zeros(len(bc))])
    roles = ("initial",) * ni + ("boundary",) * len(bc)
    noisy = np.concatenate([np.ones(ni, dtype=bool), np.zeros(len(bc), dtype=bool)])
    return BoundarySet(pts, values, roles, noisy)


def _burgers_values(X):
    X = np.asarray(X)
    return np.where(np.isclose(X[:, 1], 0.0), _burgers_ic(X[:, 0]), 0.0)


def pedagogical() -> PdeProblem:
    return PdeProblem(
        name="pedagogical",
        coords=("x",),
        lower=(-1.0,),
        upper=(1.0,),
        derivatives=("u", "u_x", "u_xx"),
        residual=_pedagogical_residual,
        boundary_values=lambda X: np.zeros(len(np.atleast_2d(X))),
        make_collocation=_pedagogical_collocation,
        make_boundary=_pedagogical_boundary,
        default_counts={"collocation": 128, "per_side": 1},
        exact_solution=lambda X: np.sin(np.pi * np.asarray(X)[:, 0]),
    )


def poisson2d() -> PdeProblem:
    return PdeProblem(
        name="poisson2d",
        coords=("x", "y"),
        lower=(-1.0, -1.0),
        upper=(1.0, 1.0),
        derivatives=("u_xx", "u_yy"),
        residual=_poisson_residual,
        boundary_values=_poisson_exact,
        make_collocation=_poisson_collocation,
        make_boundary=_poisson_boundary,
        default_counts={"grid": 30, "per_side": 10},
        exact_solution=_poisson_exact,
    )


def burgers(linear_advection: bool = False, nu: float = BURGERS_NU) -> PdeProblem:
    def residual(d, X):
        return burgers_residual(
            d["u"], d["u_x"], d["u_xx"], d["u_t"], X[:, 0], X[:, 1], nu=nu, linear_advection=linear_advection
        )

    return PdeProblem(
        name="burgers",
        coords=("x", "t"),
        lower=(-1.0, 0.0),
        upper=(1.0, 1.0),
        derivatives=("u", "u_x", "u_xx", "u_t"),
        residual=residual,
        boundary_values=_burgers_values,
        make_collocation=_burgers_collocation,
        make_boundary=_burgers_boundary,
        default_counts={"collocation_grid": (100, 100), "boundary": 200, "initial": 256},
    )


PROBLEMS: dict[str, Callable[..., PdeProblem]] = {
    "pedagogical": pedagogical,
    "poisson2d": poisson2d,
    "burgers": burgers,
}


def get_problem(name: str, **options) -> PdeProblem:
    try:
        factory = PROBLEMS[name]
    except KeyError:
        raise ValueError(f"unknown problem {name!r}; known: {sorted(PROBLEMS)}") from None
    return factory(**options)


# -- datasets ----------------------------------------------------------------------


@dataclass(frozen=True)
class NoiseSpec:
    kind: str = "none"
    scale: float = 0.0

    def __post_init__(self):
        if self.kind not in ("none", "gaussian", "uniform"):
            raise ValueError(f"unknown noise family {self.kind!r}")
        if self.kind != "none" and not self.scale > 0:
            raise ValueError("noise scale must be positive")

    def draw(self, rng: np.random.Generator, size: int) -> np.ndarray:
        if self.kind == "gaussian":
            return rng.normal(0.0, self.scale, size)
        if self.kind == "uniform":
            return rng.uniform(-self.scale, self.scale, size)
        return np.zeros(size)

    def to_dict(self) -> dict:
        return {"kind": self.kind, "scale": self.scale}


@dataclass(frozen=True, eq=False)
class BoundaryDataset:
    """Collocation points plus boundary data; ``noisy`` marks uncertain values."""

    force_points: np.ndarray
    boundary_points: np.ndarray
    boundary_values: np.ndarray
    roles: tuple[str, ...]
    noisy: np.ndarray
    noise_meta: dict | None = None

    def __post_init__(self):
        fp = np.atleast_2d(np.asarray(self.force_points, dtype=np.float64))
        bp = np.atleast_2d(np.asarray(self.boundary_points, dtype=np.float64))
        bv = np.asarray(self.boundary_values, dtype=np.float64).ravel()
        noisy = np.asarray(self.noisy, dtype=bool).ravel()
        if len(fp) < 1 or len(bp) < 1:
            raise ValueError("dataset needs at least one force point and one boundary point")
        if not (len(bp) == len(bv) == len(noisy) == len(self.roles)):
            raise ValueError("boundary points, values, roles and noisy mask differ in length")
        if fp.shape[1] != bp.shape[1]:
            raise ValueError("force and boundary points have different dimensions")
        bad = set(self.roles) - {"boundary", "initial"}
        if bad:
            raise ValueError(f"unknown boundary roles {bad}")
        object.__setattr__(self, "force_points", fp)
        object.__setattr__(self, "boundary_points", bp)
        object.__setattr__(self, "boundary_values", bv)
        object.__setattr__(self, "noisy", noisy)
        object.__setattr__(self, "roles", tuple(self.roles))

    @property
    def n_force(self) -> int:
        return len(self.force_points)

    @property
    def n_boundary(self) -> int:
        return len(self.boundary_points)

    @property
    def n_noisy(self) -> int:
        return int(self.noisy.sum())

    @property
    def noisy_values(self) -> np.ndarray:
        return self.boundary_values[self.noisy]

    @property
    def noisy_points(self) -> np.ndarray:
        return self.boundary_points[self.noisy]

    def with_noisy_values(self, z) -> "BoundaryDataset":
        z = np.asarray(z, dtype=np.float64).ravel()
        if len(z) != self.n_noisy:
            raise ValueError(f"expected {self.n_noisy} noisy values, got {len(z)}")
        values = self.boundary_values.copy()
        values[self.noisy] = z
        return BoundaryDataset(
            self.force_points, self.boundary_points, values, self.roles, self.noisy, self.noise_meta
        )

    def observation_matrix(self) -> tuple[np.ndarray, np.ndarray]:
        """Group repeated noisy measurements by location.

        Returns the unique noisy locations (n, d) in first-seen order and an
        (m, n) matrix of observations; every location must be measured m times.
        """
        pts = self.noisy_points
        vals = self.noisy_values
        keys: dict[tuple, list[float]] = {}
        for p, v in zip(map(tuple, pts), vals):
            keys.setdefault(p, []).append(v)
        counts = {len(v) for v in keys.values()}
        if len(counts) != 1:
            raise ValueError("noisy locations have unequal numbers of observations")
        locs = np.array(list(keys.keys()))
        obs = np.array(list(keys.values())).T
        return locs, obs

    def template(self, values=None) -> "BoundaryDataset":
        """Dataset with one entry per unique noisy location.

        Noisy values default to the per-location observation mean.
        """
        locs, obs = self.observation_matrix()
        values = obs.mean(axis=0) if values is None else np.asarray(values, dtype=np.float64)
        clean = ~self.noisy
        role_of = {tuple(p): r for p, r, n in zip(map(tuple, self.boundary_points), self.roles, self.noisy) if n}
        pts = np.concatenate([locs, self.boundary_points[clean]])
        vals = np.concatenate([values, self.boundary_values[clean]])
        roles = tuple(role_of[tuple(p)] for p in locs) + tuple(r for r, n in zip(self.roles, self.noisy) if not n)
        noisy = np.concatenate([np.ones(len(locs), dtype=bool), np.zeros(int(clean.sum()), dtype=bool)])
        return BoundaryDataset(self.force_points, pts, vals, roles, noisy, self.noise_meta)

    # -- serialization

    def to_csv(self, path: str | Path, coords: tuple[str, ...] | None = None) -> None:
        d = self.force_points.shape[1]
        coords = coords or tuple(f"x{i}" for i in range(d))
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow([*coords, "value", "role", "noisy"])
            for p in self.force_points:
                w.writerow([*map(repr, map(float, p)), "", "force", 0])
            for p, v, r, n in zip(self.boundary_points, self.boundary_values, self.roles, self.noisy):
                w.writerow([*map(repr, map(float, p)), repr(float(v)), r, int(n)])

    @classmethod
    def from_csv(cls, path: str | Path) -> "BoundaryDataset":
        with open(path, newline="") as fh:
            rows = list(csv.reader(fh))
        header, rows = rows[0], rows[1:]
        d = header.index("value")
        force = [list(map(float, r[:d])) for r in rows if r[d + 1] == "force"]
        bnd = [r for r in rows if r[d + 1] != "force"]
        return cls(
            np.array(force),
            np.array([list(map(float, r[:d])) for r in bnd]),
            np.array([float(r[d]) for r in bnd]),
            tuple(r[d + 1] for r in bnd),
            np.array([r[d + 2] == "1" for r in bnd]),
        )

    def to_dict(self) -> dict:
        return {
            "force_points": self.force_points.tolist(),
            "boundary_points": self.boundary_points.tolist(),
            "boundary_values": self.boundary_values.tolist(),
            "roles": list(self.roles),
            "noisy": self.noisy.astype(int).tolist(),
            "noise_meta": self.noise_meta,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "BoundaryDataset":
        return cls(
            np.array(data["force_points"]),
            np.array(data["boundary_points"]),
            np.array(data["boundary_values"]),
            tuple(data["roles"]),
            np.array(data["noisy"], dtype=bool),
            data.get("noise_meta"),
        )

    def to_json(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict()))

    @classmethod
    def from_json(cls, path: str | Path) -> "BoundaryDataset":
        return cls.from_dict(json.loads(Path(path).read_text()))


def _noise_spec(noise) -> NoiseSpec:
    if noise is None:
        return NoiseSpec()
    if isinstance(noise, NoiseSpec):
        return noise
    if isinstance(noise, str):
        return NoiseSpec(noise)
    return NoiseSpec(**noise)


def sample_dataset(
    problem: PdeProblem | str,
    noise: NoiseSpec | Mapping | str | None = None,
    counts: Mapping | None = None,
    seed: int = 0,
) -> BoundaryDataset:
    """Build a dataset with zero-mean noise added to the problem's noisy components."""
    if isinstance(problem, str):
        problem = get_problem(problem)
    noise = _noise_spec(noise)
    counts = problem.counts(counts)
    if any(isinstance(v, (int, float)) and v <= 0 for v in counts.values()):
        raise ValueError(f"counts must be positive: {counts}")
    rng = np.random.default_rng(seed)
    bset = problem.boundary(counts)
    values = bset.values.astype(np.float64).copy()
    values[bset.noisy] += noise.draw(rng, int(bset.noisy.sum()))
    return BoundaryDataset(
        problem.collocation(counts),
        bset.points,
        values,
        bset.roles,
        bset.noisy,
        {"problem": problem.name, "seed": seed, **noise.to_dict()},
    )


def clean_dataset(problem: PdeProblem | str, counts: Mapping | None = None) -> BoundaryDataset:
    return sample_dataset(problem, None, counts, seed=0)
