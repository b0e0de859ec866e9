"""Run configuration: a TOML file with sections problem, region, method, optimizer, queries, output.

Every section is validated by a pydantic model with unknown keys rejected,
so a typo or an out-of-range value is reported with its dotted field path.
"""

from __future__ import annotations

import sys
from pathlib import Path
from typing import Literal, Optional

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

RUN_KINDS = ("picprop", "es", "simpicprop", "effipicprop", "validity", "toy-linear", "hypergrad-check")


class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid")


class NetworkSection(_Section):
    width: int = Field(32, ge=1)
    depth: int = Field(2, ge=1)


class NoiseSection(_Section):
    kind: Literal["none", "gaussian", "uniform"] = "none"
    scale: float = Field(0.0, ge=0.0)


class ProblemSection(_Section):
    name: Literal["pedagogical", "poisson2d", "burgers"] = "pedagogical"
    options: dict = Field(default_factory=dict)
    counts: dict = Field(default_factory=dict)
    noise: NoiseSection = Field(default_factory=NoiseSection)
    data_seed: int = 0
    network: NetworkSection = Field(default_factory=NetworkSection)
    dtype: Literal["float32", "float64"] = "float32"


class RegionSection(_Section):
    kind: Literal["chi2", "hotelling", "hoeffding", "fixed", "point"] = "point"
    p: float = Field(0.95, gt=0.0, lt=1.0)
    sigma: Optional[float] = Field(None, gt=0.0)
    half_width: Optional[float] = Field(None, ge=0.0)  # fixed boxes: clean value +/- half_width
    support_half_width: Optional[float] = Field(None, gt=0.0)
    one_sided: bool = False

    @model_validator(mode="after")
    def _needs(self):
        if self.kind == "chi2" and self.sigma is None:
            raise ValueError("chi2 region needs 'sigma'")
        if self.kind == "fixed" and self.half_width is None:
            raise ValueError("fixed region needs 'half_width'")
        if self.kind == "hoeffding" and self.support_half_width is None:
            raise ValueError("hoeffding region needs 'support_half_width'")
        return self


class InnerOptimizer(_Section):
    name: Literal["adam", "sgd"] = "adam"
    lr: float = Field(1e-3, gt=0.0)
    warmup_steps: int = Field(2000, ge=0)
    inner_steps: int = Field(500, ge=0)
    w_f: float = Field(1.0, ge=0.0)
    w_b: float = Field(1.0, ge=0.0)
    reset: bool = False
    seed: int = 0


class MetaOptimizer(_Section):
    name: Literal["sgd", "adam"] = "sgd"
    lr: float = Field(0.01, gt=0.0)
    steps: int = Field(50, ge=1)
    grad_clip: Optional[float] = Field(None, gt=0.0)
    final_steps: Optional[int] = Field(None, ge=0)


class OptimizerSection(_Section):
    inner: InnerOptimizer = Field(default_factory=InnerOptimizer)
    meta: MetaOptimizer = Field(default_factory=MetaOptimizer)


class HypergradSection(_Section):
    method: Literal["reverse", "aid_ns", "aid_cg"] = "aid_ns"
    iterations: int = Field(100, ge=1)
    ns_scale: Optional[float] = Field(None, gt=0.0)
    cg_tol: float = Field(1e-10, gt=0.0)
    cg_strict: bool = True
    unroll_depth: Optional[int] = Field(None, ge=1)


class MethodSection(_Section):
    kind: Literal[RUN_KINDS] = "picprop"  # type: ignore[valid-type]
    hypergrad: HypergradSection = Field(default_factory=HypergradSection)
    eta: float = Field(0.0, ge=0.0)
    return_best: bool = False
    # exhaustive search
    trials: int = Field(1000, ge=1)
    checkpoints: list[int] = Field(default_factory=list)
    warm_start_steps: Optional[int] = Field(None, ge=1)
    save_trials: bool = False
    # meta-model
    lam: float = Field(1.0, ge=0.0, le=1.0)
    selection: Literal["fixed", "validation"] = "fixed"
    meta_steps: int = Field(20000, ge=0)
    meta_lr: float = Field(1e-3, gt=0.0)
    meta_width: Optional[int] = Field(None, ge=1)
    meta_depth: Optional[int] = Field(None, ge=1)
    retrain_targets: bool = False
    # validity / toy studies
    replications: int = Field(50, ge=1)
    grid_points: int = Field(101, ge=1)
    eps: float = Field(0.01, gt=0.0)
    measure_eta: bool = True
    propagation: Literal["effipicprop", "simpicprop", "picprop"] = "effipicprop"
    # hypergrad-check
    instances: int = Field(20, ge=1)
    max_dim: int = Field(20, ge=1)

    @field_validator("checkpoints")
    @classmethod
    def _sorted(cls, v):
        if any(c < 1 for c in v):
            raise ValueError("checkpoints must be positive trial counts")
        return sorted(set(v))


class QueriesSection(_Section):
    """Either ``grid`` (one [lo, hi, n] per coordinate) or explicit ``points``."""

    grid: Optional[list[list[float]]] = None
    points: Optional[list[list[float]]] = None
    train_grid: Optional[list[list[float]]] = None
    train_points: Optional[list[list[float]]] = None

    @field_validator("grid", "train_grid")
    @classmethod
    def _grid(cls, v):
        if v is None:
            return v
        for axis in v:
            if len(axis) != 3 or axis[2] < 1 or int(axis[2]) != axis[2]:
                raise ValueError("each grid axis is [lo, hi, n] with integer n >= 1")
            if axis[0] > axis[1]:
                raise ValueError("grid axis has lo > hi")
        return v

    def resolve(self, which: str = "eval") -> np.ndarray | None:
        grid, points = (self.grid, self.points) if which == "eval" else (self.train_grid, self.train_points)
        if points is not None:
            return np.asarray(points, dtype=np.float64)
        if grid is None:
            return None
        axes = [np.linspace(lo, hi, int(n)) for lo, hi, n in grid]
        mesh = np.meshgrid(*axes, indexing="ij")
        return np.column_stack([m.ravel() for m in mesh])


class OutputSection(_Section):
    root: Optional[str] = None
    name: Optional[str] = None
    workers: int = Field(1, ge=1)


class RunConfig(_Section):
    problem: ProblemSection = Field(default_factory=ProblemSection)
    region: RegionSection = Field(default_factory=RegionSection)
    method: MethodSection = Field(default_factory=MethodSection)
    optimizer: OptimizerSection = Field(default_factory=OptimizerSection)
    queries: QueriesSection = Field(default_factory=QueriesSection)
    output: OutputSection = Field(default_factory=OutputSection)

    @model_validator(mode="after")
    def _consistent(self):
        kind = self.method.kind
        if kind in ("picprop", "es") and self.queries.resolve() is None:
            raise ValueError(f"method '{kind}' needs queries.grid or queries.points")
        if kind in ("simpicprop", "effipicprop") and self.queries.resolve("train") is None:
            raise ValueError(f"method '{kind}' needs queries.train_grid or queries.train_points")
        dim = {"pedagogical": 1, "poisson2d": 2, "burgers": 2}[self.problem.name]
        for which in ("eval", "train"):
            q = self.queries.resolve(which)
            if q is not None and q.shape[1] != dim:
                raise ValueError(f"{which} queries have {q.shape[1]} coordinates, problem {self.problem.name} has {dim}")
        return self


class ConfigError(ValueError):
    """Schema violation; ``errors`` lists (field path, message) pairs."""

    def __init__(self, errors: list[tuple[str, str]]):
        self.errors = errors
        super().__init__("; ".join(f"{loc}: {msg}" for loc, msg in errors))


def parse_config(data: dict) -> RunConfig:
    try:
        return RunConfig.model_validate(data)
    except ValidationError as exc:
        errs = []
        for e in exc.errors():
            loc = ".".join(str(p) for p in e["loc"]) or "<root>"
            errs.append((loc, e["msg"]))
        raise ConfigError(errs) from None


def load_config(path: str | Path) -> RunConfig:
    path = Path(path)
    try:
        data = tomllib.loads(path.read_text())
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError([("<file>", f"invalid TOML: {exc}")]) from None
    return parse_config(data)
