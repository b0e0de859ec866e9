"""Per-query confidence bands and their on-disk formats."""

from __future__ import annotations

import csv
import hashlib
import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Iterable, Sequence

import numpy as np


def config_hash(obj: Any) -> str:
    """Stable short hash of a JSON-serializable configuration."""
    blob = json.dumps(obj, sort_keys=True, default=_jsonable)
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


def _jsonable(o):
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, (np.floating, np.integer)):
        return o.item()
    if hasattr(o, "to_dict"):
        return o.to_dict()
    if hasattr(o, "__dataclass_fields__"):
        return {k: getattr(o, k) for k in o.__dataclass_fields__}
    return str(o)


def to_json_text(obj: Any) -> str:
    return json.dumps(obj, indent=2, sort_keys=True, default=_jsonable)


@dataclass(eq=False)
class CiBand:
    points: np.ndarray
    lower: np.ndarray
    upper: np.ndarray
    eta: float = 0.0
    method: str = ""
    coords: tuple[str, ...] = ()
    provenance: dict = field(default_factory=dict)
    trajectories: dict | None = None
    failures: list = field(default_factory=list)

    def __post_init__(self):
        self.points = np.atleast_2d(np.asarray(self.points, dtype=np.float64))
        self.lower = np.asarray(self.lower, dtype=np.float64).ravel()
        self.upper = np.asarray(self.upper, dtype=np.float64).ravel()
        if not (len(self.points) == len(self.lower) == len(self.upper)):
            raise ValueError("points, lower and upper must have equal length")
        if not self.coords:
            self.coords = tuple(f"x{i}" for i in range(self.points.shape[1]))
        ok = np.isfinite(self.lower) & np.isfinite(self.upper)
        if np.any(self.lower[ok] > self.upper[ok]):
            bad = np.flatnonzero(ok & (self.lower > self.upper))
            raise ValueError(f"band ordering violated (L > U) at query indices {bad.tolist()}")

    def __len__(self) -> int:
        return len(self.lower)

    @property
    def width(self) -> np.ndarray:
        return self.upper - self.lower

    @property
    def complete(self) -> bool:
        return not self.failures and bool(np.all(np.isfinite(self.lower) & np.isfinite(self.upper)))

    def contains(self, values, strict: bool = False) -> np.ndarray:
        values = np.asarray(values, dtype=np.float64)
        if strict:
            return (self.lower < values) & (values < self.upper)
        return (self.lower <= values) & (values <= self.upper)

    def padded(self, eta: float) -> "CiBand":
        """Same band with an extra symmetric padding of ``eta``."""
        return CiBand(
            self.points,
            self.lower - eta,
            self.upper + eta,
            self.eta + eta,
            self.method,
            self.coords,
            dict(self.provenance),
            self.trajectories,
            list(self.failures),
        )

    def to_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow([*self.coords, "L", "U"])
            for p, lo, hi in zip(self.points, self.lower, self.upper):
                w.writerow([*(repr(float(v)) for v in p), repr(float(lo)), repr(float(hi))])

    @classmethod
    def from_csv(cls, path: str | Path, **kw) -> "CiBand":
        with open(path, newline="") as fh:
            rows = list(csv.reader(fh))
        header = rows[0]
        data = np.array([[float(v) for v in r] for r in rows[1:]], dtype=np.float64).reshape(-1, len(header))
        return cls(data[:, :-2], data[:, -2], data[:, -1], coords=tuple(header[:-2]), **kw)

    def to_dict(self) -> dict:
        return {
            "coords": list(self.coords),
            "points": self.points.tolist(),
            "L": self.lower.tolist(),
            "U": self.upper.tolist(),
            "eta": self.eta,
            "method": self.method,
            "provenance": self.provenance,
            "failures": self.failures,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "CiBand":
        return cls(
            np.array(data["points"]),
            np.array(data["L"], dtype=np.float64),
            np.array(data["U"], dtype=np.float64),
            data.get("eta", 0.0),
            data.get("method", ""),
            tuple(data.get("coords", ())),
            data.get("provenance", {}),
            failures=data.get("failures", []),
        )

    def to_json(self, path: str | Path) -> None:
        Path(path).write_text(to_json_text(self.to_dict()))

    @classmethod
    def from_json(cls, path: str | Path) -> "CiBand":
        return cls.from_dict(json.loads(Path(path).read_text()))


def run_jobs(fn: Callable, items: Sequence | Iterable, workers: int = 1) -> list:
    """Map ``fn`` over ``items``; results come back in input order for any worker count."""
    items = list(items)
    if workers <= 1 or len(items) <= 1:
        return [fn(it) for it in items]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))
