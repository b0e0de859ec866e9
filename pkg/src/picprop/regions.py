"""Confidence regions over the noisy boundary values.

Ellipsoids come from chi-squared and Hotelling statistics, boxes from a
Hoeffding union bound or from expert-given intervals. Every region supports
membership, projection and uniform sampling.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import stats

_MEMBER_RTOL = 1e-9


@dataclass(frozen=True, eq=False)
class ConfidenceRegion:
    kind: str
    center: np.ndarray
    p: float | None = None
    metric: np.ndarray | None = None
    radius: float | None = None
    lower: np.ndarray | None = None
    upper: np.ndarray | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        c = np.asarray(self.center, dtype=np.float64).ravel()
        object.__setattr__(self, "center", c)
        if self.kind == "ellipsoid":
            M = np.asarray(self.metric, dtype=np.float64)
            if M.shape != (len(c), len(c)):
                raise ValueError(f"metric shape {M.shape} does not match dimension {len(c)}")
            if not np.allclose(M, M.T, rtol=1e-10, atol=1e-12):
                raise ValueError("metric must be symmetric")
            if np.linalg.eigvalsh(M).min() <= 0:
                raise ValueError("metric must be positive definite")
            if not (self.radius is not None and self.radius > 0 and math.isfinite(self.radius)):
                raise ValueError(f"radius must be positive and finite, got {self.radius}")
            object.__setattr__(self, "metric", M)
            object.__setattr__(self, "_chol", np.linalg.cholesky(M))
        elif self.kind == "box":
            lo = np.asarray(self.lower, dtype=np.float64).ravel()
            hi = np.asarray(self.upper, dtype=np.float64).ravel()
            if lo.shape != c.shape or hi.shape != c.shape:
                raise ValueError("box bounds do not match the center dimension")
            if np.any(lo > hi):
                raise ValueError("box lower bound exceeds upper bound")
            object.__setattr__(self, "lower", lo)
            object.__setattr__(self, "upper", hi)
        else:
            raise ValueError(f"unknown region kind {self.kind!r}")
        if not self.contains(c):
            raise ValueError("region center lies outside the region")

    @property
    def dim(self) -> int:
        return len(self.center)

    def mahalanobis(self, z) -> np.ndarray:
        """Distance ||z - c||_M (ellipsoids only); accepts (n,) or (k, n)."""
        diff = np.asarray(z, dtype=np.float64) - self.center
        return np.linalg.norm(diff @ self._chol, axis=-1)

    def contains(self, z) -> bool | np.ndarray:
        z = np.asarray(z, dtype=np.float64)
        if z.shape[-1] != self.dim:
            raise ValueError(f"point dimension {z.shape[-1]} != region dimension {self.dim}")
        if self.kind == "ellipsoid":
            return self.mahalanobis(z) <= self.radius * (1 + _MEMBER_RTOL)
        tol = _MEMBER_RTOL * np.maximum(1.0, np.abs(self.upper - self.lower))
        return np.all((z >= self.lower - tol) & (z <= self.upper + tol), axis=-1)

    def project(self, q) -> np.ndarray:
        """Map ``q`` into the region; members are returned unchanged.

        Boxes clip componentwise. Ellipsoids rescale radially in the metric,
        which is the exact projection in the metric's own norm.
        """
        q = np.asarray(q, dtype=np.float64)
        if q.shape[-1] != self.dim:
            raise ValueError(f"point dimension {q.shape[-1]} != region dimension {self.dim}")
        if self.kind == "box":
            return np.clip(q, self.lower, self.upper)
        d = np.asarray(self.mahalanobis(q))
        outside = d > self.radius
        scale = np.where(outside, self.radius / np.maximum(d, 1e-300), 1.0)
        scaled = self.center + (q - self.center) * scale[..., None]
        return np.where(outside[..., None], scaled, q)

    def sample(self, rng: np.random.Generator | int, size: int | None = None) -> np.ndarray:
        """Uniform samples from the region (one vector, or ``size`` rows)."""
        rng = np.random.default_rng(rng)
        k = 1 if size is None else size
        if self.kind == "box":
            out = rng.uniform(self.lower, self.upper, size=(k, self.dim))
        else:
            g = rng.standard_normal((k, self.dim))
            g /= np.linalg.norm(g, axis=1, keepdims=True)
            rad = self.radius * rng.uniform(size=(k, 1)) ** (1.0 / self.dim)
            w = g * rad
            # whitened ball -> metric ball: z - c = L^{-T} w
            out = self.center + np.linalg.solve(self._chol.T, w.T).T
        return out[0] if size is None else out

    def widths(self) -> np.ndarray:
        """Per-component extent of the region (hi - lo for boxes, 2 r sqrt(M^-1_jj) for ellipsoids)."""
        if self.kind == "box":
            return self.upper - self.lower
        return 2.0 * self.radius * np.sqrt(np.diag(np.linalg.inv(self.metric)))

    def to_dict(self) -> dict:
        out = {"kind": self.kind, "center": self.center.tolist(), "p": self.p, "meta": self.meta}
        if self.kind == "ellipsoid":
            out.update(metric=self.metric.tolist(), radius=self.radius)
        else:
            out.update(lower=self.lower.tolist(), upper=self.upper.tolist())
        return out

    @classmethod
    def from_dict(cls, data: dict) -> "ConfidenceRegion":
        kw = {k: data.get(k) for k in ("metric", "radius", "lower", "upper")}
        return cls(data["kind"], np.array(data["center"]), data.get("p"), meta=data.get("meta") or {}, **kw)

    def to_json(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2))

    @classmethod
    def from_json(cls, path: str | Path) -> "ConfidenceRegion":
        return cls.from_dict(json.loads(Path(path).read_text()))


def chi_squared_region(z, cov, p: float, one_sided: bool = False) -> ConfidenceRegion:
    """Ellipsoid from one Gaussian observation with known covariance."""
    z = np.asarray(z, dtype=np.float64).ravel()
    cov = np.atleast_2d(np.asarray(cov, dtype=np.float64))
    if cov.shape != (len(z), len(z)):
        raise ValueError(f"covariance shape {cov.shape} does not match observation length {len(z)}")
    if np.linalg.matrix_rank(cov) < len(z) or np.linalg.eigvalsh(cov).min() <= 0:
        raise ValueError("covariance matrix is singular or not positive definite")
    level = stats.upper_critical_level(p, one_sided)
    crit = stats.chi2_quantile(level, len(z))
    return ConfidenceRegion(
        "ellipsoid",
        z,
        p,
        metric=np.linalg.inv(cov),
        radius=math.sqrt(crit),
        meta={"statistic": "chi2", "m": 1, "n": len(z), "critical_value": crit, "one_sided": one_sided},
    )


def hotelling_region(samples, p: float, one_sided: bool = False) -> ConfidenceRegion:
    """Ellipsoid around the sample mean using the sample covariance (m > n)."""
    samples = np.atleast_2d(np.asarray(samples, dtype=np.float64))
    m, n = samples.shape
    if m <= n:
        raise ValueError(f"Hotelling region needs more samples than dimensions (m={m}, n={n})")
    mean = samples.mean(axis=0)
    cov = np.atleast_2d(np.cov(samples, rowvar=False, ddof=1))
    eig = np.linalg.eigvalsh(cov)
    if eig.min() <= 1e-14 * max(eig.max(), 1e-300):
        raise ValueError("sample covariance is degenerate")
    level = stats.upper_critical_level(p, one_sided)
    crit = stats.hotelling_t2_quantile(level, n, m - 1)
    return ConfidenceRegion(
        "ellipsoid",
        mean,
        p,
        metric=np.linalg.inv(cov),
        radius=math.sqrt(crit) / math.sqrt(m),
        meta={"statistic": "hotelling_t2", "m": m, "n": n, "critical_value": crit, "one_sided": one_sided},
    )


def hoeffding_half_width(support_width, m: int, p: float, n: int) -> np.ndarray:
    """Per-component Hoeffding half-width with the (1-p)/n union allocation."""
    delta = (1.0 - p) / n
    return np.asarray(support_width, dtype=np.float64) * math.sqrt(math.log(2.0 / delta) / (2.0 * m))


def hoeffding_region(samples, half_widths, p: float, support_center=None) -> ConfidenceRegion:
    """Box from per-component Hoeffding bounds, intersected with the known support.

    Each component j is assumed to lie in ``support_center_j +/- half_widths_j``.
    """
    samples = np.atleast_2d(np.asarray(samples, dtype=np.float64))
    m, n = samples.shape
    if not 0.0 < p < 1.0:
        raise ValueError(f"confidence level must lie in (0, 1), got {p}")
    D = np.broadcast_to(np.asarray(half_widths, dtype=np.float64), (n,)).copy()
    if np.any(D <= 0):
        raise ValueError("support half-widths must be positive")
    sc = np.zeros(n) if support_center is None else np.broadcast_to(np.asarray(support_center, float), (n,))
    mean = samples.mean(axis=0)
    w = hoeffding_half_width(2.0 * D, m, p, n)
    lo = np.maximum(mean - w, sc - D)
    hi = np.minimum(mean + w, sc + D)
    return ConfidenceRegion(
        "box",
        np.clip(mean, lo, hi),
        p,
        lower=lo,
        upper=hi,
        meta={"statistic": "hoeffding", "m": m, "n": n, "delta": (1.0 - p) / n, "half_width": w.tolist()},
    )


def fixed_region(lower, upper, p: float | None = None) -> ConfidenceRegion:
    """Expert-given box; its confidence level is taken as asserted."""
    lo = np.asarray(lower, dtype=np.float64).ravel()
    hi = np.asarray(upper, dtype=np.float64).ravel()
    if lo.shape != hi.shape:
        raise ValueError("lower and upper bounds differ in shape")
    if np.any(lo > hi):
        raise ValueError("lower bound exceeds upper bound")
    return ConfidenceRegion("box", 0.5 * (lo + hi), p, lower=lo, upper=hi, meta={"statistic": "fixed"})


def point_region(z) -> ConfidenceRegion:
    z = np.asarray(z, dtype=np.float64).ravel()
    return fixed_region(z, z, p=None)


def region_from_observations(obs, kind: str, p: float, sigma: float | None = None, support_half_width=None, support_center=None, one_sided: bool = False) -> ConfidenceRegion:
    """Region over per-location means from an (m, n) observation matrix.

    ``chi2`` needs the known noise level ``sigma`` and uses covariance
    sigma^2 / m; ``hotelling`` estimates the covariance; ``hoeffding`` needs
    the half-width of the bounded support.
    """
    obs = np.atleast_2d(np.asarray(obs, dtype=np.float64))
    m, n = obs.shape
    if kind == "chi2":
        if sigma is None or sigma <= 0:
            raise ValueError("chi2 region needs a positive noise level sigma")
        return chi_squared_region(obs.mean(axis=0), (sigma**2 / m) * np.eye(n), p, one_sided)
    if kind == "hotelling":
        return hotelling_region(obs, p, one_sided)
    if kind == "hoeffding":
        if support_half_width is None:
            raise ValueError("hoeffding region needs the support half-width")
        return hoeffding_region(obs, support_half_width, p, support_center)
    raise ValueError(f"unknown region kind {kind!r}")
