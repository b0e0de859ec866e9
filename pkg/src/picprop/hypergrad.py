"""Hypergradients of an upper objective through an inner minimization.

The inner problem is ``theta*(z) = argmin_theta L(theta, z)`` and the upper
objective ``J(theta)`` has no direct dependence on ``z``. Three estimators:

* ``reverse``: backpropagate through the last K unrolled inner updates.
* ``aid_ns``: implicit differentiation with a Neumann-series inverse HVP.
* ``aid_cg``: implicit differentiation with conjugate gradients.

The ``*_traced`` helpers are pure and jit-compatible; the public wrappers add
the divergence/convergence checks that need concrete values.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Any, Callable

import jax
import jax.numpy as jnp
import numpy as np

from .approximator import hvp_fn, mixed_product_fn

log = logging.getLogger(__name__)

METHODS = ("reverse", "aid_ns", "aid_cg")
DIVERGENCE_RUN = 10


class HypergradError(RuntimeError):
    pass


class NeumannDivergenceError(HypergradError):
    pass


class CGBreakdownError(HypergradError):
    pass


class CGConvergenceError(HypergradError):
    pass


@dataclass(frozen=True)
class HypergradConfig:
    method: str = "aid_ns"
    iterations: int = 100
    ns_scale: float | None = None  # defaults to the inner learning rate
    cg_tol: float = 1e-10
    cg_strict: bool = True

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"unknown hypergradient method {self.method!r}")
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")
        if self.ns_scale is not None and not self.ns_scale > 0:
            raise ValueError("ns_scale must be positive")


@dataclass
class HypergradResult:
    grad: np.ndarray
    diagnostics: dict[str, Any] = field(default_factory=dict)
    warnings: list[str] = field(default_factory=list)


# -- inverse Hessian-vector products ----------------------------------------------


def neumann_traced(hvp: Callable, p, scale: float, terms: int):
    """Partial sum scale * sum_{k=0}^{terms} (I - scale A)^k p and the term norms."""

    def body(carry, _):
        v, acc = carry
        v = v - scale * hvp(v)
        return (v, acc + v), jnp.linalg.norm(v)

    (_, acc), norms = jax.lax.scan(body, (p, p), None, length=terms)
    return scale * acc, jnp.concatenate([jnp.linalg.norm(p)[None], norms])


def check_neumann(term_norms) -> None:
    norms = np.asarray(term_norms)
    growing = np.diff(norms) > 0
    run = 0
    for k, g in enumerate(growing):
        run = run + 1 if g else 0
        if run >= DIVERGENCE_RUN:
            raise NeumannDivergenceError(
                f"Neumann series terms grew for {DIVERGENCE_RUN} consecutive terms "
                f"(term {k + 1} norm {norms[k + 1]:.3e}); use a smaller ns_scale"
            )


def neumann_inv_hvp(hvp: Callable, p, scale: float, terms: int) -> np.ndarray:
    if scale <= 0:
        raise ValueError("scale must be positive")
    x, norms = neumann_traced(hvp, jnp.asarray(p), scale, terms)
    check_neumann(norms)
    return x


def cg_traced(hvp: Callable, p, iters: int, tol: float):
    """Conjugate gradients for A x = p with masking once converged.

    Returns (x, residual norms per iteration, iterations used, breakdown flag).
    """
    p = jnp.asarray(p)
    pnorm = jnp.linalg.norm(p)
    thresh = tol * pnorm
    x0 = jnp.zeros_like(p)

    def body(carry, _):
        x, r, d, rr, done, k, broke = carry
        Ad = hvp(d)
        dAd = jnp.vdot(d, Ad)
        bad = (dAd <= 0) & ~done
        active = ~done & ~bad
        alpha = jnp.where(active, rr / jnp.where(dAd > 0, dAd, 1.0), 0.0)
        x = x + alpha * d
        r = r - alpha * Ad
        rr_new = jnp.vdot(r, r)
        beta = jnp.where(active, rr_new / jnp.where(rr > 0, rr, 1.0), 0.0)
        d = jnp.where(active, r + beta * d, d)
        rr = jnp.where(active, rr_new, rr)
        k = k + active.astype(k.dtype)
        done = done | bad | (jnp.sqrt(rr) <= thresh)
        return (x, r, d, rr, done, k, broke | bad), jnp.sqrt(rr)

    rr0 = jnp.vdot(p, p)
    init = (x0, p, p, rr0, jnp.sqrt(rr0) <= thresh, jnp.array(0), jnp.array(False))
    (x, _, _, _, _, k, broke), res = jax.lax.scan(body, init, None, length=iters)
    return x, jnp.concatenate([jnp.sqrt(rr0)[None], res]), k, broke


@dataclass
class CGResult:
    x: np.ndarray
    iterations: int
    residual_norm: float
    converged: bool
    residuals: np.ndarray


def cg_solve(hvp: Callable, p, iters: int, tol: float = 1e-10) -> CGResult:
    p = jnp.asarray(p)
    x, res, k, broke = cg_traced(hvp, p, iters, tol)
    if bool(broke):
        raise CGBreakdownError(f"CG breakdown: non-positive curvature after {int(k)} iterations")
    res = np.asarray(res)
    final = float(res[int(k)])
    converged = final <= tol * float(jnp.linalg.norm(p))
    return CGResult(x, int(k), final, bool(converged), res[: int(k) + 1])


# -- hypergradients ---------------------------------------------------------------


def aid_traced(loss: Callable, upper: Callable, theta, z, config: HypergradConfig, inner_lr: float):
    """Implicit-differentiation hypergradient; returns (grad, diagnostics dict of arrays)."""
    p = jax.grad(upper)(theta)
    hvp = hvp_fn(lambda t: loss(t, z), theta)
    if config.method == "aid_ns":
        scale = config.ns_scale if config.ns_scale is not None else inner_lr
        q, norms = neumann_traced(hvp, p, scale, config.iterations)
        diag = {"term_norms": norms}
    elif config.method == "aid_cg":
        q, res, k, broke = cg_traced(hvp, p, config.iterations, config.cg_tol)
        diag = {"residuals": res, "cg_iterations": k, "cg_breakdown": broke, "p_norm": jnp.linalg.norm(p)}
    else:
        raise ValueError(f"{config.method!r} is not an implicit method")
    grad = -mixed_product_fn(loss, theta, z)(q)
    diag["inner_grad_norm"] = jnp.linalg.norm(jax.grad(loss)(theta, z))
    diag["theta_norm"] = jnp.linalg.norm(theta)
    return grad, diag


def check_aid(diag: dict, config: HypergradConfig) -> list[str]:
    """Turn traced diagnostics into errors/warnings; returns warning strings."""
    warns = []
    if "term_norms" in diag:
        check_neumann(diag["term_norms"])
    if "residuals" in diag:
        k = int(diag["cg_iterations"])
        if bool(diag["cg_breakdown"]):
            raise CGBreakdownError(f"CG breakdown: non-positive curvature after {k} iterations")
        final = float(np.asarray(diag["residuals"])[k])
        if final > config.cg_tol * float(diag["p_norm"]):
            msg = f"CG did not converge in {config.iterations} iterations (residual norm {final:.3e})"
            if config.cg_strict:
                raise CGConvergenceError(msg)
            warns.append(msg)
    gnorm = float(diag["inner_grad_norm"])
    if gnorm > 1e-3 * (1.0 + float(diag["theta_norm"])):
        warns.append(f"inner problem not stationary (|grad L| = {gnorm:.3e}); implicit hypergradient may be biased")
    return warns


def hypergrad_aid(loss: Callable, upper: Callable, theta, z, config: HypergradConfig, inner_lr: float = 1.0) -> HypergradResult:
    """Implicit hypergradient -grad_theta J^T (d2L/dtheta2)^-1 d2L/dtheta dz."""
    grad, diag = aid_traced(loss, upper, jnp.asarray(theta), jnp.asarray(z), config, inner_lr)
    warns = check_aid(diag, config)
    for w in warns:
        log.debug(w)
    return HypergradResult(np.asarray(grad), {k: np.asarray(v) for k, v in diag.items()}, warns)


def unrolled_traced(step: Callable, upper: Callable, state, z, n_steps: int, depth: int):
    """Run ``n_steps`` inner updates from ``state`` and differentiate J(theta_N) w.r.t. z
    through the last ``depth`` of them. Returns (J value, grad, final state).

    ``step(state, z) -> state`` and the parameters are ``state[0]``.
    """
    if depth > n_steps:
        raise HypergradError(f"trajectory of {n_steps} steps is shorter than unroll depth {depth}")

    def run(s, zz, n):
        if n == 0:
            return s
        return jax.lax.scan(lambda c, _: (step(c, zz), None), s, None, length=n)[0]

    state = run(state, z, n_steps - depth)

    def objective(zz):
        final = run(state, zz, depth)
        return upper(final[0]), final

    (value, final), grad = jax.value_and_grad(objective, has_aux=True)(z)
    return value, grad, final


def hypergrad_reverse(step: Callable, upper: Callable, state, z, n_steps: int, depth: int | None = None) -> HypergradResult:
    """Reverse-mode unrolled hypergradient; with ``depth=0`` only the direct term (zero) remains."""
    depth = n_steps if depth is None else depth
    value, grad, final = unrolled_traced(step, upper, state, jnp.asarray(z), n_steps, depth)
    return HypergradResult(np.asarray(grad), {"value": float(value), "final_state": final})


# -- quadratic bi-level instances with a closed-form hypergradient -----------------


@dataclass
class QuadraticInstance:
    """Inner loss 0.5 t'At - t'Bz, upper objective c't; hypergradient B'A^-1 c."""

    A: np.ndarray
    B: np.ndarray
    c: np.ndarray
    z: np.ndarray

    def loss(self, theta, z):
        return 0.5 * theta @ (jnp.asarray(self.A) @ theta) - theta @ (jnp.asarray(self.B) @ z)

    def upper(self, theta):
        return jnp.asarray(self.c) @ theta

    def solution(self) -> np.ndarray:
        return np.linalg.solve(self.A, self.B @ self.z)

    def oracle(self) -> np.ndarray:
        return self.B.T @ np.linalg.solve(self.A, self.c)

    @property
    def eig_range(self) -> tuple[float, float]:
        ev = np.linalg.eigvalsh(self.A)
        return float(ev[0]), float(ev[-1])


def quadratic_instance(rng: np.random.Generator | int, dim: int, zdim: int | None = None, cond: float = 10.0) -> QuadraticInstance:
    rng = np.random.default_rng(rng)
    zdim = zdim or dim
    Q, _ = np.linalg.qr(rng.standard_normal((dim, dim)))
    ev = np.exp(rng.uniform(0.0, np.log(cond), dim))
    ev[0], ev[-1] = 1.0, cond
    A = (Q * ev) @ Q.T
    A = 0.5 * (A + A.T)
    return QuadraticInstance(A, rng.standard_normal((dim, zdim)), rng.standard_normal(dim), rng.standard_normal(zdim))


def quadratic_hypergrads(inst: QuadraticInstance, ns_terms: int = 200, cg_tol: float = 1e-10, tol: float = 1e-12) -> dict[str, np.ndarray]:
    """Hypergradients by all three estimators.

    Reverse runs gradient descent with step 1/L from zero for enough steps to
    converge to ``tol``; AID-NS uses scale 1/L; both AID variants are
    evaluated at the exact inner solution.
    """
    lo, hi = inst.eig_range
    step = 1.0 / hi
    rho = 1.0 - lo / hi
    n = 1 if rho <= 0.0 else max(1, int(np.ceil(np.log(tol) / np.log(rho))))
    theta0 = jnp.zeros(inst.A.shape[0])
    z = jnp.asarray(inst.z)
    gd = lambda s, zz: (s[0] - step * jax.grad(inst.loss)(s[0], zz),)  # noqa: E731
    _, g_rev, _ = unrolled_traced(gd, inst.upper, (theta0,), z, n, n)
    theta = jnp.asarray(inst.solution())
    out = {"reverse": np.asarray(g_rev)}
    for method, cfg in (
        ("aid_ns", HypergradConfig("aid_ns", ns_terms, ns_scale=step)),
        ("aid_cg", HypergradConfig("aid_cg", max(ns_terms, 2 * len(theta)), cg_tol=cg_tol)),
    ):
        out[method] = hypergrad_aid(inst.loss, inst.upper, theta, z, cfg).grad
    return out


def relative_error(estimate, reference) -> float:
    reference = np.asarray(reference)
    return float(np.linalg.norm(np.asarray(estimate) - reference) / max(np.linalg.norm(reference), 1e-300))
