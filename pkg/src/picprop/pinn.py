"""Physics-informed training: the weighted residual + boundary-mismatch loss and its minimizer."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import NamedTuple

import jax
import jax.numpy as jnp
import numpy as np

from .approximator import NetworkSpec, ParamVector, apply, derivative_bundle, init_params
from .problems import BoundaryDataset, PdeProblem

log = logging.getLogger(__name__)

DTYPES = {"float32": jnp.float32, "float64": jnp.float64}


class DivergenceError(FloatingPointError):
    def __init__(self, message: str, step: int | None = None):
        super().__init__(message)
        self.step = step


@dataclass(frozen=True)
class PinnConfig:
    w_f: float = 1.0
    w_b: float = 1.0
    optimizer: str = "adam"
    lr: float = 1e-3
    warmup_steps: int = 2000
    inner_steps: int = 500
    seed: int = 0
    reset_optimizer: bool = False
    divergence_threshold: float = 1e6
    dtype: str = "float64"
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8

    def __post_init__(self):
        if self.w_f < 0 or self.w_b < 0:
            raise ValueError("loss weights must be nonnegative")
        if not self.lr > 0:
            raise ValueError("learning rate must be positive")
        if self.warmup_steps < 0 or self.inner_steps < 0:
            raise ValueError("step counts must be nonnegative")
        if self.optimizer not in ("adam", "sgd"):
            raise ValueError(f"unknown inner optimizer {self.optimizer!r}")
        if self.dtype not in DTYPES:
            raise ValueError(f"unknown dtype {self.dtype!r}")


class OptState(NamedTuple):
    """Parameters plus first/second moments and step count (moments unused by SGD)."""

    theta: jax.Array
    m: jax.Array
    v: jax.Array
    t: jax.Array


def fresh_state(theta) -> OptState:
    theta = jnp.asarray(theta)
    z = jnp.zeros_like(theta)
    return OptState(theta, z, z, jnp.zeros((), theta.dtype))


@dataclass
class TrainResult:
    params: ParamVector
    state: OptState
    final_loss: float
    losses: np.ndarray = field(repr=False)


class PinnSystem:
    """A problem, dataset layout and network compiled into jitted loss/step/run functions.

    The noisy boundary values are the only data argument; everything else in
    the dataset is baked in, so one system serves every ``z`` in a region.
    """

    def __init__(self, problem: PdeProblem, dataset: BoundaryDataset, spec: NetworkSpec, config: PinnConfig):
        if spec.input_dim != problem.dim:
            raise ValueError(f"network input_dim {spec.input_dim} != problem dimension {problem.dim}")
        if dataset.force_points.shape[1] != problem.dim:
            raise ValueError("dataset is inconsistent with the problem dimension")
        self.problem = problem
        self.dataset = dataset
        self.spec = spec
        self.config = config
        self.dtype = DTYPES[config.dtype]
        dt = self.dtype
        self.Xf = jnp.asarray(dataset.force_points, dt)
        self.Xb = jnp.asarray(dataset.boundary_points, dt)
        self.b_fixed = jnp.asarray(dataset.boundary_values, dt)
        self.noisy_idx = jnp.asarray(np.flatnonzero(dataset.noisy))
        self._names = problem.derivatives
        self._indices = [problem.multi_index(n) for n in self._names]
        self.z0 = jnp.asarray(dataset.noisy_values, dt)

        self.loss_terms = jax.jit(self._loss_terms)
        self.loss = jax.jit(self._loss)
        self.grad = jax.jit(jax.grad(self._loss))
        self.step = jax.jit(self._step)
        self.u = jax.jit(lambda theta, X: apply(spec, theta, X))
        self._run = jax.jit(self._run_impl, static_argnums=2)

    # -- pure functions (traceable)

    def _loss_terms(self, theta, z):
        d = derivative_bundle(self.spec, theta, self.Xf, self._indices)
        r = self.problem.residual({n: d[i] for n, i in zip(self._names, self._indices)}, self.Xf)
        force = jnp.mean(r**2)
        b = self.b_fixed.at[self.noisy_idx].set(z)
        bnd = jnp.mean((apply(self.spec, theta, self.Xb) - b) ** 2)
        return force, bnd

    def _loss(self, theta, z):
        force, bnd = self._loss_terms(theta, z)
        return self.config.w_f * force + self.config.w_b * bnd

    def _step(self, state: OptState, z) -> OptState:
        return self._step_with_loss(state, z)[0]

    def _step_with_loss(self, state: OptState, z) -> tuple[OptState, jax.Array]:
        cfg = self.config
        loss, g = jax.value_and_grad(self._loss)(state.theta, z)
        t = state.t + 1
        if cfg.optimizer == "sgd":
            return OptState(state.theta - cfg.lr * g, state.m, state.v, t), loss
        b1, b2 = cfg.betas
        m = b1 * state.m + (1 - b1) * g
        v = b2 * state.v + (1 - b2) * g * g
        mhat = m / (1 - b1**t)
        vhat = v / (1 - b2**t)
        theta = state.theta - cfg.lr * mhat / (jnp.sqrt(vhat) + cfg.eps)
        return OptState(theta, m, v, t), loss

    def _run_impl(self, state: OptState, z, n: int):
        return jax.lax.scan(lambda s, _: self._step_with_loss(s, z), state, None, length=n)

    # -- helpers

    def cast_z(self, z) -> jax.Array:
        z = jnp.asarray(z, self.dtype).ravel()
        if z.shape[0] != self.noisy_idx.shape[0]:
            raise ValueError(f"expected {self.noisy_idx.shape[0]} noisy values, got {z.shape[0]}")
        return z

    def initial_state(self, init: ParamVector | None = None) -> OptState:
        if init is None:
            init = init_params(self.spec, self.config.seed, self.dtype)
        if init.spec != self.spec:
            raise ValueError("initial parameters were built for a different network")
        return fresh_state(jnp.asarray(init.values, self.dtype))

    def run(self, state: OptState, z, n: int) -> tuple[OptState, np.ndarray]:
        """``n`` optimizer steps at fixed ``z``; raises :class:`DivergenceError`."""
        if n == 0:
            return state, np.zeros(0)
        new, losses = self._run(state, self.cast_z(z), int(n))
        losses = np.asarray(losses)
        bad = ~np.isfinite(losses) | (losses > self.config.divergence_threshold)
        if bad.any() or not bool(jnp.all(jnp.isfinite(new.theta))):
            k = int(np.argmax(bad)) if bad.any() else n
            raise DivergenceError(f"training diverged at step {k} (loss {losses[min(k, n - 1)]:.3e})", step=k)
        return new, losses

    def train(self, z=None, steps: int | None = None, init: ParamVector | None = None, state: OptState | None = None) -> TrainResult:
        z = self.z0 if z is None else z
        steps = self.config.warmup_steps if steps is None else steps
        state = self.initial_state(init) if state is None else state
        state, losses = self.run(state, z, steps)
        final = float(self.loss(state.theta, self.cast_z(z)))
        return TrainResult(ParamVector(self.spec, state.theta), state, final, losses)

    def evaluate(self, theta, points) -> np.ndarray:
        return np.asarray(self.u(jnp.asarray(theta, self.dtype), jnp.asarray(np.atleast_2d(points), self.dtype)))


def pinn_loss_terms(params: ParamVector, dataset: BoundaryDataset, problem: PdeProblem, config: PinnConfig | None = None) -> tuple[float, float]:
    """Unweighted (force, boundary) mean-square terms."""
    config = config or PinnConfig()
    system = PinnSystem(problem, dataset, params.spec, config)
    f, b = system.loss_terms(jnp.asarray(params.values, system.dtype), system.z0)
    return float(f), float(b)


def pinn_loss(params: ParamVector, dataset: BoundaryDataset, problem: PdeProblem, config: PinnConfig | None = None) -> float:
    config = config or PinnConfig()
    f, b = pinn_loss_terms(params, dataset, problem, config)
    return config.w_f * f + config.w_b * b


def train(
    dataset: BoundaryDataset,
    problem: PdeProblem,
    config: PinnConfig,
    spec: NetworkSpec,
    init_params: ParamVector | None = None,
    steps: int | None = None,
) -> TrainResult:
    return PinnSystem(problem, dataset, spec, config).train(steps=steps, init=init_params)
