"""Fully connected tanh networks over a flat parameter vector.

All network functions are pure functions of ``(spec, flat_params, points)`` so
they compose with :func:`jax.grad`, :func:`jax.jvp` and friends to any depth.
Spatial derivatives are taken with nested forward-mode AD on the whole batch,
which keeps the third-order differentiation needed for hypergradients exact.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Callable, Sequence

import jax
import jax.numpy as jnp
import numpy as np

MultiIndex = tuple[int, ...]


class NonFiniteLossError(FloatingPointError):
    """Raised when a loss evaluates to NaN or inf."""

    def __init__(self, message: str, term: str | None = None, value: float | None = None):
        super().__init__(message)
        self.term = term
        self.value = value


class DataIndependenceWarning(UserWarning):
    """The loss does not depend on the data values it was differentiated against."""


@dataclass(frozen=True)
class NetworkSpec:
    input_dim: int
    hidden_width: int
    hidden_depth: int
    activation: str = "tanh"
    output_dim: int = 1

    def __post_init__(self):
        if self.input_dim < 1:
            raise ValueError(f"input_dim must be >= 1, got {self.input_dim}")
        if self.hidden_width < 1 or self.hidden_depth < 1:
            raise ValueError("hidden_width and hidden_depth must be >= 1")
        if self.activation != "tanh":
            raise ValueError(f"unsupported activation {self.activation!r}")
        if self.output_dim != 1:
            raise ValueError("only scalar-output networks are supported")

    @property
    def layer_sizes(self) -> list[int]:
        return [self.input_dim] + [self.hidden_width] * self.hidden_depth + [self.output_dim]

    def layout(self) -> list[tuple[str, tuple[int, ...], int]]:
        """(name, shape, offset) for every weight and bias in the flat vector."""
        out = []
        offset = 0
        sizes = self.layer_sizes
        for i, (fan_in, fan_out) in enumerate(zip(sizes[:-1], sizes[1:])):
            out.append((f"W{i}", (fan_in, fan_out), offset))
            offset += fan_in * fan_out
            out.append((f"b{i}", (fan_out,), offset))
            offset += fan_out
        return out

    @property
    def n_params(self) -> int:
        name, shape, offset = self.layout()[-1]
        return offset + int(np.prod(shape))


@dataclass(frozen=True, eq=False)
class ParamVector:
    """Flat network parameters together with the spec that gives them meaning."""

    spec: NetworkSpec
    values: jax.Array

    def __post_init__(self):
        values = jnp.asarray(self.values)
        if values.ndim != 1 or values.shape[0] != self.spec.n_params:
            raise ValueError(
                f"parameter vector of shape {values.shape} does not match layout "
                f"with {self.spec.n_params} entries"
            )
        object.__setattr__(self, "values", values)

    def __len__(self) -> int:
        return self.spec.n_params

    def replace(self, values) -> "ParamVector":
        return ParamVector(self.spec, values)

    def is_finite(self) -> bool:
        return bool(jnp.all(jnp.isfinite(self.values)))

    def to_dict(self) -> dict:
        return {
            "spec": asdict(self.spec),
            "dtype": str(self.values.dtype),
            "values": [float(v) for v in np.asarray(self.values, dtype=np.float64)],
        }

    @classmethod
    def from_dict(cls, data: dict) -> "ParamVector":
        spec = NetworkSpec(**data["spec"])
        values = np.asarray(data["values"], dtype=np.float64).astype(data.get("dtype", "float64"))
        return cls(spec, jnp.asarray(values))

    def save(self, path: str | Path) -> None:
        path = Path(path)
        if path.suffix == ".npz":
            np.savez(path, values=np.asarray(self.values), spec=json.dumps(asdict(self.spec)))
        else:
            path.write_text(json.dumps(self.to_dict()))

    @classmethod
    def load(cls, path: str | Path) -> "ParamVector":
        path = Path(path)
        if path.suffix == ".npz":
            with np.load(path) as data:
                spec = NetworkSpec(**json.loads(str(data["spec"])))
                return cls(spec, jnp.asarray(data["values"]))
        return cls.from_dict(json.loads(path.read_text()))


def init_params(spec: NetworkSpec, seed: int, dtype=jnp.float64) -> ParamVector:
    """Symmetric uniform fan-in initialization, U(-1/sqrt(fan_in), 1/sqrt(fan_in))."""
    rng = np.random.default_rng(seed)
    chunks = []
    for name, shape, _ in spec.layout():
        fan_in = shape[0] if name.startswith("W") else _fan_in_of_bias(spec, name)
        bound = 1.0 / np.sqrt(fan_in)
        chunks.append(rng.uniform(-bound, bound, size=shape).ravel())
    return ParamVector(spec, jnp.asarray(np.concatenate(chunks), dtype=dtype))


def _fan_in_of_bias(spec: NetworkSpec, name: str) -> int:
    return spec.layer_sizes[int(name[1:])]


def _values(params) -> jax.Array:
    return params.values if isinstance(params, ParamVector) else params


def unflatten(spec: NetworkSpec, flat: jax.Array) -> list[tuple[jax.Array, jax.Array]]:
    layers = []
    layout = spec.layout()
    for (_, wshape, woff), (_, bshape, boff) in zip(layout[::2], layout[1::2]):
        W = flat[woff : woff + wshape[0] * wshape[1]].reshape(wshape)
        b = flat[boff : boff + bshape[0]]
        layers.append((W, b))
    return layers


def apply(spec: NetworkSpec, flat: jax.Array, points: jax.Array) -> jax.Array:
    """Network output for a batch of points of shape (N, input_dim); returns (N,)."""
    h = points
    layers = unflatten(spec, flat)
    for W, b in layers[:-1]:
        h = jnp.tanh(h @ W + b)
    W, b = layers[-1]
    return (h @ W + b)[:, 0]


def _check_points(spec: NetworkSpec, points) -> jax.Array:
    points = jnp.asarray(points)
    if points.ndim == 1 and spec.input_dim == 1:
        points = points[:, None]
    if points.ndim != 2 or points.shape[1] != spec.input_dim:
        raise ValueError(
            f"points of shape {points.shape} do not match network input_dim={spec.input_dim}"
        )
    return points


def forward(params: ParamVector, points) -> jax.Array:
    points = _check_points(params.spec, points)
    return apply(params.spec, params.values, points.astype(params.values.dtype))


def derivative_fn(spec: NetworkSpec, index: MultiIndex) -> Callable[[jax.Array, jax.Array], jax.Array]:
    """Return ``f(flat, points)`` computing the mixed partial ``index`` of the network.

    Each point's output depends only on its own input, so a batch-wide JVP with a
    constant unit tangent yields per-point partial derivatives.
    """
    index = tuple(int(i) for i in index)
    if len(index) != spec.input_dim:
        raise ValueError(f"multi-index {index} has wrong length for input_dim={spec.input_dim}")
    if any(i < 0 for i in index):
        raise ValueError(f"negative order in multi-index {index}")
    order = sum(index)
    if order > 2:
        raise ValueError(f"derivative order {order} > 2 is not supported")
    directions = [d for d, k in enumerate(index) for _ in range(k)]

    def f(flat, points):
        fn = lambda X: apply(spec, flat, X)
        for d in directions:
            tangent = jnp.zeros_like(points).at[:, d].set(1.0)
            fn = _jvp_of(fn, tangent)
        return fn(points)

    return f


def _jvp_of(fn, tangent):
    def dfn(X):
        return jax.jvp(fn, (X,), (tangent,))[1]

    return dfn


def derivative_bundle(spec: NetworkSpec, flat, points, indices: Sequence[MultiIndex]) -> dict[MultiIndex, jax.Array]:
    """Several partials at once, sharing nested JVPs along each axis.

    Pure-axis orders (u, u_d, u_dd) come out of a single nested JVP per axis;
    mixed second partials get their own pass.
    """
    fn = lambda X: apply(spec, flat, X)
    out: dict[MultiIndex, jax.Array] = {}
    zero = (0,) * spec.input_dim
    axes: dict[int, int] = {}
    mixed = []
    for idx in map(tuple, indices):
        if sum(idx) > 2:
            raise ValueError(f"derivative order {sum(idx)} > 2 is not supported")
        nz = [d for d, k in enumerate(idx) if k]
        if len(nz) == 1:
            axes[nz[0]] = max(axes.get(nz[0], 0), idx[nz[0]])
        elif len(nz) == 2:
            mixed.append(idx)
    for d, order in axes.items():
        e = jnp.zeros_like(points).at[:, d].set(1.0)
        first = lambda X, e=e: jax.jvp(fn, (X,), (e,))
        one = tuple(1 if i == d else 0 for i in range(spec.input_dim))
        if order == 1:
            out[zero], out[one] = first(points)
        else:
            (u, du), (_, d2u) = jax.jvp(first, (points,), (e,))
            two = tuple(2 if i == d else 0 for i in range(spec.input_dim))
            out[zero], out[one], out[two] = u, du, d2u
    for idx in mixed:
        out[idx] = derivative_fn(spec, idx)(flat, points)
    if zero not in out and any(sum(i) == 0 for i in map(tuple, indices)):
        out[zero] = fn(points)
    return {tuple(i): out[tuple(i)] for i in indices}


def spatial_derivatives(
    params: ParamVector, points, orders: Sequence[MultiIndex]
) -> dict[MultiIndex, jax.Array]:
    points = _check_points(params.spec, points).astype(params.values.dtype)
    return {
        tuple(idx): derivative_fn(params.spec, idx)(params.values, points) for idx in orders
    }


def loss_gradient(params, loss: Callable, *, has_terms: bool = False) -> jax.Array:
    """Gradient of ``loss(theta)`` with respect to the flat parameters.

    With ``has_terms=True`` the loss returns ``(total, {name: term})`` and a
    non-finite total is reported with the name of the first offending term.
    """
    theta = _values(params)
    if has_terms:
        (value, terms), grad = jax.value_and_grad(loss, has_aux=True)(theta)
    else:
        value, grad = jax.value_and_grad(loss)(theta)
        terms = {}
    if not np.isfinite(float(value)):
        bad = next((k for k, v in terms.items() if not np.isfinite(float(v))), None)
        raise NonFiniteLossError(
            f"loss is not finite ({float(value)})" + (f"; offending term: {bad}" if bad else ""),
            term=bad,
            value=float(value),
        )
    return grad


def hvp_fn(loss: Callable[[jax.Array], jax.Array], theta: jax.Array) -> Callable[[jax.Array], jax.Array]:
    """Hessian-vector product closure at ``theta`` (forward-over-reverse)."""
    grad = jax.grad(loss)

    def hvp(v):
        return jax.jvp(grad, (theta,), (v,))[1]

    return hvp


def hessian_vector_product(params, loss: Callable, v) -> jax.Array:
    theta = _values(params)
    v = _values(v)
    if jnp.shape(v) != jnp.shape(theta):
        raise ValueError(f"vector of shape {jnp.shape(v)} does not match parameters {jnp.shape(theta)}")
    return hvp_fn(loss, theta)(jnp.asarray(v, dtype=theta.dtype))


def mixed_product_fn(loss: Callable[[jax.Array, jax.Array], jax.Array], theta, z):
    """Closure ``v -> v^T (d/dz grad_theta loss)`` at ``(theta, z)``."""
    grad_theta = jax.grad(loss, argnums=0)

    def mixed(v):
        return jax.grad(lambda zz: jnp.vdot(v, grad_theta(theta, zz)))(z)

    return mixed


def mixed_second_product(params, data_values, loss: Callable, v) -> jax.Array:
    """Contract ``v`` with the mixed parameter/data second derivative of ``loss(theta, z)``."""
    theta = _values(params)
    v = _values(v)
    if jnp.shape(v) != jnp.shape(theta):
        raise ValueError(f"vector of shape {jnp.shape(v)} does not match parameters {jnp.shape(theta)}")
    z = jnp.asarray(data_values, dtype=theta.dtype)
    out = mixed_product_fn(loss, theta, z)(jnp.asarray(v, dtype=theta.dtype))
    if not bool(jnp.any(out != 0)):
        warnings.warn("loss has no dependence on the data values", DataIndependenceWarning, stacklevel=2)
    return out
