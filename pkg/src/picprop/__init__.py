"""Confidence-interval propagation for PDE solutions through physics-informed networks."""

import jax

jax.config.update("jax_enable_x64", True)

__version__ = "0.1.0"
