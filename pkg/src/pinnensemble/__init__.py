"""Ensembles of physics-informed networks for field inverse problems."""

import jax

# second-derivative checks need double precision throughout
jax.config.update("jax_enable_x64", True)

__version__ = "0.1.0"
