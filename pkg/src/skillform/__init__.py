"""Simulation, estimation, and analysis of dynamic latent skill formation models."""

from . import analysis, baselines, bootstrap, cli, dgp, iterative, model, numkit

__all__ = ["analysis", "baselines", "bootstrap", "cli", "dgp", "iterative", "model", "numkit"]
__version__ = "0.1.0"
