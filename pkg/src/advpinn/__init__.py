"""Adversarial collocation sampling and iterative training for PINNs."""

from . import autodiff, network, oracle, pde, sampling, training  # noqa: F401

__version__ = "0.1.0"
