"""Momentum-contrast pretraining on before/after tactile grasp images, with baselines and frozen-feature probes."""

__version__ = "0.1.0"
