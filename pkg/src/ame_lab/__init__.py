"""Attentive mixtures of experts with a Granger-causal objective."""

__version__ = "0.1.0"
