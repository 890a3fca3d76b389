"""Belief-imputation reinforcement learning for incomplete, noisy observations."""

__version__ = "0.1.0"
