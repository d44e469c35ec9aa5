"""Offline contextual bandits with interpolating models: data, learners, stability and bounds."""

__version__ = "0.1.0"
