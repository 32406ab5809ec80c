"""Trojan attacks on actor-critic agents in pixel-grid toy environments."""

__version__ = "0.1.0"
