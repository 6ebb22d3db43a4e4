"""Adversarial multi-task learning for vulnerability type prediction and
line-level vulnerability localisation."""

__version__ = "0.1.0"
