"""Adversarial robustness benchmark for encrypted-traffic flow classifiers."""

__version__ = "0.1.0"
