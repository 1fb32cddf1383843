"""Adversarial color masking of Gaussian-splat heads against face-embedding verifiers."""

__version__ = "0.1.0"
