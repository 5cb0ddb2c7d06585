"""Synthetic simplicity-bias testbed: data generators, from-scratch MLPs,
feature-reliance metrics, adversarial probes and LSN gradient theory."""

__version__ = "0.1.0"
