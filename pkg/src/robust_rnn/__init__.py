"""Robustness analysis and robust training of basic recurrent networks under
Gaussian input noise."""

__version__ = "0.1.0"
