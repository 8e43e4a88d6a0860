"""momentum_lab – quasi-hyperbolic momentum analysis toolkit."""

__version__ = "0.3.0"
