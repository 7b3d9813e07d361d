"""Order selection for mixtures of autoregressive experts."""

__version__ = "0.1.0"
