"""Game-theoretic multi-agent prediction and planning with learned player selection."""

__version__ = "0.1.0"
