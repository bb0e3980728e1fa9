"""Multi-anchor CSI-fingerprint positioning with uncertainty-aware fusion."""

__version__ = "0.1.0"
