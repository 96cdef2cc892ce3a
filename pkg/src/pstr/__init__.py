"""One-step transformer person search (detection + re-id) on a NumPy autodiff core."""

__version__ = "0.1.0"
