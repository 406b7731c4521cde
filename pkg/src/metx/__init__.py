"""Multi-expert transformer for report generation on synthetic images, on a
small numpy autodiff core."""

__version__ = "0.1.0"
