"""Soft-label training objectives and their effect on OOD detection, on a small numpy autodiff core."""

__version__ = "0.1.0"
