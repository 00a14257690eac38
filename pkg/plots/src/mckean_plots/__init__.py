"""Figures for the mckean experiment runner's CSV outputs."""

from .figures import (FIGURE_KINDS, FigureSpec, SchemaError, read_csv,
                      refit_scan, render)

__all__ = ["FIGURE_KINDS", "FigureSpec", "SchemaError", "read_csv",
           "refit_scan", "render"]
__version__ = "0.1.0"
