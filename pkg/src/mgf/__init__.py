"""Masked Gaussian fields: building-focused Gaussian reconstruction and meshing.

Submodules are imported on demand so the command-line entry point can set
thread limits before numpy loads.
"""

__version__ = "0.1.0"
