"""Hybrid MPM fluid/solid simulation with a learned pressure predictor.

Submodules are imported on demand so that thread settings made by the
command line take effect before the numerical libraries load.
"""

__version__ = "0.1.0"
