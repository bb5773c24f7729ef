"""Numerical laboratory for blowup analysis of Liouville systems on the torus."""

__version__ = "0.1.0"
