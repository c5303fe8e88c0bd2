"""Numerical audits from KAM quasieigenvalues to eigenfunction scarring on the 2-torus."""

__version__ = "0.1.0"
