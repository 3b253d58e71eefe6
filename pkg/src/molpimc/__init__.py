"""Path-integral Monte Carlo for small Coulomb systems."""
__version__ = "0.1.0"
