"""Online detection of pipe blockages and background leakages in water networks."""

__version__ = "0.1.0"
