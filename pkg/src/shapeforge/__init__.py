"""Free-form shape optimization of 2D nonlinear magnetostatic devices."""
__version__ = "0.1.0"
