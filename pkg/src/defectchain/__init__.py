"""Bayesian quantification of wrinkle defects from ultrasound B-scans.

The pipeline extracts ply-misalignment measurements from grayscale scan
images, infers the posterior distribution of a Karhunen-Loeve wrinkle
parameterization with a preconditioned Crank-Nicolson sampler, and
propagates posterior samples through pluggable strength models to obtain
knocked-down strength distributions and Weibull fits.
"""

__version__ = "0.1.0"
