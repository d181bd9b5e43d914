"""Transfer-learning regularized discriminant analysis with random-matrix plug-in weights."""

__version__ = "0.1.0"

from . import errors, spectral, sample, hyper, weights, simgen, risk  # noqa: E402,F401
