"""Surrogate models for stochastic simulations.

The pipeline: pool simulator output, extract an orthogonal basis of the
output covariance (kl), expand the basis coordinates of each run in Hermite
polynomial chaos fitted through a kernel density transform (kde + pce), and
regress the chaos coefficients on simulator inputs with a Bayesian
Gaussian process (gp).  The emulator module glues the stages together and
the cli module exposes them as commands.  A stochastic SIR epidemic model
(sir_sde) is the built-in test bed.
"""

__version__ = "0.1.0"

from . import errors  # noqa: F401
