"""exitlim: conditioned diffusion exit problems at desk scale.

Simulates small-noise diffusions conditioned to exit a domain through an
unlikely boundary face, both by brute-force rejection and by the exact
drift correction b + eps^2 a Dh/h built from the exit probability h.
Computes the limiting conditioned drift and its first correction from the
characteristics of the stationary Hamilton-Jacobi equation, solves the
exit-probability boundary value problem on grids, and checks the Gaussian
law of the rescaled exit time and location against samples.
"""

__version__ = "0.1.0"

from . import (  # noqa: F401
    conditioning,
    dynamics,
    geometry,
    hjb_characteristics,
    hjb_elliptic,
    scaling_limit,
    sde_sim,
    stats,
)
