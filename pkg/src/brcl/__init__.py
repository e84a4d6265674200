"""Brown-Resnick random fields on Poisson-Delaunay sites.

Simulation of isotropic fractional Brownian and Brown-Resnick fields,
squared-increment statistics over Delaunay edges and triangles, and
tapered composite-likelihood estimation of the scale and range parameters.
"""

__version__ = "0.1.0"

from .gaussfield import ModelParams

__all__ = ["ModelParams", "__version__"]
