"""Mass of asymptotically flat half-spaces: geometry, quadrature and elliptic tools."""

__version__ = "0.1.0"
