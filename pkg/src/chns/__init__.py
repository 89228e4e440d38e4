"""Cahn-Hilliard-Navier-Stokes solver for sheared polymer blends in a periodic channel.

Continuous P1 phase field and chemical potential, Taylor-Hood P2-P1 flow,
convex-concave time splitting with dynamic wall conditions, and a
composition-blended Carreau-Yasuda viscosity.
"""

__version__ = "0.1.0"
