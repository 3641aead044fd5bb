"""Numerical relaxation of coupled nematic-elastic energies in two dimensions.

Modules
-------
tensor_core
    Small dense tensor algebra: determinants, cofactors, minors, directors.
energy_models
    Mechanical and nematic densities with their structural checks.
convexify
    Lamination upper bounds, polyconvex lower bounds and cell problems.
geometry
    Piecewise-affine deformations, surface energy, degree and images.
fields
    Coupled energies of deformation and director pairs.
recovery
    Recovery sequences and an alternating minimizer.
cli
    Batch command line front end.
"""

import logging
import os

__version__ = "0.1.0"

_level = os.environ.get("NEMRELAX_LOG")
if _level:
    logging.basicConfig(level=getattr(logging, _level.upper(), logging.INFO),
                        format="%(levelname)s %(name)s: %(message)s")
