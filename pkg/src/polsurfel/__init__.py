"""Polarization-aware Gaussian surfel reconstruction on the CPU.

Modules:
    polcore     Stokes algebra, angle/degree of polarization, Fresnel terms
    surfel      surfel parameters, cameras and projection
    render      tiled rasterizer, deferred shading and their adjoints
    tangent     tangent-space consistency between normals and AoP
    visibility  depth-guided visibility masks
    loss        training objectives with analytic gradients
    optim       Adam training loop with warm-up and density control
    synth       analytic ground-truth scenes and datasets
    metrics     normal MAE and Chamfer distance
    cli         command-line entry point
"""
from .polcore import (FresnelTerms, PolarizationInputError, PolarizedQuadruple, StokesImage, aop, dolp,
                      fresnel, pbrdf_stokes, quadruple_from_stokes, stokes_from_quadruple)
from .surfel import Camera, CameraView, SurfelSet

__version__ = "0.1.0"
__all__ = ["Camera", "CameraView", "SurfelSet", "FresnelTerms", "PolarizationInputError",
           "PolarizedQuadruple", "StokesImage", "aop", "dolp", "fresnel", "pbrdf_stokes",
           "quadruple_from_stokes", "stokes_from_quadruple"]
