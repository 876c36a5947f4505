"""Desk-scale talking-head conditioning pipeline.

Parametric face guidance rendering (geometry, spherical-harmonics lighting,
software rasterization), masked cross-source training-pair sampling, and a
small diffusion conditioning network with a from-scratch autodiff core.
"""

__version__ = "0.1.0"
