"""Spherical-harmonic shading: 9 real basis functions through band 2.

Lighting is 9 coefficient triples (one RGB triple per basis function);
shading multiplies per-point albedo by the SH-weighted basis evaluated at
the unit surface normal. Values are radiometric and unclamped here; display
clamping happens at rasterization output.
"""

from __future__ import annotations

import numpy as np

from .tensor import ShapeError

# band 0; band 1 (y, z, x); band 2 (xy, yz, 3z²-1, xz, x²-y²)
_C0 = 0.282095
_C1 = 0.488603
_C2 = 1.092548
_C3 = 0.315392
_C4 = 0.546274

N_BANDS = 9


def sh_basis(normals: np.ndarray) -> np.ndarray:
    """Evaluate the 9 basis functions at unit normals; (..., 3) -> (..., 9)."""
    normals = np.asarray(normals, dtype=np.float64)
    if normals.shape[-1] != 3:
        raise ShapeError(f"normals must have a trailing dimension of 3, got {normals.shape}")
    lengths = np.linalg.norm(normals, axis=-1)
    if np.any(np.abs(lengths - 1.0) > 1e-6):
        worst = float(np.abs(lengths - 1.0).max())
        raise ValueError(f"normals must be unit length within 1e-6, worst deviation {worst:.3e}")
    x, y, z = normals[..., 0], normals[..., 1], normals[..., 2]
    return np.stack(
        [
            np.full_like(x, _C0),
            _C1 * y,
            _C1 * z,
            _C1 * x,
            _C2 * x * y,
            _C2 * y * z,
            _C3 * (3.0 * z * z - 1.0),
            _C2 * x * z,
            _C4 * (x * x - y * y),
        ],
        axis=-1,
    )


def shade(albedo: np.ndarray, normals: np.ndarray, lighting: np.ndarray) -> np.ndarray:
    """albedo ⊙ Σ_k lighting_k · basis_k(normal); unclamped RGB.

    ``albedo`` and ``normals`` are (..., 3); ``lighting`` is 9×3.
    """
    lighting = np.asarray(lighting, dtype=np.float64)
    if lighting.shape != (N_BANDS, 3):
        raise ShapeError(f"lighting must be 9 coefficient triples, got {lighting.shape}")
    albedo = np.asarray(albedo, dtype=np.float64)
    irradiance = sh_basis(normals) @ lighting  # (..., 3)
    return albedo * irradiance
