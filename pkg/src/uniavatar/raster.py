"""Software rasterization, Gaussian blur, and the end-to-end face renderer.

The rasterizer walks triangles in index order, tests pixel centers with an
inclusive edge rule, resolves visibility with a z-buffer (smaller depth
wins, ties keep the lower triangle index), interpolates normals and albedo
barycentrically, then shades all covered pixels in one deferred pass.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import shading
from .facemodel import FaceModel, FaceParams, project_orthographic, synthesize_geometry, to_pixels
from .tensor import ConfigError


@dataclass
class RenderOutput:
    """One rendered view: displayable image plus raw shading by-products."""

    image: np.ndarray  # H×W×3 in [0,1], zero outside coverage
    radiance: np.ndarray  # H×W×3 pre-clamp shading values
    coverage_mask: np.ndarray  # H×W bool
    depth: np.ndarray  # H×W, +inf where uncovered


def rasterize(
    pixels: np.ndarray,
    depths: np.ndarray,
    triangles: np.ndarray,
    normals: np.ndarray,
    albedo: np.ndarray,
    lighting: np.ndarray,
    height: int,
    width: int,
) -> RenderOutput:
    """Render projected geometry onto an H×W canvas.

    ``pixels`` are per-vertex pixel-space coordinates (x right, y down,
    integers at pixel centers); ``depths`` per-vertex depth values.
    """
    if height < 1 or width < 1:
        raise ConfigError(f"canvas must be at least 1×1, got {height}×{width}")
    zbuf = np.full((height, width), np.inf)
    normal_buf = np.zeros((height, width, 3))
    albedo_buf = np.zeros((height, width, 3))
    covered = np.zeros((height, width), dtype=bool)

    for tri in np.asarray(triangles, dtype=np.int64):
        p0, p1, p2 = pixels[tri[0]], pixels[tri[1]], pixels[tri[2]]
        area = (p1[0] - p0[0]) * (p2[1] - p0[1]) - (p1[1] - p0[1]) * (p2[0] - p0[0])
        if area == 0.0:
            continue
        xs = (p0[0], p1[0], p2[0])
        ys = (p0[1], p1[1], p2[1])
        c_lo = max(0, int(np.ceil(min(xs))))
        c_hi = min(width - 1, int(np.floor(max(xs))))
        r_lo = max(0, int(np.ceil(min(ys))))
        r_hi = min(height - 1, int(np.floor(max(ys))))
        if c_lo > c_hi or r_lo > r_hi:
            continue
        cg, rg = np.meshgrid(
            np.arange(c_lo, c_hi + 1, dtype=np.float64),
            np.arange(r_lo, r_hi + 1, dtype=np.float64),
        )
        # edge functions: signed doubled areas of (p1,p2,p), (p2,p0,p), (p0,p1,p)
        w0 = (p2[0] - p1[0]) * (rg - p1[1]) - (p2[1] - p1[1]) * (cg - p1[0])
        w1 = (p0[0] - p2[0]) * (rg - p2[1]) - (p0[1] - p2[1]) * (cg - p2[0])
        w2 = (p1[0] - p0[0]) * (rg - p0[1]) - (p1[1] - p0[1]) * (cg - p0[0])
        if area > 0:
            inside = (w0 >= 0) & (w1 >= 0) & (w2 >= 0)
        else:
            inside = (w0 <= 0) & (w1 <= 0) & (w2 <= 0)
        if not inside.any():
            continue
        b0, b1, b2 = w0 / area, w1 / area, w2 / area
        depth = b0 * depths[tri[0]] + b1 * depths[tri[1]] + b2 * depths[tri[2]]
        window = (slice(r_lo, r_hi + 1), slice(c_lo, c_hi + 1))
        win = inside & (depth < zbuf[window])
        if not win.any():
            continue
        zbuf[window] = np.where(win, depth, zbuf[window])
        covered[window] |= win
        interp_n = (
            b0[..., None] * normals[tri[0]]
            + b1[..., None] * normals[tri[1]]
            + b2[..., None] * normals[tri[2]]
        )
        interp_a = (
            b0[..., None] * albedo[tri[0]]
            + b1[..., None] * albedo[tri[1]]
            + b2[..., None] * albedo[tri[2]]
        )
        normal_buf[window] = np.where(win[..., None], interp_n, normal_buf[window])
        albedo_buf[window] = np.where(win[..., None], interp_a, albedo_buf[window])

    radiance = np.zeros((height, width, 3))
    if covered.any():
        n = normal_buf[covered]
        lengths = np.linalg.norm(n, axis=1, keepdims=True)
        n = np.where(lengths > 1e-12, n / np.where(lengths > 0, lengths, 1.0), (0.0, 0.0, 1.0))
        radiance[covered] = shading.shade(albedo_buf[covered], n, lighting)
    image = np.clip(radiance, 0.0, 1.0)
    image[~covered] = 0.0
    return RenderOutput(image=image, radiance=radiance, coverage_mask=covered, depth=zbuf)


def render_face(model: FaceModel, params: FaceParams, size: int) -> RenderOutput:
    """Full pipeline: pose, project, rasterize, shade on a size×size canvas."""
    params.validate(model)
    verts, normals = synthesize_geometry(model, params.shape, params.expression, params.pose)
    uv, depth = project_orthographic(verts, params.camera)
    pixels = to_pixels(uv, size, size)
    return rasterize(
        pixels, depth, model.triangles, normals, model.albedo_or_default(), params.lighting, size, size
    )


# ---------------------------------------------------------------------------
# Gaussian blur


def gaussian_kernel(radius: int) -> np.ndarray:
    """(2·radius+1)² kernel with σ = radius/3, normalized to sum 1."""
    if radius < 1:
        raise ConfigError(f"blur radius must be at least 1, got {radius}")
    sigma = radius / 3.0
    offsets = np.arange(-radius, radius + 1, dtype=np.float64)
    gi, gj = np.meshgrid(offsets, offsets, indexing="ij")
    kernel = np.exp(-(gi**2 + gj**2) / (2.0 * sigma**2))
    return kernel / kernel.sum()


def gaussian_blur(image: np.ndarray, radius: int) -> np.ndarray:
    """Blur H×W or H×W×C with the normalized kernel, reflect padding."""
    kernel = gaussian_kernel(radius)
    image = np.asarray(image, dtype=np.float64)
    single = image.ndim == 2
    if single:
        image = image[..., None]
    padded = np.pad(image, ((radius, radius), (radius, radius), (0, 0)), mode="reflect")
    out = np.empty_like(image)
    for ch in range(image.shape[2]):
        windows = np.lib.stride_tricks.sliding_window_view(padded[:, :, ch], kernel.shape)
        out[:, :, ch] = np.einsum("hwij,ij->hw", windows, kernel)
    return out[..., 0] if single else out
