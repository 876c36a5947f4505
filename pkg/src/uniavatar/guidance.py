"""The two disentangled condition images and their training-time augmentations.

Motion guidance renders the target geometry under one fixed lighting rig, so
it varies only with pose/shape/expression/camera. Illumination guidance
renders the neutral zero-pose head under the target lighting and blurs it,
so it varies only with lighting. Lips masking and condition dropout are the
stochastic augmentations applied to guidance during training.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .facemodel import FaceModel, FaceParams
from .raster import gaussian_blur, render_face
from .tensor import ConfigError


def default_fixed_lighting() -> np.ndarray:
    """Ambient-dominant rig with a mild frontal term so geometry reads."""
    lighting = np.zeros((9, 3))
    lighting[0] = 2.5
    lighting[2] = 0.6
    return lighting


@dataclass
class GuidanceConfig:
    fixed_lighting: np.ndarray = field(default_factory=default_fixed_lighting)
    blur_radius: int = 15
    lips_mask_prob: float = 0.4
    motion_dropout_prob: float = 0.2
    global_dropout_prob: float = 0.05

    def __post_init__(self):
        self.fixed_lighting = np.asarray(self.fixed_lighting, dtype=np.float64)
        for label, p in (
            ("lips_mask_prob", self.lips_mask_prob),
            ("motion_dropout_prob", self.motion_dropout_prob),
            ("global_dropout_prob", self.global_dropout_prob),
        ):
            if not 0.0 <= p <= 1.0:
                raise ConfigError(f"{label} must be in [0, 1], got {p}")
        if self.blur_radius < 1:
            raise ConfigError(f"blur_radius must be at least 1, got {self.blur_radius}")


@dataclass
class GuidanceImage:
    """One condition image plus the bookkeeping its consumers need."""

    kind: str  # "motion" | "illumination"
    image: np.ndarray  # H×W×3 in [0,1]
    coverage_mask: np.ndarray  # H×W bool
    dropped: bool = False
    blur_radius: int | None = None  # set for illumination kind
    lips_masked: bool = False


def render_motion_guidance(
    model: FaceModel, target: FaceParams, config: GuidanceConfig, size: int
) -> GuidanceImage:
    """Target geometry under the fixed rig; target lighting is never read."""
    lit = replace(target, lighting=config.fixed_lighting)
    out = render_face(model, lit, size)
    return GuidanceImage(kind="motion", image=out.image, coverage_mask=out.coverage_mask)


def render_illumination_guidance(
    model: FaceModel,
    target_lighting: np.ndarray,
    camera: np.ndarray,
    config: GuidanceConfig,
    size: int,
) -> GuidanceImage:
    """Neutral zero-pose head under the target lighting, then blurred."""
    params = FaceParams.neutral(model, target_lighting)
    params.camera = np.asarray(camera, dtype=np.float64)
    out = render_face(model, params, size)
    blurred = gaussian_blur(out.image, config.blur_radius)
    return GuidanceImage(
        kind="illumination",
        image=blurred,
        coverage_mask=out.coverage_mask,
        blur_radius=config.blur_radius,
    )


def lips_pixel_mask(model: FaceModel, target: FaceParams, size: int) -> np.ndarray:
    """Coverage of the triangles touching the tagged lips vertices."""
    lips = set(model.lips_vertices.tolist())
    if not lips:
        return np.zeros((size, size), dtype=bool)
    touching = np.array([any(int(v) in lips for v in tri) for tri in model.triangles])
    sub = FaceModel(
        template=model.template,
        shape_basis=model.shape_basis,
        expression_basis=model.expression_basis,
        triangles=model.triangles[touching],
        albedo=model.albedo,
        lips_vertices=model.lips_vertices,
    )
    return render_face(sub, target, size).coverage_mask


def apply_lips_mask(
    g: GuidanceImage, lips_mask: np.ndarray, rng: np.random.Generator, p: float
) -> GuidanceImage:
    """With probability p, zero the lips-region pixels of a motion guidance."""
    if g.kind != "motion":
        raise ConfigError(f"lips masking applies to motion guidance, got kind={g.kind!r}")
    if rng.random() >= p:
        return g
    image = g.image.copy()
    image[lips_mask] = 0.0
    return replace(g, image=image, lips_masked=True)


def apply_condition_dropout(g: GuidanceImage, rng: np.random.Generator, p: float) -> GuidanceImage:
    """With probability p, mark the guidance dropped and zero its image."""
    if rng.random() >= p:
        return g
    return replace(g, image=np.zeros_like(g.image), dropped=True)


def total_variation(image: np.ndarray) -> float:
    """Sum of absolute neighbor differences along both spatial axes."""
    dh = np.abs(np.diff(image, axis=0)).sum()
    dw = np.abs(np.diff(image, axis=1)).sum()
    return float(dh + dw)
