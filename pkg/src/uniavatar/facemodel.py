"""Linear blendshape face model: geometry synthesis and orthographic projection.

A model is a template mesh plus identity and expression displacement bases.
Posing is a single rigid rotation (axis-angle); the camera is orthographic
with a scale and an in-plane translation. A deterministic generator builds
small synthetic head meshes so no licensed assets are needed.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import utsr
from .tensor import ConfigError, ShapeError

MODEL_FORMAT = "uniavatar-face-model"
MODEL_VERSION = 1


@dataclass
class FaceModel:
    """Template mesh with linear displacement bases and per-vertex albedo."""

    template: np.ndarray  # V×3
    shape_basis: np.ndarray  # V×3×n_shape
    expression_basis: np.ndarray  # V×3×n_expression
    triangles: np.ndarray  # F×3 int
    albedo: np.ndarray | None = None  # V×3 in [0,1]; None means mid-gray
    lips_vertices: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))

    def __post_init__(self):
        self.template = np.asarray(self.template, dtype=np.float64)
        self.shape_basis = np.asarray(self.shape_basis, dtype=np.float64)
        self.expression_basis = np.asarray(self.expression_basis, dtype=np.float64)
        self.triangles = np.asarray(self.triangles, dtype=np.int64)
        if self.albedo is not None:
            self.albedo = np.asarray(self.albedo, dtype=np.float64)
        self.lips_vertices = np.asarray(self.lips_vertices, dtype=np.int64)

    @property
    def n_vertices(self) -> int:
        return self.template.shape[0]

    @property
    def n_shape(self) -> int:
        return self.shape_basis.shape[2]

    @property
    def n_expression(self) -> int:
        return self.expression_basis.shape[2]

    def albedo_or_default(self) -> np.ndarray:
        if self.albedo is not None:
            return self.albedo
        return np.full((self.n_vertices, 3), 0.5)

    def validate(self) -> None:
        v = self.n_vertices
        if self.template.shape != (v, 3):
            raise ShapeError(f"template must be V×3, got {self.template.shape}")
        if self.shape_basis.shape[:2] != (v, 3):
            raise ShapeError(f"shape basis {self.shape_basis.shape} inconsistent with {v} vertices")
        if self.expression_basis.shape[:2] != (v, 3):
            raise ShapeError(f"expression basis {self.expression_basis.shape} inconsistent with {v} vertices")
        if self.triangles.ndim != 2 or self.triangles.shape[1] != 3:
            raise ShapeError(f"triangles must be F×3, got {self.triangles.shape}")
        if self.triangles.size and (self.triangles.min() < 0 or self.triangles.max() >= v):
            raise ShapeError("triangle index out of range")
        if self.albedo is not None and self.albedo.shape != (v, 3):
            raise ShapeError(f"albedo must be V×3, got {self.albedo.shape}")
        if self.lips_vertices.size and (self.lips_vertices.min() < 0 or self.lips_vertices.max() >= v):
            raise ShapeError("lips vertex index out of range")


@dataclass
class FaceParams:
    """Per-frame animation state: pose, coefficients, camera, lighting."""

    pose: np.ndarray  # axis-angle, 3 radians
    shape: np.ndarray  # n_shape coefficients
    expression: np.ndarray  # n_expression coefficients
    camera: np.ndarray  # (scale, shift_x, shift_y), scale > 0
    lighting: np.ndarray  # 9×3 SH coefficients

    def __post_init__(self):
        self.pose = np.asarray(self.pose, dtype=np.float64)
        self.shape = np.asarray(self.shape, dtype=np.float64)
        self.expression = np.asarray(self.expression, dtype=np.float64)
        self.camera = np.asarray(self.camera, dtype=np.float64)
        self.lighting = np.asarray(self.lighting, dtype=np.float64)

    def validate(self, model: FaceModel | None = None) -> None:
        if self.pose.shape != (3,):
            raise ShapeError(f"pose must be an axis-angle 3-vector, got {self.pose.shape}")
        if self.camera.shape != (3,):
            raise ShapeError(f"camera must be (scale, shift_x, shift_y), got {self.camera.shape}")
        if self.camera[0] <= 0:
            raise ConfigError(f"camera scale must be positive, got {self.camera[0]}")
        if self.lighting.shape != (9, 3):
            raise ShapeError(f"lighting must be 9 coefficient triples, got {self.lighting.shape}")
        if model is not None:
            if self.shape.shape != (model.n_shape,):
                raise ShapeError(f"{self.shape.shape[0]} shape coefficients for a {model.n_shape}-basis model")
            if self.expression.shape != (model.n_expression,):
                raise ShapeError(
                    f"{self.expression.shape[0]} expression coefficients for a {model.n_expression}-basis model"
                )

    def to_dict(self) -> dict:
        return {
            "pose": self.pose.tolist(),
            "shape": self.shape.tolist(),
            "expression": self.expression.tolist(),
            "camera": self.camera.tolist(),
            "lighting": self.lighting.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "FaceParams":
        return cls(
            pose=d["pose"],
            shape=d["shape"],
            expression=d["expression"],
            camera=d["camera"],
            lighting=d["lighting"],
        )

    @classmethod
    def neutral(cls, model: FaceModel, lighting: np.ndarray | None = None) -> "FaceParams":
        """Zero pose and coefficients, identity camera, optional lighting."""
        light = np.zeros((9, 3)) if lighting is None else np.asarray(lighting, dtype=np.float64)
        return cls(
            pose=np.zeros(3),
            shape=np.zeros(model.n_shape),
            expression=np.zeros(model.n_expression),
            camera=np.array([1.0, 0.0, 0.0]),
            lighting=light,
        )


def rotation_matrix(axis_angle: np.ndarray) -> np.ndarray:
    """Rodrigues formula: axis-angle 3-vector to a 3×3 rotation matrix."""
    axis_angle = np.asarray(axis_angle, dtype=np.float64)
    angle = np.linalg.norm(axis_angle)
    if angle < 1e-12:
        return np.eye(3)
    axis = axis_angle / angle
    kx, ky, kz = axis
    k = np.array([[0.0, -kz, ky], [kz, 0.0, -kx], [-ky, kx, 0.0]])
    return np.eye(3) + np.sin(angle) * k + (1.0 - np.cos(angle)) * (k @ k)


def synthesize_geometry(
    model: FaceModel,
    shape: np.ndarray,
    expression: np.ndarray,
    pose: np.ndarray,
) -> tuple[np.ndarray, np.ndarray]:
    """Posed vertices and unit vertex normals.

    vertices = R(pose) · (template + shape_basis·shape + expression_basis·expression);
    normals are area-weighted averages of adjacent face normals, computed
    after posing.
    """
    shape = np.asarray(shape, dtype=np.float64)
    expression = np.asarray(expression, dtype=np.float64)
    if shape.shape != (model.n_shape,):
        raise ShapeError(f"expected {model.n_shape} shape coefficients, got {shape.shape}")
    if expression.shape != (model.n_expression,):
        raise ShapeError(f"expected {model.n_expression} expression coefficients, got {expression.shape}")
    verts = model.template + model.shape_basis @ shape + model.expression_basis @ expression
    verts = verts @ rotation_matrix(pose).T
    return verts, vertex_normals(verts, model.triangles)


def vertex_normals(vertices: np.ndarray, triangles: np.ndarray) -> np.ndarray:
    """Area-weighted vertex normals, unit length."""
    normals = np.zeros_like(vertices)
    if len(triangles):
        a = vertices[triangles[:, 0]]
        b = vertices[triangles[:, 1]]
        c = vertices[triangles[:, 2]]
        face = np.cross(b - a, c - a)  # length = 2·area, the weighting
        for col in range(3):
            np.add.at(normals, triangles[:, col], face)
    length = np.linalg.norm(normals, axis=1, keepdims=True)
    safe = np.where(length > 1e-12, length, 1.0)
    normals = normals / safe
    normals[length[:, 0] <= 1e-12] = (0.0, 0.0, 1.0)
    return normals


def project_orthographic(vertices: np.ndarray, camera: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Normalized image-plane coordinates and per-vertex depth.

    (u, v) = scale·(x + shift_x, y + shift_y); depth is the untouched vertex z.
    """
    camera = np.asarray(camera, dtype=np.float64)
    if camera.shape != (3,):
        raise ShapeError(f"camera must be (scale, shift_x, shift_y), got {camera.shape}")
    scale, sx, sy = camera
    if scale <= 0:
        raise ConfigError(f"camera scale must be positive, got {scale}")
    uv = scale * (vertices[:, :2] + np.array([sx, sy]))
    return uv, vertices[:, 2].copy()


def to_pixels(uv: np.ndarray, height: int, width: int) -> np.ndarray:
    """Viewport transform: [-1,1]² normalized coords to pixel-center units.

    Column x runs right, row y runs down; integer coordinates are pixel
    centers, so u=-1 is half a pixel left of column 0.
    """
    x = (uv[:, 0] + 1.0) * (width / 2.0) - 0.5
    y = (1.0 - uv[:, 1]) * (height / 2.0) - 0.5
    return np.stack([x, y], axis=1)


# ---------------------------------------------------------------------------
# synthetic model generation


def make_synthetic_model(
    vertex_budget: int,
    n_shape: int = 4,
    n_expression: int = 4,
    seed: int = 0,
) -> FaceModel:
    """Deterministic head-like mesh with displacement bases and a lips tag.

    The mesh is a squashed latitude/longitude sphere (largest grid fitting
    the vertex budget, plus two poles) facing +z. Expression displacements
    are concentrated around the mouth so expression coefficients visibly
    move the lips region.
    """
    if vertex_budget < 8:
        raise ConfigError(f"need at least 8 vertices, got {vertex_budget}")
    rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(0xFACE,)))

    rows = max(2, int(np.sqrt(vertex_budget / 2.0)))
    cols = max(3, (vertex_budget - 2) // rows)
    while rows * cols + 2 > vertex_budget:
        cols -= 1

    lat = np.pi * (np.arange(1, rows + 1)) / (rows + 1)
    lon = 2.0 * np.pi * np.arange(cols) / cols
    lat_g, lon_g = np.meshgrid(lat, lon, indexing="ij")
    x = np.sin(lat_g) * np.sin(lon_g)
    y = np.cos(lat_g)
    z = np.sin(lat_g) * np.cos(lon_g)
    grid = np.stack([x, y, z], axis=-1).reshape(-1, 3)
    poles = np.array([[0.0, 1.0, 0.0], [0.0, -1.0, 0.0]])
    template = np.concatenate([grid, poles], axis=0)
    # head proportions: narrow x, tall y, shallow z; face toward +z
    template *= np.array([0.62, 0.78, 0.55])
    v = len(template)

    tris = []
    for r in range(rows - 1):
        for c in range(cols):
            c2 = (c + 1) % cols
            i00, i01 = r * cols + c, r * cols + c2
            i10, i11 = (r + 1) * cols + c, (r + 1) * cols + c2
            tris.append((i00, i10, i01))
            tris.append((i01, i10, i11))
    top, bottom = v - 2, v - 1
    for c in range(cols):
        c2 = (c + 1) % cols
        tris.append((top, c, c2))
        tris.append((bottom, (rows - 1) * cols + c2, (rows - 1) * cols + c))
    triangles = np.array(tris, dtype=np.int64)

    # lips: lower-front band of the face
    lips_mask = (template[:, 1] < -0.12) & (template[:, 1] > -0.45) & (template[:, 2] > 0.30)
    lips_vertices = np.flatnonzero(lips_mask)
    if lips_vertices.size == 0:
        lips_vertices = np.array([bottom], dtype=np.int64)

    albedo = np.empty((v, 3))
    albedo[:, 0] = 0.78 + 0.08 * np.sin(3.1 * template[:, 1] + 0.7)
    albedo[:, 1] = 0.58 + 0.06 * np.sin(2.3 * template[:, 0] + 1.9)
    albedo[:, 2] = 0.47 + 0.05 * np.sin(2.9 * template[:, 2] + 0.2)
    albedo += rng.normal(scale=0.015, size=(v, 3))
    albedo[lips_vertices] = np.array([0.62, 0.25, 0.26]) + rng.normal(scale=0.01, size=(lips_vertices.size, 3))
    albedo = np.clip(albedo, 0.0, 1.0)

    def smooth_field(strength: float) -> np.ndarray:
        freq = rng.uniform(0.8, 2.2, size=(3, 3))
        phase = rng.uniform(0, 2 * np.pi, size=3)
        amp = rng.normal(scale=strength, size=3)
        return np.sin(template @ freq.T + phase) * amp

    shape_basis = np.stack([smooth_field(0.05) for _ in range(n_shape)], axis=-1)

    lips_center = template[lips_vertices].mean(axis=0)
    falloff = np.exp(-np.sum((template - lips_center) ** 2, axis=1) / (2 * 0.28**2))
    expr_fields = []
    for _ in range(n_expression):
        direction = rng.normal(size=3)
        direction /= np.linalg.norm(direction)
        expr_fields.append(falloff[:, None] * direction * rng.uniform(0.08, 0.16) + smooth_field(0.01))
    expression_basis = np.stack(expr_fields, axis=-1)

    model = FaceModel(
        template=template,
        shape_basis=shape_basis,
        expression_basis=expression_basis,
        triangles=triangles,
        albedo=albedo,
        lips_vertices=lips_vertices,
    )
    model.validate()
    return model


# ---------------------------------------------------------------------------
# file format: one JSON header line + binary tensor records


def save_model(path, model: FaceModel) -> None:
    model.validate()
    header = {
        "format": MODEL_FORMAT,
        "version": MODEL_VERSION,
        "n_vertices": model.n_vertices,
        "n_triangles": int(len(model.triangles)),
        "n_shape": model.n_shape,
        "n_expression": model.n_expression,
        "lips_vertices": model.lips_vertices.tolist(),
        "has_albedo": model.albedo is not None,
    }
    arrays = {
        "template": model.template,
        "shape_basis": model.shape_basis,
        "expression_basis": model.expression_basis,
        "triangles": model.triangles.astype(np.float64),
    }
    if model.albedo is not None:
        arrays["albedo"] = model.albedo
    utsr.save_tensors(path, arrays, header=header)


def load_model(path) -> FaceModel:
    header, arrays = utsr.load_tensors(path)
    if header.get("format") != MODEL_FORMAT:
        raise utsr.FormatError(f"not a face model file: {header.get('format')!r}")
    model = FaceModel(
        template=arrays["template"],
        shape_basis=arrays["shape_basis"],
        expression_basis=arrays["expression_basis"],
        triangles=np.round(arrays["triangles"]).astype(np.int64),
        albedo=arrays.get("albedo") if header.get("has_albedo") else None,
        lips_vertices=np.asarray(header.get("lips_vertices", []), dtype=np.int64),
    )
    model.validate()
    return model
