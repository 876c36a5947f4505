"""Masked cross-source sampling: clip pools, pairing, compositing, synthesis.

Training pairs draw the reference frame and the target window from different
clips of the same identity, then composite both over one shared background so
the only systematic difference between reference and target is the face. A
synthetic generator manufactures identities, lighting rigs, clips, and
backgrounds so the whole pipeline runs without any external footage.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import images, rng as rngmod, utsr
from .facemodel import FaceModel, FaceParams, load_model, make_synthetic_model, save_model
from .guidance import (
    GuidanceConfig,
    GuidanceImage,
    apply_condition_dropout,
    apply_lips_mask,
    lips_pixel_mask,
    render_illumination_guidance,
    render_motion_guidance,
)
from .raster import render_face
from .tensor import ConfigError, ShapeError

AUDIO_DIM = 32
DEFAULT_FPS = 25.0


@dataclass
class ClipRecord:
    """One clip: shared identity and lighting, per-frame params and files."""

    identity_id: str
    clip_id: str
    lighting_label: str
    params: list[FaceParams]
    frame_paths: list[Path]
    mask_paths: list[Path]
    audio_path: Path
    fps: float = DEFAULT_FPS

    @property
    def n_frames(self) -> int:
        return len(self.params)

    def load_audio(self) -> np.ndarray:
        _, arrays = utsr.load_tensors(self.audio_path)
        return arrays["audio"]

    def to_manifest_dict(self, root: Path) -> dict:
        return {
            "identity_id": self.identity_id,
            "clip_id": self.clip_id,
            "lighting_label": self.lighting_label,
            "fps": self.fps,
            "n_frames": self.n_frames,
            "frames": [str(p.relative_to(root)) for p in self.frame_paths],
            "masks": [str(p.relative_to(root)) for p in self.mask_paths],
            "audio": str(self.audio_path.relative_to(root)),
        }


@dataclass
class IdentityPool:
    """Clip records grouped by identity, plus per-identity face models."""

    clips: dict[str, list[ClipRecord]]
    model_paths: dict[str, Path]
    diagnostics: list[str] = field(default_factory=list)

    @property
    def identities(self) -> list[str]:
        return sorted(self.clips.keys())

    def clip_count(self) -> int:
        return sum(len(v) for v in self.clips.values())

    def load_face_model(self, identity_id: str) -> FaceModel:
        if identity_id not in self.model_paths:
            raise ConfigError(f"identity {identity_id!r} has no face model file")
        return load_model(self.model_paths[identity_id])

    def serialize(self, root: Path) -> str:
        """Canonical JSON-lines form, stable across rebuilds of one tree."""
        lines = []
        for identity in self.identities:
            for clip in sorted(self.clips[identity], key=lambda c: c.clip_id):
                lines.append(json.dumps(clip.to_manifest_dict(root), sort_keys=True))
        return "\n".join(lines) + "\n"


def _load_clip(clip_dir: Path) -> ClipRecord:
    meta = json.loads((clip_dir / "clip.json").read_text())
    params = [
        FaceParams.from_dict(json.loads(line))
        for line in (clip_dir / "params.jsonl").read_text().splitlines()
        if line.strip()
    ]
    frames = sorted(clip_dir.glob("frame_*.png"))
    masks = sorted(clip_dir.glob("mask_*.png"))
    if not params:
        raise ValueError("no params")
    if len(frames) != len(params) or len(masks) != len(params):
        raise ValueError(
            f"count mismatch: {len(params)} params, {len(frames)} frames, {len(masks)} masks"
        )
    audio_path = clip_dir / "audio.utsr"
    if not audio_path.exists():
        raise ValueError("missing audio.utsr")
    return ClipRecord(
        identity_id=meta["identity_id"],
        clip_id=meta["clip_id"],
        lighting_label=meta["lighting_label"],
        params=params,
        frame_paths=frames,
        mask_paths=masks,
        audio_path=audio_path,
        fps=float(meta.get("fps", DEFAULT_FPS)),
    )


def build_identity_pool(root) -> IdentityPool:
    """Walk `<root>/<identity>/<clip>/clip.json`, skipping malformed clips."""
    root = Path(root)
    clips: dict[str, list[ClipRecord]] = {}
    model_paths: dict[str, Path] = {}
    diagnostics: list[str] = []
    seen_clip_ids: set[str] = set()
    for clip_json in sorted(root.glob("*/*/clip.json")):
        clip_dir = clip_json.parent
        try:
            record = _load_clip(clip_dir)
        except (ValueError, KeyError, OSError, utsr.FormatError) as e:
            diagnostics.append(f"skipped {clip_dir.relative_to(root)}: {e}")
            continue
        if record.clip_id in seen_clip_ids:
            raise ConfigError(f"duplicate clip_id {record.clip_id!r} at {clip_dir}")
        seen_clip_ids.add(record.clip_id)
        clips.setdefault(record.identity_id, []).append(record)
        model_file = clip_dir.parent / "model.ufm"
        if model_file.exists():
            model_paths[record.identity_id] = model_file
    if not clips:
        raise ConfigError(f"no usable clips under {root}")
    for records in clips.values():
        records.sort(key=lambda c: c.clip_id)
    return IdentityPool(clips=clips, model_paths=model_paths, diagnostics=diagnostics)


@dataclass
class BackgroundBank:
    paths: list[Path]

    def __post_init__(self):
        if not self.paths:
            raise ConfigError("background bank is empty")

    def __len__(self) -> int:
        return len(self.paths)

    def load(self, index: int) -> np.ndarray:
        return images.load_png(self.paths[index])


def load_background_bank(directory) -> BackgroundBank:
    return BackgroundBank(sorted(Path(directory).glob("bg_*.png")))


# ---------------------------------------------------------------------------
# sampling


@dataclass
class PairSelection:
    reference_clip: ClipRecord
    reference_frame: int
    target_clip: ClipRecord
    target_start: int
    target_length: int
    intra_source: bool


def sample_cross_source_pair(
    pool: IdentityPool, identity_id: str, rng: np.random.Generator, target_length: int = 14
) -> PairSelection:
    """Reference and target from different clips of one identity.

    Identities with a single clip fall back to intra-source pairing with the
    flag set; the target window shrinks to the clip length when needed.
    """
    clips = pool.clips.get(identity_id)
    if not clips:
        raise ConfigError(f"unknown identity {identity_id!r}")
    if len(clips) >= 2:
        ref_idx = int(rng.integers(len(clips)))
        tgt_idx = int(rng.integers(len(clips) - 1))
        if tgt_idx >= ref_idx:
            tgt_idx += 1
        intra = False
    else:
        ref_idx = tgt_idx = 0
        intra = True
    reference_clip, target_clip = clips[ref_idx], clips[tgt_idx]
    window = min(target_length, target_clip.n_frames)
    start = int(rng.integers(target_clip.n_frames - window + 1))
    frame = int(rng.integers(reference_clip.n_frames))
    return PairSelection(
        reference_clip=reference_clip,
        reference_frame=frame,
        target_clip=target_clip,
        target_start=start,
        target_length=window,
        intra_source=intra,
    )


def composite_background(frame: np.ndarray, face_mask: np.ndarray, background: np.ndarray) -> np.ndarray:
    """mask ⊙ frame + (1−mask) ⊙ background; masks may be soft in [0,1]."""
    frame = np.asarray(frame, dtype=np.float64)
    background = np.asarray(background, dtype=np.float64)
    face_mask = np.asarray(face_mask, dtype=np.float64)
    if frame.shape != background.shape or face_mask.shape != frame.shape[:2]:
        raise ShapeError(
            f"resolution mismatch: frame {frame.shape}, mask {face_mask.shape}, background {background.shape}"
        )
    m = face_mask[..., None]
    return m * frame + (1.0 - m) * background


@dataclass
class SampleConfig:
    """Knobs for one TrainingSample assembly."""

    resolution: int = 64
    target_length: int = 14
    guidance: GuidanceConfig = field(default_factory=GuidanceConfig)


@dataclass
class TrainingSample:
    reference_image: np.ndarray  # H×W×3
    target_frames: np.ndarray  # N×H×W×3
    target_masks: np.ndarray  # N×H×W
    motion_guidance: list[GuidanceImage]  # length N
    illumination_guidance: GuidanceImage
    audio_embedding: np.ndarray  # N×d_a
    audio_dropped: bool
    background_id: int
    identity_id: str
    reference_clip_id: str
    target_clip_id: str
    target_start: int
    target_params: list[FaceParams]
    intra_source: bool
    sample_id: int


def assemble_training_sample(
    pool: IdentityPool,
    bank: BackgroundBank,
    config: SampleConfig,
    global_seed: int,
    sample_id: int,
    identity_id: str | None = None,
) -> TrainingSample:
    """Deterministic function of (pool contents, global_seed, sample_id).

    Draw order is fixed: identity, clip pair, background, lips-mask decision,
    motion-dropout decision, global-dropout decision. Changing it would
    silently reshuffle every sample of existing runs.
    """
    rng = rngmod.sample_stream(global_seed, "mcss", sample_id)
    if identity_id is None:
        ids = pool.identities
        identity_id = ids[int(rng.integers(len(ids)))]
    pair = sample_cross_source_pair(pool, identity_id, rng, config.target_length)
    background_id = int(rng.integers(len(bank)))
    lips_draw = rng.random()
    motion_drop_draw = rng.random()
    global_drop_draw = rng.random()

    background = bank.load(background_id)
    model = pool.load_face_model(identity_id)
    size = config.resolution
    gcfg = config.guidance

    ref_frame = images.load_png(pair.reference_clip.frame_paths[pair.reference_frame])
    ref_mask = images.load_mask(pair.reference_clip.mask_paths[pair.reference_frame])
    reference_image = composite_background(ref_frame, ref_mask, background)

    lo, hi = pair.target_start, pair.target_start + pair.target_length
    target_params = pair.target_clip.params[lo:hi]
    target_frames, target_masks, motion_guidance = [], [], []
    mask_lips = lips_draw < gcfg.lips_mask_prob
    for idx in range(lo, hi):
        frame = images.load_png(pair.target_clip.frame_paths[idx])
        mask = images.load_mask(pair.target_clip.mask_paths[idx])
        target_frames.append(composite_background(frame, mask, background))
        target_masks.append(mask)
        g = render_motion_guidance(model, pair.target_clip.params[idx], gcfg, size)
        if mask_lips:
            lips = lips_pixel_mask(model, pair.target_clip.params[idx], size)
            g = apply_lips_mask(g, lips, _always(), 1.0)
        motion_guidance.append(g)

    target_lighting = target_params[0].lighting
    illum = render_illumination_guidance(model, target_lighting, target_params[0].camera, gcfg, size)

    audio_dropped = False
    if global_drop_draw < gcfg.global_dropout_prob:
        motion_guidance = [apply_condition_dropout(g, _always(), 1.0) for g in motion_guidance]
        illum = apply_condition_dropout(illum, _always(), 1.0)
        audio_dropped = True
    elif motion_drop_draw < gcfg.motion_dropout_prob:
        motion_guidance = [apply_condition_dropout(g, _always(), 1.0) for g in motion_guidance]

    audio = pair.target_clip.load_audio()[lo:hi]
    return TrainingSample(
        reference_image=reference_image,
        target_frames=np.stack(target_frames),
        target_masks=np.stack(target_masks),
        motion_guidance=motion_guidance,
        illumination_guidance=illum,
        audio_embedding=audio,
        audio_dropped=audio_dropped,
        background_id=background_id,
        identity_id=identity_id,
        reference_clip_id=pair.reference_clip.clip_id,
        target_clip_id=pair.target_clip.clip_id,
        target_start=pair.target_start,
        target_params=target_params,
        intra_source=pair.intra_source,
        sample_id=sample_id,
    )


def _always() -> np.random.Generator:
    """Generator whose first draw is certainly below any positive p."""
    return np.random.Generator(np.random.PCG64(0))  # first random() ≈ 0.637 < 1.0


# ---------------------------------------------------------------------------
# synthetic dataset generation


@dataclass
class DatasetSpec:
    identities: int = 2
    lightings: int = 2
    clips: int = 2  # per (identity, lighting)
    frames: int = 8
    resolution: int = 64
    backgrounds: int = 32
    vertices: int = 96
    fps: float = DEFAULT_FPS

    def __post_init__(self):
        if self.resolution < 16:
            raise ConfigError(f"resolution must be at least 16, got {self.resolution}")
        for label in ("identities", "lightings", "clips", "frames", "backgrounds"):
            if getattr(self, label) < 1:
                raise ConfigError(f"{label} must be at least 1")


def _lighting_rigs(n: int, rng: np.random.Generator) -> list[np.ndarray]:
    """Ambient-dominant rigs spanning a wide brightness range."""
    rigs = []
    levels = np.linspace(1.0, 3.2, n) if n > 1 else np.array([2.2])
    for k in range(n):
        lighting = np.zeros((9, 3))
        lighting[0] = levels[k] * rng.uniform(0.9, 1.1, size=3)
        lighting[1:4] = rng.normal(scale=0.35, size=(3, 3))
        lighting[4:] = rng.normal(scale=0.15, size=(5, 3))
        rigs.append(lighting)
    return rigs


def _clip_trajectory(n_frames: int, model: FaceModel, rng: np.random.Generator) -> list[dict]:
    """Smooth pose/expression curves for one clip."""
    t = np.linspace(0.0, 1.0, n_frames)
    pose_base = rng.normal(scale=0.15, size=3)
    pose_swing = rng.normal(scale=0.25, size=3)
    pose_freq = rng.uniform(0.5, 1.5, size=3)
    pose_phase = rng.uniform(0, 2 * np.pi, size=3)
    expr_amp = rng.normal(scale=0.8, size=model.n_expression)
    expr_freq = rng.uniform(0.5, 2.0, size=model.n_expression)
    expr_phase = rng.uniform(0, 2 * np.pi, size=model.n_expression)
    camera = np.array([rng.uniform(0.95, 1.15), rng.uniform(-0.06, 0.06), rng.uniform(-0.06, 0.06)])
    frames = []
    for step in range(n_frames):
        pose = pose_base + pose_swing * np.sin(2 * np.pi * pose_freq * t[step] + pose_phase)
        expression = expr_amp * np.sin(2 * np.pi * expr_freq * t[step] + expr_phase)
        frames.append({"pose": pose, "expression": expression, "camera": camera})
    return frames


def _smooth_audio(n_frames: int, rng: np.random.Generator) -> np.ndarray:
    audio = np.zeros((n_frames, AUDIO_DIM))
    state = rng.normal(size=AUDIO_DIM)
    for step in range(n_frames):
        state = 0.92 * state + 0.39 * rng.normal(size=AUDIO_DIM)
        audio[step] = state
    return audio


def generate_synthetic_dataset(spec: DatasetSpec, seed: int, out_root) -> IdentityPool:
    """Write a full dataset tree and its manifest; returns the loaded pool."""
    root = Path(out_root)
    root.mkdir(parents=True, exist_ok=True)

    bg_rng = rngmod.stream(seed, "dataset/backgrounds")
    bg_dir = root / "backgrounds"
    bg_dir.mkdir(exist_ok=True)
    res = spec.resolution
    yy, xx = np.meshgrid(np.linspace(0, 1, res), np.linspace(0, 1, res), indexing="ij")
    for b in range(spec.backgrounds):
        c0, c1 = bg_rng.uniform(size=3), bg_rng.uniform(size=3)
        angle = bg_rng.uniform(0, 2 * np.pi)
        ramp = (np.cos(angle) * xx + np.sin(angle) * yy)[..., None]
        ramp = (ramp - ramp.min()) / max(np.ptp(ramp), 1e-9)
        wave = 0.08 * np.sin(2 * np.pi * bg_rng.uniform(1, 3) * (xx + yy))[..., None]
        noise = bg_rng.normal(scale=0.02, size=(res, res, 3))
        images.save_png(bg_dir / f"bg_{b:03d}.png", np.clip(c0 + ramp * (c1 - c0) + wave + noise, 0, 1))

    rig_rng = rngmod.stream(seed, "dataset/lighting")
    rigs = _lighting_rigs(spec.lightings, rig_rng)

    for i in range(spec.identities):
        identity_id = f"id{i:03d}"
        id_dir = root / identity_id
        id_dir.mkdir(exist_ok=True)
        id_rng = rngmod.stream(seed, f"dataset/{identity_id}/model")
        model = make_synthetic_model(spec.vertices, seed=int(id_rng.integers(2**31)))
        save_model(id_dir / "model.ufm", model)
        identity_shape = id_rng.normal(scale=0.6, size=model.n_shape)
        for light in range(spec.lightings):
            for c in range(spec.clips):
                clip_id = f"{identity_id}_l{light}_c{c}"
                clip_dir = id_dir / f"l{light}_c{c}"
                clip_dir.mkdir(exist_ok=True)
                clip_rng = rngmod.stream(seed, f"dataset/{clip_id}")
                trajectory = _clip_trajectory(spec.frames, model, clip_rng)
                with open(clip_dir / "params.jsonl", "w") as pf:
                    for f_idx, state in enumerate(trajectory):
                        params = FaceParams(
                            pose=state["pose"],
                            shape=identity_shape,
                            expression=state["expression"],
                            camera=state["camera"],
                            lighting=rigs[light],
                        )
                        out = render_face(model, params, res)
                        images.save_png(clip_dir / f"frame_{f_idx:05d}.png", out.image)
                        images.save_mask(clip_dir / f"mask_{f_idx:05d}.png", out.coverage_mask.astype(np.float64))
                        pf.write(json.dumps(params.to_dict(), sort_keys=True) + "\n")
                utsr.save_tensors(
                    clip_dir / "audio.utsr",
                    {"audio": _smooth_audio(spec.frames, clip_rng)},
                    header={"kind": "audio-embedding", "dim": AUDIO_DIM},
                )
                (clip_dir / "clip.json").write_text(
                    json.dumps(
                        {
                            "identity_id": identity_id,
                            "clip_id": clip_id,
                            "lighting_label": f"light{light}",
                            "fps": spec.fps,
                        },
                        sort_keys=True,
                    )
                    + "\n"
                )

    pool = build_identity_pool(root)
    (root / "manifest.jsonl").write_text(pool.serialize(root))
    return pool
