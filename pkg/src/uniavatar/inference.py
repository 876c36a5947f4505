"""Ancestral diffusion sampling with three conditioning control modes.

The modes form a ladder: audio alone, audio plus rendered motion guidance,
and audio plus motion plus illumination guidance. Absent conditions take the
denoiser's bypass path (the gate and the attention blocks simply do not
fire), so one checkpoint serves every mode.

Clips longer than one window are generated window by window; each new window
re-presents the last generated frames as clean context latents, mirroring
how stage-2 training anchors every clip on ground-truth frames.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import rng as rngmod
from . import tensor as T
from .diffusion import DiffusionSchedule, latent_to_image_array
from .facemodel import FaceModel, FaceParams
from .guidance import GuidanceConfig, render_illumination_guidance, render_motion_guidance
from .nets import (
    Conditions,
    NetBundle,
    denoise_predict_clip,
    illumination_encode,
    inference_mode,
    motion_encode,
    prepare_image,
    reference_encode,
)
from .shapes import latent_shape
from .tensor import ConfigError, ShapeError, Tensor

MODE_AUDIO = "audio"
MODE_MOTION = "audio+motion"
MODE_ILLUMINATION = "audio+motion+illumination"
MODES = (MODE_AUDIO, MODE_MOTION, MODE_ILLUMINATION)
_ALIASES = {
    "audio": MODE_AUDIO,
    "motion": MODE_MOTION,
    "illum": MODE_ILLUMINATION,
    MODE_AUDIO: MODE_AUDIO,
    MODE_MOTION: MODE_MOTION,
    MODE_ILLUMINATION: MODE_ILLUMINATION,
}


def normalize_mode(mode: str) -> str:
    try:
        return _ALIASES[mode]
    except KeyError:
        raise ConfigError(f"unknown inference mode {mode!r} (expected one of {sorted(set(_ALIASES))})")


def posterior_sigma(schedule: DiffusionSchedule, t: int) -> float:
    """Ancestral-step noise scale √((1−ᾱ_{t−1})/(1−ᾱ_t)·β_t); zero at t=1."""
    if t <= 1:
        return 0.0
    ab_t = schedule.alpha_bar(t)
    ab_prev = schedule.alpha_bar(t - 1)
    return math.sqrt((1.0 - ab_prev) / (1.0 - ab_t) * schedule.betas[t - 1])


def ancestral_step(z_t: np.ndarray, eps_hat: np.ndarray, t: int, schedule: DiffusionSchedule, xi: np.ndarray | None) -> np.ndarray:
    """One reverse step: mean from the noise estimate, plus scaled noise."""
    beta = schedule.betas[t - 1]
    alpha = schedule.alphas[t - 1]
    ab = schedule.alpha_bar(t)
    mean = (z_t - beta / math.sqrt(1.0 - ab) * eps_hat) / math.sqrt(alpha)
    sigma = posterior_sigma(schedule, t)
    if sigma == 0.0 or xi is None:
        return mean
    return mean + sigma * xi


@dataclass
class InferenceInputs:
    """Raw material for one generated clip.

    reference_image is H×W×3 in [0,1]; audio_embedding is one row per output
    frame. Motion modes additionally need the face model and one parameter
    set per frame; the illumination mode renders its guidance from
    ``lighting`` when given, else from the first frame's parameters.
    """

    reference_image: np.ndarray
    audio_embedding: np.ndarray
    model: FaceModel | None = None
    params: list[FaceParams] | None = None
    lighting: np.ndarray | None = None
    guidance: GuidanceConfig = field(default_factory=GuidanceConfig)


def validate_inputs(mode: str, inputs: InferenceInputs, bundle: NetBundle) -> int:
    """Check mode/inputs consistency; returns the output frame count."""
    mode = normalize_mode(mode)
    size = bundle.config.image_size
    ref = np.asarray(inputs.reference_image)
    if ref.shape != (size, size, 3):
        raise ShapeError(f"reference image must be {size}×{size}×3, got {ref.shape}")
    audio = np.asarray(inputs.audio_embedding)
    if audio.ndim != 2 or audio.shape[1] != bundle.config.audio_dim:
        raise ShapeError(f"audio embedding must be N×{bundle.config.audio_dim}, got {audio.shape}")
    n = audio.shape[0]
    if n < 1:
        raise ConfigError("audio embedding must cover at least one frame")
    if mode in (MODE_MOTION, MODE_ILLUMINATION):
        if inputs.model is None or inputs.params is None:
            raise ConfigError(f"mode {mode!r} requires a face model and per-frame parameters")
        if len(inputs.params) != n:
            raise ConfigError(f"{len(inputs.params)} parameter sets for {n} audio frames")
    if mode == MODE_ILLUMINATION and inputs.lighting is not None:
        lighting = np.asarray(inputs.lighting)
        if lighting.shape != (9, 3):
            raise ShapeError(f"lighting override must be 9×3, got {lighting.shape}")
    return n


def generate(
    bundle: NetBundle,
    mode: str,
    inputs: InferenceInputs,
    seed: int,
    schedule: DiffusionSchedule,
    window: int = 4,
    context: int = 2,
) -> np.ndarray:
    """Sample an N-frame clip; returns N×H×W×3 in [0,1].

    Deterministic for fixed (checkpoint, inputs, seed). The first window is
    generated from pure noise; later windows clamp their first ``context``
    slots to the previous window's final latents for continuity.
    """
    mode = normalize_mode(mode)
    n = validate_inputs(mode, inputs, bundle)
    if context < 0 or window <= context:
        raise ConfigError(f"window ({window}) must exceed context ({context})")
    rng = rngmod.stream(seed, "infer")
    z_shape = latent_shape(bundle.config)
    size = bundle.config.image_size

    with inference_mode(bundle):
        ref_taps = reference_encode(bundle, prepare_image(inputs.reference_image))
        illum_feature = None
        if mode == MODE_ILLUMINATION:
            lighting = inputs.lighting if inputs.lighting is not None else inputs.params[0].lighting
            rendered = render_illumination_guidance(
                inputs.model, np.asarray(lighting, dtype=np.float64), inputs.params[0].camera, inputs.guidance, size
            )
            illum_feature = illumination_encode(bundle, prepare_image(rendered.image))

        def conditions_for(frame: int, audio_tokens: Tensor, expression: Tensor | None) -> Conditions:
            taps = None
            if mode in (MODE_MOTION, MODE_ILLUMINATION):
                g = render_motion_guidance(inputs.model, inputs.params[frame], inputs.guidance, size)
                taps = motion_encode(bundle, prepare_image(g.image))
            return Conditions(
                reference_taps=ref_taps,
                motion_taps=taps,
                illumination=illum_feature,
                audio=audio_tokens,
                expression=expression,
            )

        latents: dict[int, np.ndarray] = {}
        frames_done = 0
        while frames_done < n:
            ctx = min(context, frames_done)
            gen = min(window - ctx, n - frames_done)
            slots = list(range(frames_done - ctx, frames_done + gen))
            audio_tokens = T.constant(np.asarray(inputs.audio_embedding)[slots[0] : slots[-1] + 1])
            expression = None
            if inputs.params is not None and mode != MODE_AUDIO:
                expression = T.constant(inputs.params[frames_done].expression)
            conds = [conditions_for(f, audio_tokens, expression) for f in slots]
            z: list[np.ndarray] = []
            for f in slots:
                if f < frames_done:
                    z.append(latents[f])  # clean context latent, clamped through all steps
                else:
                    z.append(rng.standard_normal(z_shape))
            for t in range(schedule.steps, 0, -1):
                eps = denoise_predict_clip(bundle, [T.constant(v) for v in z], t, conds, temporal=True)
                for i, f in enumerate(slots):
                    if f < frames_done:
                        continue
                    xi = rng.standard_normal(z_shape) if t > 1 else None
                    z[i] = ancestral_step(z[i], eps[i].data, t, schedule, xi)
            for i, f in enumerate(slots):
                if f >= frames_done:
                    latents[f] = z[i]
            frames_done += gen

    return np.stack([latent_to_image_array(latents[f], bundle.config.latent_factor) for f in range(n)])


def mean_pixel_error(generated: np.ndarray, reference_frames: np.ndarray) -> float:
    """Mean absolute per-pixel error between two N×H×W×3 clips."""
    a = np.asarray(generated, dtype=np.float64)
    b = np.asarray(reference_frames, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeError(f"clip shapes differ: {a.shape} vs {b.shape}")
    return float(np.mean(np.abs(a - b)))


def face_region_intensity(frames: np.ndarray, masks: np.ndarray) -> float:
    """Mean intensity of the masked face region across a clip."""
    frames = np.asarray(frames, dtype=np.float64)
    masks = np.asarray(masks, dtype=np.float64)
    weight = masks[..., None]
    total = float((frames * weight).sum())
    denom = float(weight.sum() * frames.shape[-1])
    if denom == 0:
        raise ConfigError("face mask is empty")
    return total / denom
