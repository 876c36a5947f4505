"""Two-stage trainer for the conditioned denoiser.

Stage 1 fits single frames: reference/motion encoders, the denoiser trunk,
and the fusion sites, with illumination data mixed in after a configurable
fraction of the run (the motion encoder freezes at the same point). Stage 2
fits clips: everything stays frozen except temporal attention and the audio
attention blocks, and the first frames of each clip are presented clean so
the temporal mixer learns to propagate them.

Checkpoints are UTSR bundles with a JSON header (config hash, step, loss
weight, schedule); the loss log is a CSV with one row per optimizer step.
Sample assembly runs ahead of the optimizer on a small thread pool, but the
optimizer consumes samples strictly in sample_id order, so results do not
depend on the worker count.
"""

from __future__ import annotations

import csv
import hashlib
import json
import math
import os
from collections import deque
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import rng as rngmod
from . import tensor as T
from . import utsr
from .dataset import BackgroundBank, IdentityPool, SampleConfig, TrainingSample, assemble_training_sample
from .diffusion import (
    DiffusionSchedule,
    PerceptualProxy,
    decode_latent,
    diffusion_forward,
    image_to_latent_array,
    loss_latent,
    loss_spatial,
    loss_total,
    reconstruct_x0,
)
from .guidance import GuidanceConfig
from .nets import (
    Conditions,
    NetBundle,
    denoise_predict,
    denoise_predict_clip,
    illumination_encode,
    init_nets,
    motion_encode,
    prepare_image,
    reference_encode,
)
from .shapes import PRESETS, ArchConfig
from .tensor import ConfigError, ShapeError, Tensor

CHECKPOINT_FORMAT = "uniavatar-checkpoint"
LOG_FIELDS = ("step", "loss_total", "loss_latent", "loss_spatial")


class TrainingDivergedError(RuntimeError):
    """Loss became non-finite; carries the step and component values."""


def worker_count(default: int = 4) -> int:
    """Data-assembly workers, capped by the UNIAVATAR_THREADS env var."""
    cap = os.cpu_count() or 1
    raw = os.environ.get("UNIAVATAR_THREADS")
    if raw is not None:
        try:
            limit = int(raw)
        except ValueError:
            raise ConfigError(f"UNIAVATAR_THREADS must be an integer, got {raw!r}")
        if limit < 1:
            raise ConfigError(f"UNIAVATAR_THREADS must be >= 1, got {limit}")
        return min(limit, cap)
    return max(1, min(default, cap))


# ---------------------------------------------------------------------------
# optimizers


class SGD:
    """Plain gradient descent."""

    def __init__(self, learning_rate: float):
        if learning_rate <= 0:
            raise ConfigError(f"learning rate must be positive, got {learning_rate}")
        self.learning_rate = learning_rate

    def step(self, params: dict[str, Tensor], grads: dict[str, Tensor], names) -> None:
        for name in names:
            params[name].data -= self.learning_rate * grads[name].data


class Adam:
    """Adam with bias correction; moment state is keyed by parameter name."""

    def __init__(self, learning_rate: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        if learning_rate <= 0:
            raise ConfigError(f"learning rate must be positive, got {learning_rate}")
        if not (0.0 <= beta1 < 1.0 and 0.0 <= beta2 < 1.0):
            raise ConfigError(f"betas must lie in [0, 1), got {beta1}, {beta2}")
        self.learning_rate = learning_rate
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    def step(self, params: dict[str, Tensor], grads: dict[str, Tensor], names) -> None:
        self.t += 1
        c1 = 1.0 - self.beta1**self.t
        c2 = 1.0 - self.beta2**self.t
        for name in names:
            g = grads[name].data
            m = self.m.setdefault(name, np.zeros_like(g))
            v = self.v.setdefault(name, np.zeros_like(g))
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            update = (m / c1) / (np.sqrt(v / c2) + self.eps)
            params[name].data -= self.learning_rate * update


def make_optimizer(kind: str, learning_rate: float):
    if kind == "sgd":
        return SGD(learning_rate)
    if kind == "adam":
        return Adam(learning_rate)
    raise ConfigError(f"unknown optimizer {kind!r} (expected 'sgd' or 'adam')")


# ---------------------------------------------------------------------------
# configuration


@dataclass
class TrainConfig:
    """Everything the trainer needs beyond the dataset itself.

    Defaults are desk scale: small batch, short diffusion schedule, a few
    hundred steps. The paper-scale preset swaps these for the published
    constants; nothing in the loop itself changes.
    """

    stage: int = 1
    steps: int = 500
    batch_size: int = 2
    learning_rate: float = 2e-3
    optimizer: str = "adam"
    spatial_loss_weight: float = 0.1
    schedule_steps: int = 50
    beta_start: float = 0.002
    beta_end: float = 0.25
    illum_mix_fraction: float = 0.2  # stage 1: bring illumination data in after this share of steps
    motion_freeze_fraction: float = 2.0 / 3.0  # stage 1: freeze the motion encoder after this share
    stage1_window: int = 2  # frames fetched per stage-1 sample (one is denoised)
    clip_length: int = 4  # frames per stage-2 clip
    context_frames: int = 2  # clean frames anchoring each stage-2 clip
    arch: str = "desk"
    perceptual_seed: int = 0
    init_checkpoint: str | None = None

    def validate(self) -> None:
        if self.stage not in (1, 2):
            raise ConfigError(f"stage must be 1 or 2, got {self.stage}")
        if self.steps < 1:
            raise ConfigError(f"steps must be >= 1, got {self.steps}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.learning_rate <= 0:
            raise ConfigError(f"learning_rate must be positive, got {self.learning_rate}")
        if self.optimizer not in ("sgd", "adam"):
            raise ConfigError(f"optimizer must be 'sgd' or 'adam', got {self.optimizer!r}")
        if self.spatial_loss_weight < 0:
            raise ConfigError(f"spatial_loss_weight must be >= 0, got {self.spatial_loss_weight}")
        if self.schedule_steps < 2:
            raise ConfigError(f"schedule_steps must be >= 2, got {self.schedule_steps}")
        if not 0.0 <= self.illum_mix_fraction <= 1.0:
            raise ConfigError(f"illum_mix_fraction must be in [0, 1], got {self.illum_mix_fraction}")
        if not 0.0 <= self.motion_freeze_fraction <= 1.0:
            raise ConfigError(f"motion_freeze_fraction must be in [0, 1], got {self.motion_freeze_fraction}")
        if self.stage1_window < 1:
            raise ConfigError(f"stage1_window must be >= 1, got {self.stage1_window}")
        if self.context_frames < 0 or self.clip_length <= self.context_frames:
            raise ConfigError(
                f"clip_length ({self.clip_length}) must exceed context_frames ({self.context_frames})"
            )
        if self.arch not in PRESETS:
            raise ConfigError(f"unknown architecture preset {self.arch!r}")

    def schedule(self) -> DiffusionSchedule:
        return DiffusionSchedule(self.schedule_steps, self.beta_start, self.beta_end)


def config_fingerprint(arch: ArchConfig, config: TrainConfig) -> str:
    payload = {"arch": asdict(arch), "train": asdict(config)}
    return hashlib.sha256(json.dumps(payload, sort_keys=True).encode("utf-8")).hexdigest()[:16]


# ---------------------------------------------------------------------------
# sample → conditions bridge


def build_conditions(
    bundle: NetBundle,
    sample: TrainingSample,
    frames: list[int],
    use_illumination: bool,
    use_audio: bool,
    expression_frame: int | None,
) -> list[Conditions]:
    """Encode one training sample into per-frame condition sets.

    Work shared across the clip (reference taps, illumination feature, audio
    tokens, the single expression embedding driving the whole clip) is done
    once. Dropped guidance images become None so the denoiser takes its
    bypass path instead of seeing a black frame.
    """
    ref_taps = reference_encode(bundle, prepare_image(sample.reference_image))
    illum = None
    if use_illumination and not sample.illumination_guidance.dropped:
        illum = illumination_encode(bundle, prepare_image(sample.illumination_guidance.image))
    audio = None
    if use_audio and not sample.audio_dropped:
        audio = T.constant(sample.audio_embedding)
    expression = None
    if expression_frame is not None:
        expression = T.constant(sample.target_params[expression_frame].expression)
    out = []
    for f in frames:
        g = sample.motion_guidance[f]
        taps = None if g.dropped else motion_encode(bundle, prepare_image(g.image))
        out.append(
            Conditions(
                reference_taps=ref_taps,
                motion_taps=taps,
                illumination=illum,
                audio=audio,
                expression=expression,
            )
        )
    return out


def frame_target_pair(bundle: NetBundle, frame_hwc: np.ndarray) -> tuple[Tensor, Tensor]:
    """Clean latent and [-1,1] image tensor for one ground-truth frame."""
    latent = T.constant(image_to_latent_array(frame_hwc, bundle.config.latent_factor))
    image = T.constant(np.moveaxis(frame_hwc, -1, 0) * 2.0 - 1.0)
    return latent, image


# ---------------------------------------------------------------------------
# trainable-parameter selection


def _is_audio_param(name: str) -> bool:
    return ".audio" in name or ".au_ln" in name


def trainable_names(bundle: NetBundle, stage: int, motion_frozen: bool = False) -> list[str]:
    """Stage 1: everything except temporal/audio attention (motion encoder
    optionally frozen). Stage 2: only temporal and audio attention."""
    names = []
    for name in bundle.params:
        temporal = name.startswith("den.temporal")
        audio = _is_audio_param(name)
        if stage == 2:
            if temporal or audio:
                names.append(name)
        else:
            if temporal or audio:
                continue
            if motion_frozen and name.startswith("motion."):
                continue
            names.append(name)
    return names


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(path, bundle: NetBundle, config: TrainConfig, step: int) -> None:
    header = {
        "format": CHECKPOINT_FORMAT,
        "version": 1,
        "arch": asdict(bundle.config),
        "train": asdict(config),
        "stage": config.stage,
        "step": step,
        "spatial_loss_weight": config.spatial_loss_weight,
        "schedule": {
            "steps": config.schedule_steps,
            "beta_start": config.beta_start,
            "beta_end": config.beta_end,
        },
        "config_hash": config_fingerprint(bundle.config, config),
    }
    utsr.save_tensors(path, {name: p.data for name, p in bundle.params.items()}, header)


def load_checkpoint(path) -> tuple[NetBundle, dict]:
    header, arrays = utsr.load_tensors(path)
    if header.get("format") != CHECKPOINT_FORMAT:
        raise utsr.FormatError(f"not a checkpoint file: {path}")
    arch_fields = dict(header["arch"])
    arch_fields["motion_channels"] = tuple(arch_fields["motion_channels"])
    arch_fields["denoise_channels"] = tuple(arch_fields["denoise_channels"])
    config = ArchConfig(**arch_fields)
    bundle = init_nets(config, seed=0)
    if set(arrays) != set(bundle.params):
        missing = sorted(set(bundle.params) - set(arrays))[:3]
        extra = sorted(set(arrays) - set(bundle.params))[:3]
        raise utsr.FormatError(f"checkpoint parameter set mismatch (missing {missing}, extra {extra})")
    for name, value in arrays.items():
        if value.shape != bundle.params[name].shape:
            raise ShapeError(f"checkpoint tensor {name} has shape {value.shape}, expected {bundle.params[name].shape}")
        bundle.params[name].data = value
    return bundle, header


# ---------------------------------------------------------------------------
# sample prefetching


def _prefetched_samples(pool, bank, sample_cfg, seed, total, workers):
    """Yield samples for sample_id 0..total-1, assembled ahead on a pool.

    Assembly is a pure function of (pool, seed, sample_id), so running it on
    worker threads cannot perturb training randomness; the consumer side
    always advances in id order.
    """
    if workers <= 1:
        for sid in range(total):
            yield assemble_training_sample(pool, bank, sample_cfg, seed, sid)
        return
    depth = workers * 2
    with ThreadPoolExecutor(max_workers=workers) as pool_exec:
        pending: deque = deque()
        next_id = 0
        while next_id < total and len(pending) < depth:
            pending.append(pool_exec.submit(assemble_training_sample, pool, bank, sample_cfg, seed, next_id))
            next_id += 1
        while pending:
            sample = pending.popleft().result()
            if next_id < total:
                pending.append(pool_exec.submit(assemble_training_sample, pool, bank, sample_cfg, seed, next_id))
                next_id += 1
            yield sample


# ---------------------------------------------------------------------------
# training loops


@dataclass
class TrainResult:
    bundle: NetBundle
    log_rows: list[dict]
    checkpoint_path: Path | None = None
    log_path: Path | None = None


def _mean(parts: list[Tensor]) -> Tensor:
    total = parts[0]
    for p in parts[1:]:
        total = T.add(total, p)
    return T.mul(total, 1.0 / len(parts))


def _stage1_losses(bundle, sample, rng, schedule, perceptual, config, use_illumination):
    window = len(sample.target_params)
    f = int(rng.integers(window))
    k = int(rng.integers(window))
    t = int(rng.integers(1, schedule.steps + 1))
    conds = build_conditions(bundle, sample, [f], use_illumination, use_audio=False, expression_frame=k)
    x0, target_image = frame_target_pair(bundle, sample.target_frames[f])
    noise = T.constant(rng.standard_normal(x0.shape))
    z_t = diffusion_forward(x0, t, noise, schedule)
    eps_hat = denoise_predict(bundle, z_t, t, conds[0])
    lat = loss_latent(noise, eps_hat)
    predicted = decode_latent(reconstruct_x0(z_t, eps_hat, t, schedule), bundle.config.latent_factor)
    sp = loss_spatial(predicted, target_image, t, schedule, perceptual)
    return lat, sp


def _stage2_losses(bundle, sample, rng, schedule, perceptual, config):
    window = len(sample.target_params)
    context = min(config.context_frames, window - 1)
    k = int(rng.integers(window))
    t = int(rng.integers(1, schedule.steps + 1))
    conds = build_conditions(bundle, sample, list(range(window)), use_illumination=True, use_audio=True, expression_frame=k)
    z_ts, noises, targets = [], [], []
    for f in range(window):
        x0, target_image = frame_target_pair(bundle, sample.target_frames[f])
        if f < context:
            # clean anchor frames: presented as ground truth, not denoised
            z_ts.append(x0)
            noises.append(None)
            targets.append(None)
        else:
            noise = T.constant(rng.standard_normal(x0.shape))
            z_ts.append(diffusion_forward(x0, t, noise, schedule))
            noises.append(noise)
            targets.append(target_image)
    eps_hats = denoise_predict_clip(bundle, z_ts, t, conds, temporal=True)
    lats, sps = [], []
    for f in range(context, window):
        lats.append(loss_latent(noises[f], eps_hats[f]))
        predicted = decode_latent(reconstruct_x0(z_ts[f], eps_hats[f], t, schedule), bundle.config.latent_factor)
        sps.append(loss_spatial(predicted, targets[f], t, schedule, perceptual))
    return _mean(lats), _mean(sps)


def train(
    pool: IdentityPool,
    bank: BackgroundBank,
    config: TrainConfig,
    seed: int,
    out_dir=None,
    start_bundle: NetBundle | None = None,
) -> TrainResult:
    """Run one training stage; returns the bundle and the loss log.

    With out_dir set, also writes checkpoint_stage{N}.utsr and
    loss_stage{N}.csv there. Identical (pool, config, seed) inputs produce
    bit-identical logs and checkpoints.
    """
    config.validate()
    arch = PRESETS[config.arch]
    if start_bundle is not None:
        if start_bundle.config != arch:
            raise ConfigError("start_bundle architecture does not match config.arch")
        bundle = start_bundle
    elif config.init_checkpoint:
        bundle, header = load_checkpoint(config.init_checkpoint)
        if bundle.config != arch:
            raise ConfigError(
                f"checkpoint architecture {bundle.config.name!r} does not match config.arch {config.arch!r}"
            )
    else:
        bundle = init_nets(arch, seed)

    schedule = config.schedule()
    perceptual = PerceptualProxy(config.perceptual_seed)
    rng = rngmod.stream(seed, f"train/stage{config.stage}")
    window = config.stage1_window if config.stage == 1 else config.clip_length
    sample_cfg = SampleConfig(resolution=arch.image_size, target_length=window, guidance=GuidanceConfig())
    mix_step = int(round(config.steps * config.illum_mix_fraction))
    freeze_step = int(round(config.steps * config.motion_freeze_fraction))
    optimizer = make_optimizer(config.optimizer, config.learning_rate)

    total_samples = config.steps * config.batch_size
    samples = _prefetched_samples(pool, bank, sample_cfg, seed, total_samples, worker_count())

    rows: list[dict] = []
    for step in range(1, config.steps + 1):
        if config.stage == 1:
            past_mix = step > mix_step
            names = trainable_names(bundle, 1, motion_frozen=step > freeze_step)
        else:
            past_mix = True
            names = trainable_names(bundle, 2)
        lats, sps = [], []
        for _ in range(config.batch_size):
            sample = next(samples)
            if config.stage == 1:
                lat, sp = _stage1_losses(bundle, sample, rng, schedule, perceptual, config, past_mix)
            else:
                lat, sp = _stage2_losses(bundle, sample, rng, schedule, perceptual, config)
            lats.append(lat)
            sps.append(sp)
        lat_mean, sp_mean = _mean(lats), _mean(sps)
        total = loss_total(lat_mean, sp_mean, config.spatial_loss_weight)
        values = {"loss_total": total.item(), "loss_latent": lat_mean.item(), "loss_spatial": sp_mean.item()}
        if not all(math.isfinite(v) for v in values.values()):
            raise TrainingDivergedError(
                f"non-finite loss at step {step} (stage {config.stage}, lr {config.learning_rate}): {values}"
            )
        grads = T.backward(total, params=[bundle.params[n] for n in names])
        optimizer.step(bundle.params, grads, names)
        rows.append({"step": step, **values})

    checkpoint_path = log_path = None
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        checkpoint_path = out / f"checkpoint_stage{config.stage}.utsr"
        save_checkpoint(checkpoint_path, bundle, config, config.steps)
        log_path = out / f"loss_stage{config.stage}.csv"
        write_loss_log(log_path, rows)
    return TrainResult(bundle=bundle, log_rows=rows, checkpoint_path=checkpoint_path, log_path=log_path)


def write_loss_log(path, rows: list[dict]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=LOG_FIELDS)
        writer.writeheader()
        for row in rows:
            writer.writerow({k: row[k] for k in LOG_FIELDS})


def read_loss_log(path) -> list[dict]:
    with open(path, newline="") as fh:
        rows = []
        for raw in csv.DictReader(fh):
            rows.append(
                {
                    "step": int(raw["step"]),
                    "loss_total": float(raw["loss_total"]),
                    "loss_latent": float(raw["loss_latent"]),
                    "loss_spatial": float(raw["loss_spatial"]),
                }
            )
        return rows


def smoothed_losses(rows: list[dict], window: int = 20, key: str = "loss_total") -> list[float]:
    """Trailing mean of a loss column; entry i averages rows max(0,i-w+1)..i."""
    values = [row[key] for row in rows]
    out = []
    for i in range(len(values)):
        lo = max(0, i - window + 1)
        out.append(float(np.mean(values[lo : i + 1])))
    return out
