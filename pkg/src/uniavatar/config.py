"""Run configuration: one flat record covering the whole pipeline.

Two presets exist. ``desk`` is sized for a laptop CPU: 64-pixel images, a
50-step diffusion schedule, a few hundred optimizer steps. ``paper`` mirrors
the published constants: 512 pixels, the wide channel schedule, batch 8,
learning rate 1e-5, 15,000 + 5,000 steps, 14-frame clips. Configs load from
a JSON file whose ``preset`` key picks the base; any other key overrides one
field, and unknown keys are rejected rather than ignored.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, fields, replace

from .diffusion import DiffusionSchedule
from .guidance import GuidanceConfig, default_fixed_lighting
from .shapes import PRESETS
from .tensor import ConfigError
from .training import TrainConfig

# one help line per field; tests assert nothing is missing
FIELD_DOCS = {
    "preset": "base preset this config started from ('desk' or 'paper')",
    "arch": "network channel-schedule preset ('desk' or 'paper')",
    "resolution": "square image size in pixels; must match the arch preset",
    "blur_radius": "Gaussian blur radius for illumination guidance (sigma = radius/3)",
    "lips_mask_prob": "probability of masking the lips region of motion guidance",
    "motion_dropout_prob": "probability of dropping motion guidance for a sample",
    "global_dropout_prob": "probability of dropping every condition for a sample",
    "schedule_steps": "number of diffusion steps T",
    "beta_start": "first value of the linear beta schedule",
    "beta_end": "last value of the linear beta schedule",
    "spatial_loss_weight": "weight of the perceptual spatial loss term",
    "stage1_steps": "optimizer steps for training stage 1",
    "stage2_steps": "optimizer steps for training stage 2",
    "batch_size": "samples per optimizer step",
    "learning_rate": "optimizer step size",
    "optimizer": "parameter update rule: 'adam' or 'sgd'",
    "illum_mix_fraction": "share of stage-1 steps before illumination data joins",
    "motion_freeze_fraction": "share of stage-1 steps before the motion encoder freezes",
    "stage1_window": "frames fetched per stage-1 sample",
    "clip_length": "frames per stage-2 training clip",
    "context_frames": "clean anchor frames per clip (training and inference)",
    "infer_window": "frames generated per inference window",
    "perceptual_seed": "seed of the frozen perceptual feature extractor",
    "init_checkpoint": "optional checkpoint path to start training from",
    "seed": "default seed when the command line gives none",
    "data": "default dataset root when the command line gives none",
    "out": "default output directory when the command line gives none",
}


@dataclass
class RunConfig:
    """Every knob of the pipeline with its desk-scale default."""

    preset: str = "desk"
    arch: str = "desk"
    resolution: int = 64
    blur_radius: int = 15
    lips_mask_prob: float = 0.4
    motion_dropout_prob: float = 0.2
    global_dropout_prob: float = 0.05
    schedule_steps: int = 50
    beta_start: float = 0.002
    beta_end: float = 0.25
    spatial_loss_weight: float = 0.1
    stage1_steps: int = 500
    stage2_steps: int = 200
    batch_size: int = 2
    learning_rate: float = 2e-3
    optimizer: str = "adam"
    illum_mix_fraction: float = 0.2
    motion_freeze_fraction: float = 2.0 / 3.0
    stage1_window: int = 2
    clip_length: int = 4
    context_frames: int = 2
    infer_window: int = 4
    perceptual_seed: int = 0
    init_checkpoint: str | None = None
    seed: int = 0
    data: str | None = None
    out: str | None = None

    def validate(self) -> None:
        if self.arch not in PRESETS:
            raise ConfigError(f"unknown arch preset {self.arch!r} (expected one of {sorted(PRESETS)})")
        expected = PRESETS[self.arch].image_size
        if self.resolution != expected:
            raise ConfigError(
                f"resolution {self.resolution} does not match arch {self.arch!r} (image size {expected})"
            )
        self.guidance_config()  # probability/radius ranges
        self.to_train_config(1)
        self.to_train_config(2)
        self.schedule()

    def guidance_config(self) -> GuidanceConfig:
        return GuidanceConfig(
            fixed_lighting=default_fixed_lighting(),
            blur_radius=self.blur_radius,
            lips_mask_prob=self.lips_mask_prob,
            motion_dropout_prob=self.motion_dropout_prob,
            global_dropout_prob=self.global_dropout_prob,
        )

    def schedule(self) -> DiffusionSchedule:
        return DiffusionSchedule(self.schedule_steps, self.beta_start, self.beta_end)

    def to_train_config(self, stage: int) -> TrainConfig:
        cfg = TrainConfig(
            stage=stage,
            steps=self.stage1_steps if stage == 1 else self.stage2_steps,
            batch_size=self.batch_size,
            learning_rate=self.learning_rate,
            optimizer=self.optimizer,
            spatial_loss_weight=self.spatial_loss_weight,
            schedule_steps=self.schedule_steps,
            beta_start=self.beta_start,
            beta_end=self.beta_end,
            illum_mix_fraction=self.illum_mix_fraction,
            motion_freeze_fraction=self.motion_freeze_fraction,
            stage1_window=self.stage1_window,
            clip_length=self.clip_length,
            context_frames=self.context_frames,
            arch=self.arch,
            perceptual_seed=self.perceptual_seed,
            init_checkpoint=self.init_checkpoint,
        )
        cfg.validate()
        return cfg


def paper_run_config() -> RunConfig:
    """Published constants: wide channels, batch 8, lr 1e-5, long schedule."""
    return RunConfig(
        preset="paper",
        arch="paper",
        resolution=512,
        schedule_steps=1000,
        beta_start=1e-4,
        beta_end=0.02,
        stage1_steps=15000,
        stage2_steps=5000,
        batch_size=8,
        learning_rate=1e-5,
        illum_mix_fraction=10000 / 15000,  # relighting data joins and the motion encoder freezes together
        motion_freeze_fraction=10000 / 15000,
        clip_length=14,
        infer_window=14,
    )


RUN_PRESETS = {"desk": RunConfig, "paper": paper_run_config}

_FIELD_TYPES = {f.name: f for f in fields(RunConfig)}


def base_config(preset: str) -> RunConfig:
    try:
        return RUN_PRESETS[preset]()
    except KeyError:
        raise ConfigError(f"unknown preset {preset!r} (expected one of {sorted(RUN_PRESETS)})")


def apply_overrides(config: RunConfig, overrides: dict) -> RunConfig:
    """Replace fields by name; unknown names are an error, None values skipped."""
    clean = {}
    for key, value in overrides.items():
        if key not in _FIELD_TYPES:
            raise ConfigError(f"unknown config key {key!r}")
        if value is None:
            continue
        clean[key] = value
    updated = replace(config, **clean)
    updated.validate()
    return updated


def load_config(path=None, overrides: dict | None = None) -> RunConfig:
    """Config file (optional) + override mapping (optional) → validated RunConfig.

    The file is JSON; its ``preset`` key selects the base ('desk' when
    absent) and every other key overrides one field. Overrides passed by the
    caller (CLI flags) win over file values.
    """
    file_values: dict = {}
    if path is not None:
        with open(path, encoding="utf-8") as fh:
            try:
                file_values = json.load(fh)
            except json.JSONDecodeError as e:
                raise ConfigError(f"config file {path} is not valid JSON: {e}")
        if not isinstance(file_values, dict):
            raise ConfigError(f"config file {path} must hold a JSON object")
    preset = file_values.pop("preset", "desk")
    config = base_config(preset)
    config = apply_overrides(config, file_values)
    if overrides:
        config = apply_overrides(config, overrides)
    return config


def describe_fields() -> str:
    """One line per field: name, default, meaning. Backs the CLI help text."""
    desk = RunConfig()
    lines = []
    for f in fields(RunConfig):
        default = getattr(desk, f.name)
        lines.append(f"  {f.name} (default {default!r}): {FIELD_DOCS[f.name]}")
    return "\n".join(lines)


def config_to_json(config: RunConfig) -> str:
    return json.dumps(asdict(config), indent=2, sort_keys=True)
