"""Architecture presets and symbolic shape evaluation.

Shapes are derived arithmetically from a preset, never by allocating
tensors, so the full-size preset can be checked on any machine. The desk
preset is the same network at toy width and resolution.
"""

from __future__ import annotations

from dataclasses import dataclass, field

from .tensor import ConfigError


@dataclass(frozen=True)
class ArchConfig:
    """Width/size knobs shared by the encoders and the denoiser."""

    name: str
    image_size: int = 64
    in_channels: int = 3
    motion_channels: tuple[int, ...] = (16, 16, 32, 32, 64, 64)
    illum_channels: int = 16
    denoise_channels: tuple[int, int, int] = (16, 32, 64)
    latent_channels: int = 3
    heads: int = 2
    audio_dim: int = 32
    expr_dim: int = 4
    time_dim: int = 16
    adaln_hidden: int = 16
    latent_factor: int = 8

    def __post_init__(self):
        if self.image_size % 32 != 0:
            raise ConfigError(f"image size must be divisible by 32, got {self.image_size}")
        if len(self.motion_channels) != 6:
            raise ConfigError("motion encoder has exactly 6 blocks")
        pairs = (
            self.denoise_channels[0],
            self.denoise_channels[0],
            self.denoise_channels[1],
            self.denoise_channels[1],
            self.denoise_channels[2],
            self.denoise_channels[2],
        )
        if tuple(self.motion_channels) != pairs:
            raise ConfigError(
                f"motion tap channels {self.motion_channels} must pair up with "
                f"denoiser stage channels {self.denoise_channels}"
            )
        if self.illum_channels != self.denoise_channels[0]:
            raise ConfigError(
                "illumination feature channels must match the denoiser entry stage "
                f"({self.illum_channels} vs {self.denoise_channels[0]})"
            )


DESK = ArchConfig(name="desk")

PAPER = ArchConfig(
    name="paper",
    image_size=512,
    motion_channels=(320, 320, 640, 640, 1280, 1280),
    illum_channels=320,
    denoise_channels=(320, 640, 1280),
    heads=8,
    audio_dim=768,
    expr_dim=50,
    time_dim=1280,
    adaln_hidden=1280,
)

PRESETS = {"desk": DESK, "paper": PAPER}


def grid_side(config: ArchConfig) -> int:
    """Side of the 1/8-resolution grid the encoders and latent live on."""
    return config.image_size // config.latent_factor


def motion_tap_shapes(config: ArchConfig) -> list[tuple[int, int]]:
    """(token_count, channels) of the 6 motion-encoder taps."""
    side = grid_side(config)
    sides = (side, side, side // 2, side // 2, side // 4, side // 4)
    return [(s * s, c) for s, c in zip(sides, config.motion_channels)]


def motion_tap_grids(config: ArchConfig) -> list[tuple[int, int, int]]:
    """(channels, height, width) of the 6 taps."""
    side = grid_side(config)
    sides = (side, side, side // 2, side // 2, side // 4, side // 4)
    return [(c, s, s) for s, c in zip(sides, config.motion_channels)]


def illumination_feature_shape(config: ArchConfig) -> tuple[int, int, int]:
    side = grid_side(config)
    return (config.illum_channels, side, side)


def latent_shape(config: ArchConfig) -> tuple[int, int, int]:
    side = grid_side(config)
    return (config.latent_channels, side, side)


def shape_report(config: ArchConfig) -> str:
    """Human-readable table of the preset's derived shapes."""
    lines = [
        f"preset: {config.name}",
        f"input: {config.in_channels}x{config.image_size}x{config.image_size}",
        f"latent: {'x'.join(map(str, latent_shape(config)))}",
    ]
    for i, ((tokens, channels), (c, h, w)) in enumerate(
        zip(motion_tap_shapes(config), motion_tap_grids(config)), start=1
    ):
        lines.append(f"motion tap {i}: {tokens}x{channels} (grid {c}x{h}x{w})")
    c, h, w = illumination_feature_shape(config)
    lines.append(f"illumination feature: {c}x{h}x{w}")
    return "\n".join(lines)
