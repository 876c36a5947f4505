"""Diffusion schedule, the two-part training objective, and latent coding.

The latent is an 8× average-pooled image in [-1, 1] (no learned autoencoder),
so the noise-prediction loss lives on a small grid while the perceptual term
compares decoded one-step reconstructions against ground truth in image
space, weighted by cos(t·π/2T) so low-noise steps dominate.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import ConfigError, ShapeError, Tensor


@dataclass
class DiffusionSchedule:
    """Linear β schedule with precomputed cumulative products."""

    steps: int
    beta_start: float = 0.002
    beta_end: float = 0.25

    def __post_init__(self):
        if self.steps < 1:
            raise ConfigError(f"schedule needs at least 1 step, got {self.steps}")
        if not 0.0 < self.beta_start < self.beta_end < 1.0:
            raise ConfigError(
                f"betas must satisfy 0 < start < end < 1, got {self.beta_start}, {self.beta_end}"
            )
        self.betas = np.linspace(self.beta_start, self.beta_end, self.steps)
        self.alphas = 1.0 - self.betas
        self.alpha_bars = np.cumprod(self.alphas)

    def alpha_bar(self, t: int) -> float:
        """Cumulative signal fraction at step t; t ranges over 1..steps."""
        self._check_t(t)
        return float(self.alpha_bars[t - 1])

    def _check_t(self, t: int) -> None:
        if not 1 <= t <= self.steps:
            raise ConfigError(f"t must be in 1..{self.steps}, got {t}")


def diffusion_forward(x0: Tensor, t: int, noise: Tensor, schedule: DiffusionSchedule) -> Tensor:
    """z_t = √ᾱ_t·x₀ + √(1−ᾱ_t)·ε."""
    x0, noise = T.as_tensor(x0), T.as_tensor(noise)
    if x0.shape != noise.shape:
        raise ShapeError(f"x0 {x0.shape} and noise {noise.shape} differ")
    ab = schedule.alpha_bar(t)
    return T.add(T.mul(x0, math.sqrt(ab)), T.mul(noise, math.sqrt(1.0 - ab)))


def reconstruct_x0(z_t: Tensor, noise_hat: Tensor, t: int, schedule: DiffusionSchedule) -> Tensor:
    """One-step clean-latent estimate: (z_t − √(1−ᾱ_t)·ε̂) / √ᾱ_t."""
    ab = schedule.alpha_bar(t)
    return T.mul(T.sub(z_t, T.mul(noise_hat, math.sqrt(1.0 - ab))), 1.0 / math.sqrt(ab))


def loss_latent(noise: Tensor, noise_hat: Tensor) -> Tensor:
    """Noise-prediction mean squared error."""
    return T.mse(noise, noise_hat)


def spatial_weight(t: int, steps: int) -> float:
    """cos(t·π/2T): 1 at t=0, 0 at t=T, strictly decreasing between."""
    if not 0 <= t <= steps:
        raise ConfigError(f"t must be in 0..{steps}, got {t}")
    if t == steps:
        return 0.0  # cos(π/2) in floats is 6e-17, not the exact zero the contract wants
    return math.cos(t * math.pi / (2.0 * steps))


def loss_spatial(
    predicted_image: Tensor,
    target_image: Tensor,
    t: int,
    schedule: DiffusionSchedule,
    perceptual: "PerceptualProxy",
) -> Tensor:
    """Timestep-weighted perceptual distance between decoded and true frames."""
    return T.mul(perceptual.distance(predicted_image, target_image), spatial_weight(t, schedule.steps))


def loss_total(latent: Tensor, spatial: Tensor, weight: float) -> Tensor:
    """latent + weight·spatial."""
    if weight < 0:
        raise ConfigError(f"spatial loss weight must be non-negative, got {weight}")
    return T.add(latent, T.mul(spatial, weight))


# ---------------------------------------------------------------------------
# latent coding (fixed 8× pooling, no learned autoencoder)


def encode_latent(image: Tensor, factor: int = 8) -> Tensor:
    """C×H×W image in [-1,1] → C×(H/f)×(W/f) pooled latent."""
    image = T.as_tensor(image)
    c, h, w = image.shape
    if h % factor or w % factor:
        raise ShapeError(f"image {h}×{w} not divisible by pooling factor {factor}")
    blocked = T.reshape(image, (c, h // factor, factor, w // factor, factor))
    return T.mean(blocked, axis=(2, 4))


def decode_latent(latent: Tensor, factor: int = 8) -> Tensor:
    """Nearest-neighbor unpooling back to image resolution."""
    return T.upsample_nearest(latent, factor)


def image_to_latent_array(image_hwc: np.ndarray, factor: int = 8) -> np.ndarray:
    """H×W×3 in [0,1] → plain-array latent in [-1,1]."""
    chw = np.moveaxis(np.asarray(image_hwc, dtype=np.float64), -1, 0) * 2.0 - 1.0
    c, h, w = chw.shape
    return chw.reshape(c, h // factor, factor, w // factor, factor).mean(axis=(2, 4))


def latent_to_image_array(latent: np.ndarray, factor: int = 8) -> np.ndarray:
    """Latent in [-1,1] → H×W×3 in [0,1], clipped for display."""
    up = np.repeat(np.repeat(latent, factor, axis=1), factor, axis=2)
    return np.clip(np.moveaxis(up, 0, -1) * 0.5 + 0.5, 0.0, 1.0)


# ---------------------------------------------------------------------------
# perceptual distance proxy


class PerceptualProxy:
    """Frozen random 3-layer conv extractor; distance is the mean of
    per-layer MSEs between channel-normalized feature maps.

    The weights are fixed constants from one seed, so the distance is a
    deterministic, differentiable function of its two images. It is a stand-in
    for a pretrained perceptual metric, not a claim of perceptual accuracy.
    """

    def __init__(self, seed: int = 0, channels: tuple[int, int, int] = (8, 16, 16)):
        rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(0x9E5C,)))
        c_prev = 3
        self.kernels: list[Tensor] = []
        for c in channels:
            k = rng.normal(scale=1.0 / math.sqrt(c_prev * 9), size=(c, c_prev, 3, 3))
            self.kernels.append(Tensor(k))
            c_prev = c

    def features(self, image: Tensor) -> list[Tensor]:
        h = T.as_tensor(image)
        feats = []
        for k in self.kernels:
            h = T.silu(T.conv2d(h, k, stride=2, padding=1))
            feats.append(h)
        return feats

    @staticmethod
    def _normalize(f: Tensor) -> Tensor:
        sq = T.sum_(T.mul(f, f), axis=0, keepdims=True)
        return T.mul(f, T.power(T.add(sq, 1e-8), -0.5))

    def distance(self, a: Tensor, b: Tensor) -> Tensor:
        a, b = T.as_tensor(a), T.as_tensor(b)
        if a.shape != b.shape:
            raise ShapeError(f"images differ in shape: {a.shape} vs {b.shape}")
        terms = []
        for fa, fb in zip(self.features(a), self.features(b)):
            terms.append(T.mse(self._normalize(fa), self._normalize(fb)))
        total = terms[0]
        for term in terms[1:]:
            total = T.add(total, term)
        return T.mul(total, 1.0 / len(terms))
