"""Image array helpers and PNG I/O.

Images move through the pipeline as float64 H×W×3 arrays in [0, 1]. PNG
round-trips quantize to 8 bits; tests that need exact equality compare the
quantized values.
"""

from __future__ import annotations

import numpy as np
from PIL import Image


def save_png(path, image: np.ndarray) -> None:
    """Write an H×W×3 float image in [0, 1] as 8-bit PNG."""
    arr = np.clip(np.asarray(image), 0.0, 1.0)
    Image.fromarray((arr * 255.0 + 0.5).astype(np.uint8), mode="RGB").save(path)


def load_png(path) -> np.ndarray:
    """Read a PNG as H×W×3 float64 in [0, 1]."""
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0


def save_mask(path, mask: np.ndarray) -> None:
    """Write an H×W float mask in [0, 1] as single-channel 8-bit PNG."""
    arr = np.clip(np.asarray(mask, dtype=np.float64), 0.0, 1.0)
    Image.fromarray((arr * 255.0 + 0.5).astype(np.uint8), mode="L").save(path)


def load_mask(path) -> np.ndarray:
    """Read a single-channel PNG as H×W float64 in [0, 1]."""
    with Image.open(path) as im:
        return np.asarray(im.convert("L"), dtype=np.float64) / 255.0


def to_chw(image: np.ndarray) -> np.ndarray:
    """H×W×C to C×H×W."""
    return np.ascontiguousarray(np.moveaxis(image, -1, 0))


def to_hwc(image: np.ndarray) -> np.ndarray:
    """C×H×W to H×W×C."""
    return np.ascontiguousarray(np.moveaxis(image, 0, -1))


def downsample_mean(image: np.ndarray, factor: int) -> np.ndarray:
    """Average-pool the spatial axes of a C×H×W array by an integer factor."""
    c, h, w = image.shape
    if h % factor or w % factor:
        raise ValueError(f"size {h}×{w} not divisible by {factor}")
    return image.reshape(c, h // factor, factor, w // factor, factor).mean(axis=(2, 4))


def to_signed(image: np.ndarray) -> np.ndarray:
    """Map [0, 1] to [-1, 1]."""
    return image * 2.0 - 1.0


def to_unit(image: np.ndarray) -> np.ndarray:
    """Map [-1, 1] back to [0, 1]."""
    return (image + 1.0) * 0.5
