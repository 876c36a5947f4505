"""Condition image disentanglement, composition, masking, and dropout."""

from __future__ import annotations

import numpy as np
import pytest

from uniavatar.facemodel import FaceParams, make_synthetic_model
from uniavatar.guidance import (
    GuidanceConfig,
    GuidanceImage,
    apply_condition_dropout,
    apply_lips_mask,
    lips_pixel_mask,
    render_illumination_guidance,
    render_motion_guidance,
    total_variation,
)
from uniavatar.raster import gaussian_blur, render_face
from uniavatar.tensor import ConfigError

MODEL = make_synthetic_model(96, seed=20)
CONFIG = GuidanceConfig(blur_radius=5)


def random_params(rng) -> FaceParams:
    return FaceParams(
        pose=rng.normal(scale=0.3, size=3),
        shape=rng.normal(scale=0.5, size=MODEL.n_shape),
        expression=rng.normal(scale=0.5, size=MODEL.n_expression),
        camera=np.array([rng.uniform(0.8, 1.3), rng.uniform(-0.1, 0.1), rng.uniform(-0.1, 0.1)]),
        lighting=rng.normal(scale=0.8, size=(9, 3)),
    )


def test_motion_guidance_ignores_target_lighting():
    rng = np.random.default_rng(21)
    for _ in range(10):
        p1 = random_params(rng)
        p2 = FaceParams(**{**p1.to_dict(), "lighting": rng.normal(size=(9, 3))})
        g1 = render_motion_guidance(MODEL, p1, CONFIG, 64)
        g2 = render_motion_guidance(MODEL, p2, CONFIG, 64)
        np.testing.assert_array_equal(g1.image, g2.image)
        np.testing.assert_array_equal(g1.coverage_mask, g2.coverage_mask)


def test_motion_guidance_sees_pose_changes():
    rng = np.random.default_rng(22)
    p1 = random_params(rng)
    p2 = FaceParams(**{**p1.to_dict(), "pose": p1.pose + np.array([0.0, 0.25, 0.0])})
    g1 = render_motion_guidance(MODEL, p1, CONFIG, 64)
    g2 = render_motion_guidance(MODEL, p2, CONFIG, 64)
    frac_diff = np.mean(np.any(g1.image != g2.image, axis=2))
    assert frac_diff >= 0.01, frac_diff


def test_motion_guidance_composition_oracle():
    # neutral target + identity camera must equal a direct render of the
    # template under the fixed rig
    target = FaceParams.neutral(MODEL, lighting=np.ones((9, 3)))  # lighting must be ignored
    g = render_motion_guidance(MODEL, target, CONFIG, 64)
    direct = render_face(MODEL, FaceParams.neutral(MODEL, CONFIG.fixed_lighting), 64)
    np.testing.assert_array_equal(g.image, direct.image)
    np.testing.assert_array_equal(g.coverage_mask, direct.coverage_mask)


def test_illumination_guidance_ignores_geometry_params():
    rng = np.random.default_rng(23)
    lighting = rng.normal(scale=0.8, size=(9, 3))
    camera = np.array([1.1, 0.02, -0.03])
    images = []
    for _ in range(5):
        _ = random_params(rng)  # geometry params play no role, by construction
        images.append(render_illumination_guidance(MODEL, lighting, camera, CONFIG, 64).image)
    for img in images[1:]:
        np.testing.assert_array_equal(img, images[0])


def test_illumination_guidance_zero_lighting_is_black():
    g = render_illumination_guidance(MODEL, np.zeros((9, 3)), np.array([1.0, 0.0, 0.0]), CONFIG, 64)
    np.testing.assert_array_equal(g.image, 0.0)


def test_illumination_guidance_composition_oracle():
    rng = np.random.default_rng(24)
    lighting = rng.normal(scale=0.8, size=(9, 3))
    camera = np.array([1.0, 0.0, 0.0])
    g = render_illumination_guidance(MODEL, lighting, camera, CONFIG, 64)
    unblurred = render_face(MODEL, FaceParams.neutral(MODEL, lighting), 64)
    np.testing.assert_array_equal(g.image, gaussian_blur(unblurred.image, CONFIG.blur_radius))
    assert g.blur_radius == CONFIG.blur_radius


def test_illumination_linearity_pre_blur_pre_clamp():
    rng = np.random.default_rng(25)
    l1 = rng.normal(scale=0.5, size=(9, 3))
    l2 = rng.normal(scale=0.5, size=(9, 3))
    r1 = render_face(MODEL, FaceParams.neutral(MODEL, l1), 48).radiance
    r2 = render_face(MODEL, FaceParams.neutral(MODEL, l2), 48).radiance
    rsum = render_face(MODEL, FaceParams.neutral(MODEL, l1 + l2), 48).radiance
    np.testing.assert_allclose(rsum, r1 + r2, atol=1e-12)


def test_blur_reduces_total_variation():
    rng = np.random.default_rng(26)
    for _ in range(5):
        lighting = rng.normal(scale=0.8, size=(9, 3))
        sharp = render_face(MODEL, FaceParams.neutral(MODEL, lighting), 64).image
        if total_variation(sharp) == 0.0:
            continue
        blurred = gaussian_blur(sharp, 5)
        assert total_variation(blurred) < total_variation(sharp)


def test_lips_mask_probability_extremes():
    rng_params = np.random.default_rng(27)
    target = random_params(rng_params)
    g = render_motion_guidance(MODEL, target, CONFIG, 64)
    lips = lips_pixel_mask(MODEL, target, 64)
    assert lips.any(), "synthetic model must produce a visible lips region"
    assert (lips & ~g.coverage_mask).sum() == 0  # lips pixels lie on the face

    rng = np.random.default_rng(28)
    for _ in range(20):
        out = apply_lips_mask(g, lips, rng, p=0.0)
        assert out is g
    for _ in range(20):
        out = apply_lips_mask(g, lips, rng, p=1.0)
        assert out.lips_masked
        np.testing.assert_array_equal(out.image[lips], 0.0)
        np.testing.assert_array_equal(out.image[~lips], g.image[~lips])


def test_lips_mask_requires_motion_kind():
    g = GuidanceImage(kind="illumination", image=np.zeros((4, 4, 3)), coverage_mask=np.zeros((4, 4), bool))
    with pytest.raises(ConfigError):
        apply_lips_mask(g, np.zeros((4, 4), bool), np.random.default_rng(0), 0.5)


def test_condition_dropout_extremes_and_reproducibility():
    g = GuidanceImage(kind="motion", image=np.ones((8, 8, 3)), coverage_mask=np.ones((8, 8), bool))
    rng = np.random.default_rng(29)
    for _ in range(20):
        assert apply_condition_dropout(g, rng, p=0.0) is g
    for _ in range(20):
        out = apply_condition_dropout(g, rng, p=1.0)
        assert out.dropped
        np.testing.assert_array_equal(out.image, 0.0)

    draws1 = [apply_condition_dropout(g, np.random.default_rng(seed), 0.5).dropped for seed in range(40)]
    draws2 = [apply_condition_dropout(g, np.random.default_rng(seed), 0.5).dropped for seed in range(40)]
    assert draws1 == draws2
    assert any(draws1) and not all(draws1)


def test_guidance_config_validation():
    with pytest.raises(ConfigError):
        GuidanceConfig(lips_mask_prob=1.5)
    with pytest.raises(ConfigError):
        GuidanceConfig(motion_dropout_prob=-0.1)
    with pytest.raises(ConfigError):
        GuidanceConfig(blur_radius=0)
