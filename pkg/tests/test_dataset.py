"""Clip pools, cross-source pairing, compositing, synthetic generation."""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np
import pytest

from uniavatar import images
from uniavatar.dataset import (
    BackgroundBank,
    ClipRecord,
    DatasetSpec,
    IdentityPool,
    SampleConfig,
    assemble_training_sample,
    build_identity_pool,
    composite_background,
    generate_synthetic_dataset,
    load_background_bank,
    sample_cross_source_pair,
)
from uniavatar.facemodel import FaceParams, load_model
from uniavatar.guidance import GuidanceConfig
from uniavatar.raster import gaussian_blur, render_face
from uniavatar.tensor import ConfigError, ShapeError

SPEC = DatasetSpec(identities=2, lightings=2, clips=2, frames=8, resolution=64, backgrounds=8, vertices=64)


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("synth")
    pool = generate_synthetic_dataset(SPEC, seed=101, out_root=root)
    return root, pool


def fake_pool(clip_ids, frames_each=6) -> IdentityPool:
    neutral = FaceParams(
        pose=np.zeros(3), shape=np.zeros(1), expression=np.zeros(1),
        camera=np.array([1.0, 0.0, 0.0]), lighting=np.zeros((9, 3)),
    )
    clips = [
        ClipRecord(
            identity_id="idX",
            clip_id=cid,
            lighting_label="light0",
            params=[neutral] * frames_each,
            frame_paths=[Path(f"{cid}/f{k}.png") for k in range(frames_each)],
            mask_paths=[Path(f"{cid}/m{k}.png") for k in range(frames_each)],
            audio_path=Path(f"{cid}/audio.utsr"),
        )
        for cid in clip_ids
    ]
    return IdentityPool(clips={"idX": clips}, model_paths={})


# ---------------------------------------------------------------------------
# generation


def test_generated_tree_counts(dataset):
    root, pool = dataset
    assert pool.identities == ["id000", "id001"]
    assert pool.clip_count() == 8  # 2 ids × 2 lightings × 2 clips
    for identity in pool.identities:
        assert len(pool.clips[identity]) == 4
    frame_files = list(root.glob("id*/l*_c*/frame_*.png"))
    assert len(frame_files) == 64  # 8 clips × 8 frames
    assert len(list(root.glob("backgrounds/bg_*.png"))) == 8
    assert (root / "manifest.jsonl").exists()


def test_generation_is_byte_identical(tmp_path):
    small = DatasetSpec(identities=1, lightings=1, clips=2, frames=3, resolution=32, backgrounds=3, vertices=48)
    a, b = tmp_path / "a", tmp_path / "b"
    generate_synthetic_dataset(small, seed=7, out_root=a)
    generate_synthetic_dataset(small, seed=7, out_root=b)
    files_a = sorted(p.relative_to(a) for p in a.rglob("*") if p.is_file())
    files_b = sorted(p.relative_to(b) for p in b.rglob("*") if p.is_file())
    assert files_a == files_b
    for rel in files_a:
        assert (a / rel).read_bytes() == (b / rel).read_bytes(), rel


def test_rerender_oracle_reproduces_stored_frames(dataset):
    root, pool = dataset
    clip = pool.clips["id000"][0]
    model = load_model(root / "id000" / "model.ufm")
    for idx in (0, clip.n_frames - 1):
        out = render_face(model, clip.params[idx], SPEC.resolution)
        quantized = (np.clip(out.image, 0, 1) * 255.0 + 0.5).astype(np.uint8) / 255.0
        np.testing.assert_array_equal(images.load_png(clip.frame_paths[idx]), quantized)
        mask_q = (out.coverage_mask.astype(np.float64) * 255.0 + 0.5).astype(np.uint8) / 255.0
        np.testing.assert_array_equal(images.load_mask(clip.mask_paths[idx]), mask_q)


def test_pool_serialization_is_stable(dataset):
    root, _ = dataset
    s1 = build_identity_pool(root).serialize(root)
    s2 = build_identity_pool(root).serialize(root)
    assert s1 == s2
    assert (root / "manifest.jsonl").read_text() == s1


def test_malformed_clip_is_skipped(dataset, tmp_path):
    root, _ = dataset
    import shutil

    broken_root = tmp_path / "broken"
    shutil.copytree(root, broken_root)
    victim = broken_root / "id000" / "l0_c0"
    (victim / "mask_00000.png").unlink()  # count mismatch now
    pool = build_identity_pool(broken_root)
    assert pool.clip_count() == 7
    assert any("l0_c0" in d for d in pool.diagnostics)


def test_duplicate_clip_id_rejected(dataset, tmp_path):
    root, _ = dataset
    import shutil

    dup_root = tmp_path / "dup"
    shutil.copytree(root, dup_root)
    src = dup_root / "id000" / "l0_c0"
    shutil.copytree(src, dup_root / "id000" / "l9_c9")  # same clip.json inside
    with pytest.raises(ConfigError):
        build_identity_pool(dup_root)


def test_empty_dataset_rejected(tmp_path):
    with pytest.raises(ConfigError):
        build_identity_pool(tmp_path)


def test_audio_embeddings_shape_and_smoothness(dataset):
    _, pool = dataset
    clip = pool.clips["id001"][0]
    audio = clip.load_audio()
    assert audio.shape == (8, 32)
    steps = np.linalg.norm(np.diff(audio, axis=0), axis=1)
    values = np.linalg.norm(audio, axis=1)
    assert steps.mean() < values.mean()  # walk moves less than it sits


# ---------------------------------------------------------------------------
# pairing


def test_cross_source_never_repeats_clip():
    pool = fake_pool(["A", "B"])
    rng = np.random.default_rng(30)
    for _ in range(1000):
        pair = sample_cross_source_pair(pool, "idX", rng, target_length=4)
        assert pair.reference_clip.clip_id != pair.target_clip.clip_id
        assert not pair.intra_source


def test_cross_source_pairs_are_uniform():
    pool = fake_pool(["A", "B", "C"])
    rng = np.random.default_rng(31)
    counts: dict[tuple, int] = {}
    n = 10_000
    for _ in range(n):
        pair = sample_cross_source_pair(pool, "idX", rng, target_length=4)
        key = (pair.reference_clip.clip_id, pair.target_clip.clip_id)
        counts[key] = counts.get(key, 0) + 1
    assert len(counts) == 6
    for key, c in counts.items():
        assert abs(c / n - 1 / 6) <= 0.03, (key, c / n)


def test_single_clip_identity_falls_back_intra_source():
    pool = fake_pool(["only"])
    pair = sample_cross_source_pair(pool, "idX", np.random.default_rng(32), target_length=4)
    assert pair.intra_source
    assert pair.reference_clip.clip_id == "only" == pair.target_clip.clip_id


def test_target_window_fits_clip():
    pool = fake_pool(["A", "B"], frames_each=5)
    rng = np.random.default_rng(33)
    for _ in range(200):
        pair = sample_cross_source_pair(pool, "idX", rng, target_length=14)
        assert pair.target_length == 5
        assert pair.target_start == 0
    for _ in range(200):
        pair = sample_cross_source_pair(pool, "idX", rng, target_length=3)
        assert pair.target_length == 3
        assert 0 <= pair.target_start <= 2


def test_unknown_identity_rejected():
    pool = fake_pool(["A", "B"])
    with pytest.raises(ConfigError):
        sample_cross_source_pair(pool, "nobody", np.random.default_rng(0), 4)


# ---------------------------------------------------------------------------
# compositing


def test_composite_mask_extremes():
    rng = np.random.default_rng(34)
    frame = rng.uniform(size=(16, 16, 3))
    bg = rng.uniform(size=(16, 16, 3))
    np.testing.assert_array_equal(composite_background(frame, np.ones((16, 16)), bg), frame)
    np.testing.assert_array_equal(composite_background(frame, np.zeros((16, 16)), bg), bg)


def test_composite_half_plane():
    rng = np.random.default_rng(35)
    frame = rng.uniform(size=(8, 8, 3))
    bg = rng.uniform(size=(8, 8, 3))
    mask = np.zeros((8, 8))
    mask[:, :4] = 1.0
    out = composite_background(frame, mask, bg)
    np.testing.assert_array_equal(out[:, :4], frame[:, :4])
    np.testing.assert_array_equal(out[:, 4:], bg[:, 4:])


def test_composite_soft_mask_blends():
    frame = np.ones((4, 4, 3))
    bg = np.zeros((4, 4, 3))
    out = composite_background(frame, np.full((4, 4), 0.25), bg)
    np.testing.assert_allclose(out, 0.25)


def test_composite_resolution_mismatch():
    with pytest.raises(ShapeError):
        composite_background(np.zeros((8, 8, 3)), np.zeros((8, 8)), np.zeros((9, 8, 3)))
    with pytest.raises(ShapeError):
        composite_background(np.zeros((8, 8, 3)), np.zeros((4, 8)), np.zeros((8, 8, 3)))


def test_background_bank_requires_images(tmp_path):
    with pytest.raises(ConfigError):
        BackgroundBank([])


# ---------------------------------------------------------------------------
# assembled samples


def sample_cfg(target_length=3, **guidance_kw) -> SampleConfig:
    return SampleConfig(
        resolution=64,
        target_length=target_length,
        guidance=GuidanceConfig(blur_radius=5, **guidance_kw),
    )


def test_assembled_sample_is_deterministic(dataset):
    root, pool = dataset
    bank = load_background_bank(root / "backgrounds")
    a = assemble_training_sample(pool, bank, sample_cfg(), global_seed=50, sample_id=3)
    b = assemble_training_sample(pool, bank, sample_cfg(), global_seed=50, sample_id=3)
    np.testing.assert_array_equal(a.reference_image, b.reference_image)
    np.testing.assert_array_equal(a.target_frames, b.target_frames)
    np.testing.assert_array_equal(a.audio_embedding, b.audio_embedding)
    for ga, gb in zip(a.motion_guidance, b.motion_guidance):
        np.testing.assert_array_equal(ga.image, gb.image)
        assert ga.dropped == gb.dropped and ga.lips_masked == gb.lips_masked
    assert a.background_id == b.background_id
    assert a.reference_clip_id == b.reference_clip_id
    c = assemble_training_sample(pool, bank, sample_cfg(), global_seed=50, sample_id=4)
    assert (
        c.background_id != a.background_id
        or c.identity_id != a.identity_id
        or not np.array_equal(c.reference_image, a.reference_image)
    )


def test_assembled_sample_invariants(dataset):
    root, pool = dataset
    bank = load_background_bank(root / "backgrounds")
    cfg = sample_cfg()
    for sid in range(12):
        s = assemble_training_sample(pool, bank, cfg, global_seed=51, sample_id=sid)
        assert s.reference_clip_id != s.target_clip_id
        assert not s.intra_source
        assert s.target_frames.shape == (3, 64, 64, 3)
        assert s.audio_embedding.shape == (3, 32)
        # background stability: outside every face mask, ref == each target
        ref_clip = next(c for c in pool.clips[s.identity_id] if c.clip_id == s.reference_clip_id)
        # reference mask is not in the sample; recover it from the pool
        ref_idx = None
        for k in range(ref_clip.n_frames):
            candidate = images.load_mask(ref_clip.mask_paths[k])
            frame = images.load_png(ref_clip.frame_paths[k])
            bg = bank.load(s.background_id)
            if np.array_equal(composite_background(frame, candidate, bg), s.reference_image):
                ref_idx = k
                ref_mask = candidate
                break
        assert ref_idx is not None
        outside = (ref_mask == 0) & np.all(s.target_masks == 0, axis=0)
        assert outside.any()
        for t in range(s.target_frames.shape[0]):
            np.testing.assert_array_equal(s.target_frames[t][outside], s.reference_image[outside])


def test_illumination_guidance_matches_label_rerender(dataset):
    root, pool = dataset
    bank = load_background_bank(root / "backgrounds")
    cfg = sample_cfg()
    s = assemble_training_sample(pool, bank, cfg, global_seed=52, sample_id=0)
    if s.illumination_guidance.dropped:
        s = assemble_training_sample(pool, bank, cfg, global_seed=52, sample_id=1)
    model = pool.load_face_model(s.identity_id)
    neutral = FaceParams.neutral(model, s.target_params[0].lighting)
    neutral.camera = s.target_params[0].camera
    expected = gaussian_blur(render_face(model, neutral, 64).image, cfg.guidance.blur_radius)
    np.testing.assert_array_equal(s.illumination_guidance.image, expected)


def test_dropout_and_lips_flags_respond_to_probabilities(dataset):
    root, pool = dataset
    bank = load_background_bank(root / "backgrounds")
    always = sample_cfg(lips_mask_prob=1.0, motion_dropout_prob=1.0, global_dropout_prob=0.0)
    s = assemble_training_sample(pool, bank, always, global_seed=53, sample_id=0)
    assert all(g.dropped for g in s.motion_guidance)
    assert not s.illumination_guidance.dropped
    assert not s.audio_dropped

    global_drop = sample_cfg(lips_mask_prob=0.0, motion_dropout_prob=0.0, global_dropout_prob=1.0)
    s = assemble_training_sample(pool, bank, global_drop, global_seed=53, sample_id=1)
    assert all(g.dropped for g in s.motion_guidance)
    assert s.illumination_guidance.dropped
    assert s.audio_dropped
    np.testing.assert_array_equal(s.illumination_guidance.image, 0.0)

    never = sample_cfg(lips_mask_prob=0.0, motion_dropout_prob=0.0, global_dropout_prob=0.0)
    s = assemble_training_sample(pool, bank, never, global_seed=53, sample_id=2)
    assert not any(g.dropped or g.lips_masked for g in s.motion_guidance)

    lips_only = sample_cfg(lips_mask_prob=1.0, motion_dropout_prob=0.0, global_dropout_prob=0.0)
    s = assemble_training_sample(pool, bank, lips_only, global_seed=53, sample_id=3)
    assert all(g.lips_masked for g in s.motion_guidance)
