"""Trainer tests: optimizers, parameter selection, checkpoints, loops."""

import math

import numpy as np
import pytest

from uniavatar import tensor as T
from uniavatar import utsr
from uniavatar.dataset import DatasetSpec, generate_synthetic_dataset, load_background_bank
from uniavatar.facemodel import FaceParams
from uniavatar.guidance import GuidanceImage
from uniavatar.nets import init_nets
from uniavatar.shapes import DESK
from uniavatar.tensor import ConfigError, Tensor
from uniavatar.training import (
    SGD,
    Adam,
    TrainConfig,
    TrainingDivergedError,
    build_conditions,
    config_fingerprint,
    load_checkpoint,
    make_optimizer,
    read_loss_log,
    save_checkpoint,
    smoothed_losses,
    train,
    trainable_names,
    worker_count,
    write_loss_log,
)


@pytest.fixture(scope="module")
def tiny_data(tmp_path_factory):
    root = tmp_path_factory.mktemp("trainer-data")
    spec = DatasetSpec(identities=1, lightings=2, clips=1, frames=4, resolution=64, backgrounds=4, vertices=48)
    pool = generate_synthetic_dataset(spec, seed=31, out_root=root)
    bank = load_background_bank(root / "backgrounds")
    return pool, bank


# ---------------------------------------------------------------------------
# optimizers


def test_sgd_step_is_exact():
    p = T.parameter(np.array([1.0, -2.0, 3.0]), "w")
    grads = {"w": Tensor(np.array([0.5, 0.5, -1.0]))}
    SGD(0.1).step({"w": p}, grads, ["w"])
    np.testing.assert_array_equal(p.data, [1.0 - 0.05, -2.0 - 0.05, 3.0 + 0.1])


def test_sgd_rejects_bad_lr():
    with pytest.raises(ConfigError):
        SGD(0.0)


def test_adam_first_step_matches_closed_form():
    g = np.array([0.3, -0.7, 0.0])
    p = T.parameter(np.zeros(3), "w")
    opt = Adam(1e-2)
    opt.step({"w": p}, {"w": Tensor(g)}, ["w"])
    # at t=1 the bias corrections cancel: update = lr * g / (|g| + eps)
    expected = -1e-2 * g / (np.abs(g) + 1e-8)
    np.testing.assert_allclose(p.data, expected, atol=1e-12)


def test_adam_state_is_per_parameter():
    pa = T.parameter(np.zeros(2), "a")
    pb = T.parameter(np.zeros(2), "b")
    opt = Adam(1e-3)
    opt.step({"a": pa, "b": pb}, {"a": Tensor(np.ones(2)), "b": Tensor(np.zeros(2))}, ["a", "b"])
    assert np.all(pa.data != 0.0)
    np.testing.assert_array_equal(pb.data, 0.0)  # zero gradient must be a no-op


def test_make_optimizer_rejects_unknown():
    with pytest.raises(ConfigError):
        make_optimizer("rmsprop", 1e-3)


# ---------------------------------------------------------------------------
# parameter selection


def test_trainable_split_covers_all_parameters():
    bundle = init_nets(DESK, seed=0)
    stage1 = set(trainable_names(bundle, 1))
    stage2 = set(trainable_names(bundle, 2))
    assert stage1 | stage2 == set(bundle.params)
    assert not stage1 & stage2


def test_stage2_trains_only_temporal_and_audio():
    bundle = init_nets(DESK, seed=0)
    for name in trainable_names(bundle, 2):
        assert name.startswith("den.temporal") or ".audio" in name or ".au_ln" in name


def test_motion_freeze_removes_exactly_motion_params():
    bundle = init_nets(DESK, seed=0)
    free = set(trainable_names(bundle, 1, motion_frozen=False))
    frozen = set(trainable_names(bundle, 1, motion_frozen=True))
    assert free - frozen == {n for n in bundle.params if n.startswith("motion.")}


# ---------------------------------------------------------------------------
# config and environment


def test_train_config_validation_errors():
    for bad in (
        dict(stage=3),
        dict(steps=0),
        dict(batch_size=0),
        dict(learning_rate=-1.0),
        dict(optimizer="momentum"),
        dict(spatial_loss_weight=-0.1),
        dict(schedule_steps=1),
        dict(illum_mix_fraction=1.5),
        dict(motion_freeze_fraction=-0.1),
        dict(clip_length=2, context_frames=2),
        dict(arch="tower"),
    ):
        with pytest.raises(ConfigError):
            TrainConfig(**bad).validate()


def test_worker_count_env_cap(monkeypatch):
    monkeypatch.setenv("UNIAVATAR_THREADS", "1")
    assert worker_count() == 1
    monkeypatch.setenv("UNIAVATAR_THREADS", "0")
    with pytest.raises(ConfigError):
        worker_count()
    monkeypatch.setenv("UNIAVATAR_THREADS", "four")
    with pytest.raises(ConfigError):
        worker_count()
    monkeypatch.delenv("UNIAVATAR_THREADS")
    assert worker_count() >= 1


def test_config_fingerprint_tracks_fields():
    a = config_fingerprint(DESK, TrainConfig())
    b = config_fingerprint(DESK, TrainConfig(learning_rate=3e-3))
    assert a != b and len(a) == 16


# ---------------------------------------------------------------------------
# sample → conditions


def _fake_sample(motion_dropped=False, illum_dropped=False, audio_dropped=False):
    from uniavatar.dataset import TrainingSample

    rng = np.random.default_rng(3)
    frames = rng.uniform(size=(2, 64, 64, 3))
    guidance = [
        GuidanceImage(kind="motion", image=rng.uniform(size=(64, 64, 3)), coverage_mask=np.ones((64, 64), bool), dropped=motion_dropped)
        for _ in range(2)
    ]
    illum = GuidanceImage(
        kind="illumination", image=rng.uniform(size=(64, 64, 3)), coverage_mask=np.ones((64, 64), bool), dropped=illum_dropped
    )
    params = [
        FaceParams(
            pose=np.zeros(3),
            shape=np.zeros(4),
            expression=np.full(4, float(i + 1)),
            camera=np.array([1.0, 0.0, 0.0]),
            lighting=np.zeros((9, 3)),
        )
        for i in range(2)
    ]
    return TrainingSample(
        reference_image=rng.uniform(size=(64, 64, 3)),
        target_frames=frames,
        target_masks=np.ones((2, 64, 64)),
        motion_guidance=guidance,
        illumination_guidance=illum,
        audio_embedding=rng.normal(size=(2, 32)),
        audio_dropped=audio_dropped,
        background_id=0,
        identity_id="id000",
        reference_clip_id="a",
        target_clip_id="b",
        target_start=0,
        target_params=params,
        intra_source=False,
        sample_id=0,
    )


def test_build_conditions_routes_flags():
    bundle = init_nets(DESK, seed=1)
    sample = _fake_sample()
    conds = build_conditions(bundle, sample, [0, 1], use_illumination=True, use_audio=True, expression_frame=1)
    assert len(conds) == 2
    for c in conds:
        assert len(c.reference_taps) == 6
        assert c.motion_taps is not None and len(c.motion_taps) == 6
        assert c.illumination is not None
        assert c.audio is not None and c.audio.shape == (2, 32)
        np.testing.assert_array_equal(c.expression.data, 2.0)  # frame 1's embedding


def test_build_conditions_dropout_becomes_bypass():
    bundle = init_nets(DESK, seed=1)
    sample = _fake_sample(motion_dropped=True, illum_dropped=True, audio_dropped=True)
    (c,) = build_conditions(bundle, sample, [0], use_illumination=True, use_audio=True, expression_frame=0)
    assert c.motion_taps is None and c.illumination is None and c.audio is None


def test_build_conditions_respects_use_flags():
    bundle = init_nets(DESK, seed=1)
    sample = _fake_sample()
    (c,) = build_conditions(bundle, sample, [0], use_illumination=False, use_audio=False, expression_frame=None)
    assert c.illumination is None and c.audio is None and c.expression is None
    assert c.motion_taps is not None


# ---------------------------------------------------------------------------
# checkpoints and logs


def test_checkpoint_round_trip(tmp_path):
    bundle = init_nets(DESK, seed=5)
    cfg = TrainConfig(steps=7)
    path = tmp_path / "ckpt.utsr"
    save_checkpoint(path, bundle, cfg, step=7)
    loaded, header = load_checkpoint(path)
    assert header["format"] == "uniavatar-checkpoint"
    assert header["step"] == 7
    assert header["spatial_loss_weight"] == 0.1
    assert header["schedule"] == {"steps": 50, "beta_start": 0.002, "beta_end": 0.25}
    assert header["config_hash"] == config_fingerprint(DESK, cfg)
    assert set(loaded.params) == set(bundle.params)
    for name, p in bundle.params.items():
        # storage is f32, so the round trip is the exact f32 quantization
        np.testing.assert_array_equal(loaded.params[name].data, p.data.astype(np.float32).astype(np.float64))


def test_checkpoint_rejects_wrong_format(tmp_path):
    path = tmp_path / "bad.utsr"
    utsr.save_tensors(path, {"x": np.zeros(3)}, {"format": "something-else"})
    with pytest.raises(utsr.FormatError):
        load_checkpoint(path)


def test_checkpoint_rejects_missing_tensor(tmp_path):
    bundle = init_nets(DESK, seed=5)
    cfg = TrainConfig()
    arrays = {name: p.data for name, p in bundle.params.items()}
    arrays.pop("den.out.w")
    from dataclasses import asdict

    header = {
        "format": "uniavatar-checkpoint",
        "version": 1,
        "arch": asdict(DESK),
        "train": asdict(cfg),
        "stage": 1,
        "step": 0,
        "spatial_loss_weight": 0.1,
        "schedule": {"steps": 50, "beta_start": 0.002, "beta_end": 0.25},
        "config_hash": "x",
    }
    path = tmp_path / "partial.utsr"
    utsr.save_tensors(path, arrays, header)
    with pytest.raises(utsr.FormatError):
        load_checkpoint(path)


def test_loss_log_round_trip(tmp_path):
    rows = [
        {"step": 1, "loss_total": 1.25, "loss_latent": 1.0, "loss_spatial": 2.5},
        {"step": 2, "loss_total": 0.75, "loss_latent": 0.5, "loss_spatial": 2.5},
    ]
    path = tmp_path / "loss.csv"
    write_loss_log(path, rows)
    header = path.read_text().splitlines()[0]
    assert header == "step,loss_total,loss_latent,loss_spatial"
    assert read_loss_log(path) == rows


def test_smoothed_losses_oracle():
    rows = [{"loss_total": v} for v in (1.0, 2.0, 3.0, 4.0)]
    assert smoothed_losses(rows, window=2) == [1.0, 1.5, 2.5, 3.5]


# ---------------------------------------------------------------------------
# training loops


def test_stage1_is_deterministic(tiny_data, tmp_path):
    pool, bank = tiny_data
    cfg = TrainConfig(stage=1, steps=3, batch_size=1)
    a = train(pool, bank, cfg, seed=12, out_dir=tmp_path / "a")
    b = train(pool, bank, cfg, seed=12, out_dir=tmp_path / "b")
    assert a.log_rows == b.log_rows
    assert (tmp_path / "a" / "checkpoint_stage1.utsr").read_bytes() == (
        tmp_path / "b" / "checkpoint_stage1.utsr"
    ).read_bytes()
    assert (tmp_path / "a" / "loss_stage1.csv").read_text() == (tmp_path / "b" / "loss_stage1.csv").read_text()


def test_stage1_seed_changes_run(tiny_data):
    pool, bank = tiny_data
    cfg = TrainConfig(stage=1, steps=2, batch_size=1)
    a = train(pool, bank, cfg, seed=12)
    b = train(pool, bank, cfg, seed=13)
    assert a.log_rows != b.log_rows


def test_stage1_losses_are_finite_and_logged(tiny_data):
    pool, bank = tiny_data
    res = train(pool, bank, TrainConfig(stage=1, steps=3, batch_size=2), seed=5)
    assert [r["step"] for r in res.log_rows] == [1, 2, 3]
    for row in res.log_rows:
        assert math.isfinite(row["loss_total"])
        assert abs(row["loss_total"] - (row["loss_latent"] + 0.1 * row["loss_spatial"])) < 1e-12


def test_illum_mix_gates_illumination_training(tiny_data):
    pool, bank = tiny_data
    init_bundle = init_nets(DESK, seed=8)
    # mix point at the very end: the illumination encoder never sees a gradient
    never = train(pool, bank, TrainConfig(stage=1, steps=4, batch_size=1, illum_mix_fraction=1.0), seed=8)
    np.testing.assert_array_equal(never.bundle.params["illum.stem0.w"].data, init_bundle.params["illum.stem0.w"].data)
    # mix point at zero: gradients reach the encoder body once the two
    # zero-initialized convolutions (denoiser output, illumination output)
    # have moved off zero, i.e. from step 3 on
    always = train(pool, bank, TrainConfig(stage=1, steps=4, batch_size=1, illum_mix_fraction=0.0), seed=8)
    assert not np.array_equal(always.bundle.params["illum.stem0.w"].data, init_bundle.params["illum.stem0.w"].data)


def test_stage2_only_updates_temporal_and_audio(tiny_data):
    pool, bank = tiny_data
    stage1 = train(pool, bank, TrainConfig(stage=1, steps=1, batch_size=1), seed=4)
    before = {n: p.data.copy() for n, p in stage1.bundle.params.items()}
    cfg2 = TrainConfig(stage=2, steps=3, batch_size=1, clip_length=3, context_frames=1)
    res = train(pool, bank, cfg2, seed=4, start_bundle=stage1.bundle)
    moved = {n for n, p in res.bundle.params.items() if not np.array_equal(p.data, before[n])}
    allowed = set(trainable_names(res.bundle, 2))
    assert moved and moved <= allowed
    assert "den.temporal.wo" in moved
    assert any(".audio.wo" in n for n in moved)


def test_train_resumes_from_checkpoint(tiny_data, tmp_path):
    pool, bank = tiny_data
    first = train(pool, bank, TrainConfig(stage=1, steps=1, batch_size=1), seed=2, out_dir=tmp_path)
    cfg = TrainConfig(stage=2, steps=1, batch_size=1, clip_length=3, context_frames=1,
                      init_checkpoint=str(first.checkpoint_path))
    res = train(pool, bank, cfg, seed=2)
    frozen = set(res.bundle.params) - set(trainable_names(res.bundle, 2))
    for name in frozen:
        stored = first.bundle.params[name].data.astype(np.float32).astype(np.float64)
        np.testing.assert_array_equal(res.bundle.params[name].data, stored)


def test_nan_loss_aborts_with_diagnostics(tiny_data):
    pool, bank = tiny_data
    bundle = init_nets(DESK, seed=0)
    bundle.params["den.in.w"].data[0, 0, 0, 0] = float("nan")
    with pytest.raises(TrainingDivergedError, match="step 1"):
        train(pool, bank, TrainConfig(stage=1, steps=1, batch_size=1), seed=1, start_bundle=bundle)


def test_start_bundle_arch_mismatch_rejected(tiny_data):
    pool, bank = tiny_data
    from uniavatar.shapes import ArchConfig

    other = ArchConfig(name="widened", denoise_channels=(32, 64, 128), motion_channels=(32, 32, 64, 64, 128, 128), illum_channels=32)
    bundle = init_nets(other, seed=0)
    with pytest.raises(ConfigError):
        train(pool, bank, TrainConfig(stage=1, steps=1), seed=0, start_bundle=bundle)
