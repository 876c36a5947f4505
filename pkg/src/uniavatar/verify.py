"""Self-contained verification suites runnable from the command line.

Each suite re-derives a handful of the package's load-bearing invariants
from first principles (brute-force shading, gate algebra on random draws,
dataset sampling guarantees, finite-difference gradients) and reports them
as a machine-readable structure. The blur-kernel checks accept the kernel
constructor as a parameter so a corrupted kernel can be injected by tests;
the reported failure then names the broken invariant.
"""

from __future__ import annotations

import math
import tempfile
import time
from pathlib import Path

import numpy as np

from . import rng as rngmod
from . import shading
from . import tensor as T
from .dataset import (
    DatasetSpec,
    SampleConfig,
    assemble_training_sample,
    generate_synthetic_dataset,
    load_background_bank,
)
from .diffusion import (
    DiffusionSchedule,
    PerceptualProxy,
    decode_latent,
    diffusion_forward,
    loss_latent,
    loss_spatial,
    loss_total,
    reconstruct_x0,
)
from .guidance import GuidanceConfig
from .nets import (
    Conditions,
    denoise_predict,
    gate_fuse,
    illumination_encode,
    init_nets,
    motion_encode,
    prepare_image,
    reference_encode,
)
from .raster import gaussian_kernel
from .shapes import DESK
from .tensor import ConfigError, Tensor, finite_diff_check

SUITES = ("sh", "gating", "mcss", "grads", "all")
GRAD_THRESHOLD = 1e-3


def _check(name: str, passed: bool, detail: str = "") -> dict:
    return {"name": name, "passed": bool(passed), "detail": detail}


# ---------------------------------------------------------------------------
# spherical harmonics + blur kernel


def _brute_force_shade(albedo, normals, lighting):
    """Per-pixel 9-term loop, written independently of the shading module."""
    h, w, _ = normals.shape
    out = np.zeros((h, w, 3))
    c0, c1, c2, c3, c4 = 0.282095, 0.488603, 1.092548, 0.315392, 0.546274
    for i in range(h):
        for j in range(w):
            x, y, z = normals[i, j]
            basis = [c0, c1 * y, c1 * z, c1 * x, c2 * x * y, c2 * y * z,
                     c3 * (3 * z * z - 1), c2 * x * z, c4 * (x * x - y * y)]
            for ch in range(3):
                out[i, j, ch] = albedo[i, j, ch] * sum(b * lighting[k, ch] for k, b in enumerate(basis))
    return out


def suite_sh(kernel_fn=gaussian_kernel, scenes: int = 3, size: int = 32) -> list[dict]:
    checks = []
    got_z = shading.sh_basis(np.array([0.0, 0.0, 1.0]))
    want_z = np.array([0.282095, 0.0, 0.488603, 0.0, 0.0, 0.0, 0.630784, 0.0, 0.0])
    checks.append(_check("sh/closed-form-plus-z", np.array_equal(got_z, want_z), f"got {got_z.tolist()}"))
    got_x = shading.sh_basis(np.array([1.0, 0.0, 0.0]))
    want_x = np.array([0.282095, 0.0, 0.0, 0.488603, 0.0, 0.0, -0.315392, 0.0, 0.546274])
    checks.append(_check("sh/closed-form-plus-x", np.array_equal(got_x, want_x), f"got {got_x.tolist()}"))

    rng = rngmod.stream(0, "verify/sh")
    worst = 0.0
    for _ in range(scenes):
        normals = rng.normal(size=(size, size, 3))
        normals /= np.linalg.norm(normals, axis=-1, keepdims=True)
        albedo = rng.uniform(size=(size, size, 3))
        lighting = rng.normal(size=(9, 3))
        fast = shading.shade(albedo, normals, lighting)
        slow = _brute_force_shade(albedo, normals, lighting)
        worst = max(worst, float(np.abs(fast - slow).max()))
    checks.append(_check("sh/brute-force-oracle", worst < 1e-12, f"max abs deviation {worst:.3e} over {scenes} scenes"))

    radius = 15
    kernel = kernel_fn(radius)
    total = float(kernel.sum())
    checks.append(_check("blur/kernel-normalized", abs(total - 1.0) < 1e-9, f"kernel sum {total!r}"))
    sigma = radius / 3.0
    c = radius
    ratio = float(kernel[c, c + 1] / kernel[c, c])
    expected = math.exp(-1.0 / (2.0 * sigma * sigma))
    checks.append(
        _check(
            "blur/kernel-sigma-ratio",
            abs(ratio - expected) < 1e-12,
            f"adjacent-cell ratio {ratio!r}, expected {expected!r} for sigma=radius/3",
        )
    )
    checks.append(
        _check("blur/kernel-symmetric", np.array_equal(kernel, kernel[::-1, ::-1]), "180-degree rotation equality")
    )
    return checks


# ---------------------------------------------------------------------------
# gated fusion algebra


def suite_gating(draws: int = 200) -> list[dict]:
    rng = rngmod.stream(0, "verify/gating")
    half_point = math.atanh(0.5)
    zero_ok = half_ok = sat_ok = bound_ok = True
    for _ in range(draws):
        s = Tensor(rng.normal(size=(5, 7)))
        p = Tensor(rng.normal(size=(5, 7)))
        zero_ok &= np.array_equal(gate_fuse(s, Tensor(np.zeros((5, 7)))).data, np.zeros((5, 7)))
        half = gate_fuse(s, Tensor(np.full((5, 7), half_point))).data
        half_ok &= bool(np.abs(half - 0.5 * s.data).max() < 1e-12)
        sat = gate_fuse(s, Tensor(np.full((5, 7), 50.0))).data
        sat_ok &= bool(np.abs(sat - s.data).max() < 1e-12)
        bound_ok &= bool((np.abs(gate_fuse(s, p).data) <= np.abs(s.data)).all())
    return [
        _check("gate/zero-gate-annihilates", zero_ok, f"{draws} random draws"),
        _check("gate/arctanh-half-halves", half_ok, f"{draws} random draws, tolerance 1e-12"),
        _check("gate/large-gate-saturates", sat_ok, f"{draws} random draws, tolerance 1e-12"),
        _check("gate/output-bounded-by-input", bound_ok, f"{draws} random draws"),
    ]


# ---------------------------------------------------------------------------
# MCSS sampling guarantees


def suite_mcss(samples: int = 40) -> list[dict]:
    checks = []
    with tempfile.TemporaryDirectory(prefix="uniavatar-verify-") as scratch:
        root = Path(scratch) / "data"
        spec = DatasetSpec(identities=1, lightings=2, clips=1, frames=4, resolution=32, backgrounds=4, vertices=48)
        pool = generate_synthetic_dataset(spec, seed=11, out_root=root)
        bank = load_background_bank(root / "backgrounds")
        cfg = SampleConfig(resolution=32, target_length=2, guidance=GuidanceConfig(blur_radius=3))

        cross_ok = stable_ok = True
        for sid in range(samples):
            s = assemble_training_sample(pool, bank, cfg, global_seed=5, sample_id=sid)
            cross_ok &= (s.reference_clip_id != s.target_clip_id) and not s.intra_source
            background = bank.load(s.background_id)
            for frame, mask in zip(s.target_frames, s.target_masks):
                off = mask == 0
                stable_ok &= bool(np.array_equal(frame[off], background[off]))
            corner = np.ix_((0, -1), (0, -1))
            stable_ok &= bool(np.array_equal(s.reference_image[corner], background[corner]))
        checks.append(_check("mcss/cross-source-pairing", cross_ok, f"{samples} samples, 1 identity x 2 sources"))
        checks.append(_check("mcss/shared-background", stable_ok, "off-face pixels equal the sampled background"))

        a = assemble_training_sample(pool, bank, cfg, global_seed=5, sample_id=0)
        b = assemble_training_sample(pool, bank, cfg, global_seed=5, sample_id=0)
        same = (
            np.array_equal(a.reference_image, b.reference_image)
            and np.array_equal(a.target_frames, b.target_frames)
            and np.array_equal(a.audio_embedding, b.audio_embedding)
            and a.background_id == b.background_id
        )
        checks.append(_check("mcss/deterministic-per-id", same, "same (seed, sample_id) twice"))
    return checks


# ---------------------------------------------------------------------------
# gradient spot check


def suite_grads() -> list[dict]:
    bundle = init_nets(DESK, seed=17, randomize_zero_init=True)
    schedule = DiffusionSchedule(10, 0.002, 0.25)
    perceptual = PerceptualProxy(0)
    rng = rngmod.stream(17, "verify/grads")

    frame = rng.uniform(size=(64, 64, 3))
    reference = rng.uniform(size=(64, 64, 3))
    motion = rng.uniform(size=(64, 64, 3))
    illum = rng.uniform(size=(64, 64, 3))
    noise = rng.standard_normal((3, 8, 8))
    x0 = np.moveaxis(frame, -1, 0)[:, ::8, ::8] * 2.0 - 1.0
    target_image = Tensor(np.moveaxis(frame, -1, 0) * 2.0 - 1.0)
    t = 4

    def loss_fn():
        cond = Conditions(
            reference_taps=reference_encode(bundle, prepare_image(reference)),
            motion_taps=motion_encode(bundle, prepare_image(motion)),
            illumination=illumination_encode(bundle, prepare_image(illum)),
            audio=Tensor(np.linspace(-1, 1, 2 * DESK.audio_dim).reshape(2, DESK.audio_dim)),
            expression=Tensor(np.linspace(-0.5, 0.5, DESK.expr_dim)),
        )
        z_t = diffusion_forward(Tensor(x0), t, Tensor(noise), schedule)
        eps_hat = denoise_predict(bundle, z_t, t, cond)
        lat = loss_latent(Tensor(noise), eps_hat)
        predicted = decode_latent(reconstruct_x0(z_t, eps_hat, t, schedule), 8)
        return loss_total(lat, loss_spatial(predicted, target_image, t, schedule, perceptual), 0.1)

    probes = ["illum.out.b", "site0.adaln.b1", "den.out.b"]
    start = time.time()
    worst = finite_diff_check(loss_fn, [bundle.params[name] for name in probes], h=1e-5)
    elapsed = time.time() - start
    return [
        _check(
            "grads/finite-difference",
            worst < GRAD_THRESHOLD,
            f"max relative error {worst:.3e}, threshold {GRAD_THRESHOLD:.0e}, {elapsed:.1f}s over {len(probes)} probes",
        )
    ]


# ---------------------------------------------------------------------------
# entry point


def run_suite(suite: str, kernel_fn=gaussian_kernel) -> dict:
    """Run one named suite (or all); returns the JSON-ready report."""
    if suite not in SUITES:
        raise ConfigError(f"unknown suite {suite!r} (expected one of {SUITES})")
    checks: list[dict] = []
    started = time.time()
    if suite in ("sh", "all"):
        checks.extend(suite_sh(kernel_fn=kernel_fn))
    if suite in ("gating", "all"):
        checks.extend(suite_gating())
    if suite in ("mcss", "all"):
        checks.extend(suite_mcss())
    if suite in ("grads", "all"):
        checks.extend(suite_grads())
    return {
        "suite": suite,
        "passed": all(c["passed"] for c in checks),
        "elapsed_seconds": round(time.time() - started, 3),
        "checks": checks,
    }
