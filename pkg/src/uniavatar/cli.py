"""Command-line surface for the whole pipeline.

Subcommands: gen-model, gen-data, render-guidance, train, infer,
shape-check, verify. Exit codes: 0 on success, 1 on runtime failure, 2 on
usage errors (argparse violations, invalid counts, inconsistent configs).
Every command is deterministic given its flags plus --seed; the one seed
feeds named sub-streams (model, data, train, infer) so commands never share
randomness. All file output lands strictly under --out. The environment
variable UNIAVATAR_THREADS caps data-assembly parallelism during training.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import fields
from pathlib import Path

import numpy as np

from . import config as configmod
from . import images
from . import rng as rngmod
from . import utsr
from . import verify as verifymod
from .dataset import DatasetSpec, build_identity_pool, generate_synthetic_dataset, load_background_bank
from .diffusion import DiffusionSchedule
from .facemodel import FaceParams, load_model, make_synthetic_model, save_model
from .guidance import render_illumination_guidance, render_motion_guidance
from .inference import InferenceInputs, generate, normalize_mode
from .shapes import PRESETS, shape_report
from .tensor import ConfigError
from .training import load_checkpoint, train


class UsageError(Exception):
    """Bad command usage detected after argparse (maps to exit code 2)."""


# ---------------------------------------------------------------------------
# commands


def cmd_gen_model(args) -> int:
    if args.vertices < 8:
        raise UsageError(f"--vertices must be at least 8, got {args.vertices}")
    if args.shape_dims < 1 or args.expr_dims < 1:
        raise UsageError("--shape-dims and --expr-dims must be at least 1")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    model = make_synthetic_model(
        args.vertices,
        n_shape=args.shape_dims,
        n_expression=args.expr_dims,
        seed=rngmod.derive_seed(args.seed, "model"),
    )
    path = out / "model.ufm"
    save_model(path, model)
    print(f"wrote {path} ({model.template.shape[0]} vertices, {model.triangles.shape[0]} triangles)")
    return 0


def _load_dataset_spec(path) -> DatasetSpec:
    with open(path, encoding="utf-8") as fh:
        raw = json.load(fh)
    if not isinstance(raw, dict):
        raise UsageError(f"dataset spec {path} must hold a JSON object")
    known = {f.name for f in fields(DatasetSpec)}
    unknown = sorted(set(raw) - known)
    if unknown:
        raise UsageError(f"unknown dataset spec keys: {unknown} (expected a subset of {sorted(known)})")
    return DatasetSpec(**raw)


def cmd_gen_data(args) -> int:
    spec = _load_dataset_spec(args.spec) if args.spec else DatasetSpec()
    out = Path(args.out)
    pool = generate_synthetic_dataset(spec, rngmod.derive_seed(args.seed, "data"), out)
    print(f"wrote dataset under {out}: {len(pool.identities)} identities, {pool.clip_count()} clips")
    return 0


def _load_params_file(path) -> list[FaceParams]:
    rows = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if line:
                rows.append(FaceParams.from_dict(json.loads(line)))
    if not rows:
        raise UsageError(f"params file {path} holds no parameter rows")
    return rows


def cmd_render_guidance(args) -> int:
    run = configmod.load_config(args.config)
    model = load_model(args.model)
    params = _load_params_file(args.params)
    gcfg = run.guidance_config()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    manifest_path = out / "manifest.jsonl"
    with open(manifest_path, "w", encoding="utf-8") as manifest:
        for i, p in enumerate(params):
            if args.kind == "motion":
                g = render_motion_guidance(model, p, gcfg, run.resolution)
            else:
                g = render_illumination_guidance(model, p.lighting, p.camera, gcfg, run.resolution)
            image_file = f"guidance_{args.kind}_{i:05d}.png"
            mask_file = f"mask_{args.kind}_{i:05d}.png"
            images.save_png(out / image_file, g.image)
            images.save_mask(out / mask_file, g.coverage_mask.astype(np.float64))
            manifest.write(
                json.dumps(
                    {
                        "sample_id": i,
                        "kind": args.kind,
                        "params_file": str(args.params),
                        "image_file": image_file,
                        "mask_file": mask_file,
                        "dropped": g.dropped,
                    },
                    sort_keys=True,
                )
                + "\n"
            )
    print(f"wrote {len(params)} {args.kind} guidance images and {manifest_path}")
    return 0


def cmd_train(args) -> int:
    run = configmod.load_config(args.config)
    data = args.data or run.data
    if data is None:
        raise UsageError("no dataset root: pass --data or set 'data' in the config file")
    out = args.out or run.out
    if out is None:
        raise UsageError("no output directory: pass --out or set 'out' in the config file")
    seed = args.seed if args.seed is not None else run.seed

    pool = build_identity_pool(data)
    bank = load_background_bank(Path(data) / "backgrounds")
    tc = run.to_train_config(args.stage)
    if args.stage == 2 and tc.init_checkpoint is None:
        candidate = Path(out) / "checkpoint_stage1.utsr"
        if candidate.exists():
            tc.init_checkpoint = str(candidate)
    result = train(pool, bank, tc, rngmod.derive_seed(seed, "train"), out_dir=out)
    final = result.log_rows[-1]
    print(f"wrote {result.checkpoint_path} and {result.log_path}")
    print(f"step {final['step']}: loss_total {final['loss_total']:.6f}")
    return 0


def cmd_infer(args) -> int:
    bundle, header = load_checkpoint(args.ckpt)
    sched_cfg = header.get("schedule", {})
    schedule = DiffusionSchedule(
        sched_cfg.get("steps", 50), sched_cfg.get("beta_start", 0.002), sched_cfg.get("beta_end", 0.25)
    )
    train_cfg = header.get("train", {})
    window = int(train_cfg.get("clip_length", 4))
    context = int(train_cfg.get("context_frames", 2))

    inputs_dir = Path(args.inputs)
    reference_path = inputs_dir / "reference.png"
    audio_path = inputs_dir / "audio.utsr"
    for required in (reference_path, audio_path):
        if not required.exists():
            raise UsageError(f"missing required input {required}")
    reference = images.load_png(reference_path)
    _, audio_arrays = utsr.load_tensors(audio_path)
    if "audio" not in audio_arrays:
        raise UsageError(f"{audio_path} holds no tensor named 'audio'")
    audio = audio_arrays["audio"]

    mode = normalize_mode(args.mode)
    model = params = lighting = None
    if mode != "audio":
        model_path = inputs_dir / "model.ufm"
        params_path = inputs_dir / "params.jsonl"
        for required in (model_path, params_path):
            if not required.exists():
                raise UsageError(f"mode {args.mode!r} needs {required.name} in --inputs")
        model = load_model(model_path)
        params = _load_params_file(params_path)
    lighting_path = inputs_dir / "lighting.utsr"
    if lighting_path.exists():
        _, light_arrays = utsr.load_tensors(lighting_path)
        if "lighting" not in light_arrays:
            raise UsageError(f"{lighting_path} holds no tensor named 'lighting'")
        lighting = light_arrays["lighting"]

    frames = generate(
        bundle,
        mode,
        InferenceInputs(reference, audio, model=model, params=params, lighting=lighting),
        seed=rngmod.derive_seed(args.seed, "infer"),
        schedule=schedule,
        window=window,
        context=context,
    )
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for i, frame in enumerate(frames):
        images.save_png(out / f"frame_{i:05d}.png", frame)
    print(f"wrote {len(frames)} frames under {out}")
    return 0


def cmd_shape_check(args) -> int:
    print(shape_report(PRESETS[args.preset]))
    return 0


def cmd_verify(args) -> int:
    report = verifymod.run_suite(args.suite)
    print(json.dumps(report, indent=2, sort_keys=True))
    return 0 if report["passed"] else 1


# ---------------------------------------------------------------------------
# parser


class _HelpFormatter(argparse.ArgumentDefaultsHelpFormatter, argparse.RawDescriptionHelpFormatter):
    """Show defaults for every flag and keep epilog text verbatim."""


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="uniavatar",
        description=__doc__,
        formatter_class=argparse.RawDescriptionHelpFormatter,
    )
    sub = parser.add_subparsers(dest="command")

    def add(name, func, help_text, epilog=None):
        p = sub.add_parser(
            name,
            help=help_text,
            description=help_text,
            epilog=epilog,
            formatter_class=_HelpFormatter,
        )
        p.set_defaults(func=func)
        return p

    p = add("gen-model", cmd_gen_model, "Generate a synthetic face model file (model.ufm).")
    p.add_argument("--vertices", type=int, default=96, help="vertex budget (minimum 8)")
    p.add_argument("--shape-dims", type=int, default=4, help="identity shape basis size")
    p.add_argument("--expr-dims", type=int, default=4, help="expression basis size")
    p.add_argument("--seed", type=int, default=0, help="master seed (sub-stream 'model')")
    p.add_argument("--out", required=True, help="output directory")

    p = add("gen-data", cmd_gen_data, "Generate a synthetic multi-lighting dataset.")
    p.add_argument("--spec", default=None, help="JSON file with dataset spec fields (defaults apply)")
    p.add_argument("--seed", type=int, default=0, help="master seed (sub-stream 'data')")
    p.add_argument("--out", required=True, help="dataset root directory")

    p = add("render-guidance", cmd_render_guidance, "Render motion or illumination guidance images.")
    p.add_argument("--model", required=True, help="face model file (.ufm)")
    p.add_argument("--params", required=True, help="JSONL file, one face parameter set per line")
    p.add_argument("--kind", required=True, choices=("motion", "illum"), help="guidance kind")
    p.add_argument("--config", default=None, help="run config JSON file")
    p.add_argument("--out", required=True, help="output directory")

    p = add(
        "train",
        cmd_train,
        "Train stage 1 (per-frame) or stage 2 (clips) on a dataset.",
        epilog="Config file fields and defaults:\n" + configmod.describe_fields(),
    )
    p.add_argument("--stage", type=int, required=True, choices=(1, 2), help="training stage")
    p.add_argument("--data", default=None, help="dataset root (default: 'data' config field)")
    p.add_argument("--config", default=None, help="run config JSON file")
    p.add_argument("--seed", type=int, default=None, help="master seed (sub-stream 'train'; default: config)")
    p.add_argument("--out", default=None, help="output directory (default: 'out' config field)")

    p = add("infer", cmd_infer, "Generate frames from a checkpoint in one of three modes.")
    p.add_argument("--mode", required=True, choices=("audio", "motion", "illum"), help="conditioning mode")
    p.add_argument("--ckpt", required=True, help="checkpoint file (.utsr)")
    p.add_argument(
        "--inputs",
        required=True,
        help="directory with reference.png, audio.utsr, and for motion/illum modes model.ufm, "
        "params.jsonl, optionally lighting.utsr",
    )
    p.add_argument("--seed", type=int, default=0, help="master seed (sub-stream 'infer')")
    p.add_argument("--out", required=True, help="output directory for frame_*.png")

    p = add("shape-check", cmd_shape_check, "Print the symbolic feature-shape table for a preset.")
    p.add_argument("--preset", required=True, choices=tuple(sorted(PRESETS)), help="architecture preset")

    p = add("verify", cmd_verify, "Run a property suite and print a JSON report.")
    p.add_argument("--suite", default="all", choices=verifymod.SUITES, help="which suite to run")

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if not hasattr(args, "func"):
        parser.print_help()
        return 2
    try:
        return args.func(args)
    except (UsageError, ConfigError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except BrokenPipeError:
        raise
    except Exception as e:  # runtime failure: bad files, diverged training, IO
        print(f"failure: {type(e).__name__}: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
