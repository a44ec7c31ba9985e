"""Command-line entry point.

Subcommands: ``gen-data``, ``train``, ``animate``, ``live-photo``,
``evaluate``, ``grad-check``.  Every run writes a ``run.json`` provenance
record (resolved config, seed, content hashes of inputs and outputs) into
its output directory; records contain no timestamps, so a rerun with the
same arguments in deterministic mode is byte-identical.

Exit codes: 0 success, 2 usage/validation error, 3 I/O failure.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import sys
from pathlib import Path

import numpy as np
import torch
from PIL import Image

import dataclasses

from .checkpoint import load_checkpoint
from .config import (
    ArchConfig,
    ScheduleConfig,
    TrainConfig,
    apply_overrides,
    config_from_dict,
    config_to_dict,
)
from .determinism import apply_determinism_from_env
from .errors import ParameterError, PipelineError
from .inference import DrivingBundle, animate, live_photo
from .metrics import EvalConfig, evaluate_run
from .schedules import schedule_from_config
from .synthetic import build_fused_dataset, load_clip, save_clip
from .training import grad_check, make_probe_record, train_stage1, train_stage2


def _hash_file(path: Path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            digest.update(block)
    return digest.hexdigest()


def _hash_tree(root: Path) -> str:
    digest = hashlib.sha256()
    for path in sorted(p for p in Path(root).rglob("*") if p.is_file()):
        digest.update(str(path.relative_to(root)).encode())
        digest.update(_hash_file(path).encode())
    return digest.hexdigest()


def _write_run_record(out_dir: Path, subcommand: str, config: dict, seed: int,
                      inputs: dict[str, str], outputs: dict[str, str]) -> None:
    record = {
        "subcommand": subcommand,
        "config": config,
        "seed": seed,
        "input_hashes": inputs,
        "output_hashes": outputs,
    }
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "run.json").write_text(json.dumps(record, sort_keys=True, indent=1) + "\n")


def _load_config_file(path: str) -> dict:
    text = Path(path).read_bytes()
    if path.endswith(".toml"):
        try:
            import tomllib
        except ModuleNotFoundError:
            import tomli as tomllib
        return tomllib.loads(text.decode())
    return json.loads(text)


def _load_reference(path: str) -> torch.Tensor:
    """A reference image: a PNG file, or a clip directory (frame 0)."""
    p = Path(path)
    if p.is_dir():
        return load_clip(p).frames[0]
    array = np.asarray(Image.open(p).convert("RGB")) / 255.0
    return torch.from_numpy(array.transpose(2, 0, 1) * 2.0 - 1.0)


def _save_gif(record, path: Path) -> None:
    frames = ((record.frames.numpy().transpose(0, 2, 3, 1) + 1.0) / 2.0 * 255.0).round()
    images = [Image.fromarray(f.astype(np.uint8), "RGB") for f in frames]
    images[0].save(path, save_all=True, append_images=images[1:], duration=125, loop=0)


# ----- subcommand implementations ----------------------------------------------


def _cmd_gen_data(args) -> int:
    out = Path(args.out)
    manifest = build_fused_dataset(
        args.human, args.scene, args.seed, out, frames=args.frames,
        height=args.size, width=args.size,
    )
    config = {
        "human": args.human, "scene": args.scene, "frames": args.frames, "size": args.size,
    }
    _write_run_record(
        out, "gen-data", config, args.seed, inputs={},
        outputs={"manifest": _hash_file(manifest), "tree": _hash_tree(out)},
    )
    print(str(manifest))
    return 0


def _cmd_train(args) -> int:
    data = _load_config_file(args.config) if args.config else config_to_dict(TrainConfig())
    if args.stage is not None:
        data["stage"] = args.stage
    if args.manifest:
        data["manifest"] = args.manifest
    if args.out:
        data["out_dir"] = args.out
    if args.seed is not None:
        data["seed"] = args.seed
    apply_overrides(data, args.set or [])
    cfg = config_from_dict(TrainConfig, data)
    if not cfg.manifest:
        raise ParameterError("a dataset manifest is required (--manifest or config)")
    if not cfg.out_dir:
        raise ParameterError("an output directory is required (--out or config)")

    inputs = {"manifest": _hash_file(Path(cfg.manifest))}
    if cfg.stage == 2:
        if not args.ckpt:
            raise ParameterError("stage-1 checkpoint required")
        inputs["stage1_ckpt"] = _hash_file(Path(args.ckpt))
        _, result = train_stage2(cfg, args.ckpt)
    else:
        _, result = train_stage1(cfg)

    out = Path(cfg.out_dir)
    _write_run_record(
        out, "train", config_to_dict(cfg), cfg.seed, inputs,
        outputs={"checkpoint": _hash_file(result.checkpoint_path)},
    )
    print(str(result.checkpoint_path))
    return 0


def _cmd_animate(args) -> int:
    ckpt = load_checkpoint(args.ckpt)
    ref = _load_reference(args.ref).to(ckpt[0].cfg.torch_dtype)
    driving_record = load_clip(args.driving)
    driving = DrivingBundle.from_clip(driving_record, include_face=not args.no_face)
    record = animate(ckpt, ref, driving, steps=args.steps, seed=args.seed)
    out = Path(args.out)
    record.clip_id = "generated"
    save_clip(record, out / "generated")
    if args.gif:
        _save_gif(record, out / "generated.gif")
    config = {
        "ckpt": args.ckpt, "ref": args.ref, "driving": args.driving,
        "steps": args.steps, "no_face": args.no_face,
    }
    _write_run_record(
        out, "animate", config, args.seed,
        inputs={"ckpt": _hash_file(Path(args.ckpt))},
        outputs={"clip": _hash_tree(out / "generated")},
    )
    print(str(out / "generated"))
    return 0


def _cmd_live_photo(args) -> int:
    ckpt = load_checkpoint(args.ckpt)
    ref = _load_reference(args.ref).to(ckpt[0].cfg.torch_dtype)
    record = live_photo(ckpt, ref, frames=args.frames, steps=args.steps, seed=args.seed)
    out = Path(args.out)
    record.clip_id = "generated"
    save_clip(record, out / "generated")
    if args.gif:
        _save_gif(record, out / "generated.gif")
    config = {"ckpt": args.ckpt, "ref": args.ref, "frames": args.frames, "steps": args.steps}
    _write_run_record(
        out, "live-photo", config, args.seed,
        inputs={"ckpt": _hash_file(Path(args.ckpt))},
        outputs={"clip": _hash_tree(out / "generated")},
    )
    print(str(out / "generated"))
    return 0


def _cmd_evaluate(args) -> int:
    config = EvalConfig(
        face_metrics=not args.no_face_metrics,
        detect_threshold=args.detect_threshold,
        expression_grid_step=args.expr_step,
        compute_fd=not args.skip_fd,
    )
    report = evaluate_run(args.pred, args.gt, config)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "report.csv").write_text(report.to_csv())
    (out / "report.md").write_text(report.to_markdown())
    _write_run_record(
        out, "evaluate",
        {"pred": args.pred, "gt": args.gt, **dataclasses.asdict(config)},
        0,
        inputs={"pred": _hash_tree(Path(args.pred)), "gt": _hash_tree(Path(args.gt))},
        outputs={"report": _hash_file(out / "report.csv")},
    )
    print((out / "report.csv").as_posix())
    return 0


def _cmd_grad_check(args) -> int:
    arch = ArchConfig(
        image_size=args.image_size, frames=args.frames, adapter_mode=args.mode, dtype="float64"
    )
    from .model import build_model

    model = build_model(arch, args.seed)
    record = make_probe_record(args.image_size, args.frames, args.seed)
    schedule = schedule_from_config(ScheduleConfig(), dtype=torch.float64)
    report = grad_check(
        model, record, schedule, step=args.step, sample_size=args.samples, seed=args.seed
    )
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    lines = ["group,max_rel_error"] + [f"{g},{e!r}" for g, e in sorted(report.items())]
    (out / "grad_check.csv").write_text("\n".join(lines) + "\n")
    worst = max(report.values())
    _write_run_record(
        out, "grad-check",
        {"mode": args.mode, "image_size": args.image_size, "frames": args.frames,
         "step": args.step, "samples": args.samples},
        args.seed, inputs={}, outputs={"report": _hash_file(out / "grad_check.csv")},
    )
    for group, err in sorted(report.items()):
        print(f"{group}: {err:.3e}")
    print(f"max: {worst:.3e}")
    return 0 if worst < 1e-4 else 1


# ----- parser -------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="xdyna", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a synthetic dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--human", type=int, default=4)
    p.add_argument("--scene", type=int, default=2)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--frames", type=int, default=8)
    p.add_argument("--size", type=int, default=32)
    p.set_defaults(func=_cmd_gen_data)

    p = sub.add_parser("train", help="run one training stage")
    p.add_argument("--config", help="JSON or TOML training config")
    p.add_argument("--stage", type=int, choices=(1, 2))
    p.add_argument("--manifest")
    p.add_argument("--out")
    p.add_argument("--seed", type=int)
    p.add_argument("--ckpt", help="stage-1 checkpoint (required for stage 2)")
    p.add_argument("--set", action="append", metavar="KEY=VALUE",
                   help="dot-notation config override")
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("animate", help="drive a reference image with a control sequence")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--ref", required=True, help="reference PNG or clip directory")
    p.add_argument("--driving", required=True, help="driving clip directory")
    p.add_argument("--out", required=True)
    p.add_argument("--steps", type=int, default=20)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--no-face", action="store_true", help="blank the face sequence")
    p.add_argument("--gif", action="store_true")
    p.set_defaults(func=_cmd_animate)

    p = sub.add_parser("live-photo", help="blank-control generation from a reference")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--ref", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--frames", type=int, default=8)
    p.add_argument("--steps", type=int, default=20)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--gif", action="store_true")
    p.set_defaults(func=_cmd_live_photo)

    p = sub.add_parser("evaluate", help="compare generated clips against references")
    p.add_argument("--pred", required=True)
    p.add_argument("--gt", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--skip-fd", action="store_true")
    p.add_argument("--no-face-metrics", action="store_true")
    p.add_argument("--detect-threshold", type=float, default=0.4)
    p.add_argument("--expr-step", type=float, default=0.25)
    p.set_defaults(func=_cmd_evaluate)

    p = sub.add_parser("grad-check", help="finite-difference gradient verification")
    p.add_argument("--out", required=True)
    p.add_argument("--mode", default="dynamics_adapter")
    p.add_argument("--image-size", type=int, default=8)
    p.add_argument("--frames", type=int, default=2)
    p.add_argument("--step", type=float, default=1e-5)
    p.add_argument("--samples", type=int, default=200)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=_cmd_grad_check)

    return parser


def main(argv: list[str] | None = None) -> int:
    apply_determinism_from_env()
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return args.func(args)
    except PipelineError as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
