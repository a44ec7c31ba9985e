"""Two-stage training with mixed human/scene data, plus gradient checks.

Stage 1 trains the appearance mechanism, the pose control branch, the
temporal layers, and the conditioning token on the full (possibly mixed)
manifest; the backbone and the face branch stay frozen.  Stage 2 freezes
everything trained so far and trains the face control branch on human clips
only.  Frozen groups are hash-verified before and after every run.

Scene clips train with blank control maps, which is what teaches the model
background dynamics independent of the control signals.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass
from pathlib import Path

import torch

from .checkpoint import load_checkpoint, save_checkpoint
from .config import TrainConfig
from .determinism import child_seed, numpy_rng, torch_generator
from .errors import ConfigurationError, NumericalError, ParameterError
from .model import AnimationModel, build_model
from .schedules import NoiseSchedule, add_noise, schedule_from_config
from .synthetic import ClipRecord, load_manifest_clips


def make_probe_record(
    image_size: int, frames: int, seed: int, dtype: torch.dtype = torch.float64
) -> ClipRecord:
    """Small random clip record used for gradient checks.

    Control rasters are nonzero so every conditioning branch receives
    signal; content is otherwise arbitrary.
    """
    from .controlnet import ControlMap

    def uniform(tag, *shape, lo=0.0, hi=1.0):
        gen = torch_generator(seed, "probe-record", tag)
        return torch.rand(*shape, generator=gen, dtype=dtype) * (hi - lo) + lo

    return ClipRecord(
        clip_id="probe",
        kind="human",
        frames=uniform("frames", frames, 3, image_size, image_size, lo=-1.0, hi=1.0),
        pose_map=ControlMap(uniform("pose", frames, 3, image_size, image_size), "pose"),
        face_map=ControlMap(uniform("face", frames, 3, image_size, image_size), "face"),
        fg_mask=torch.ones(frames, 1, image_size, image_size, dtype=dtype),
        meta={"kind": "probe", "frames": frames},
    )


def epsilon_mse(pred: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """Mean squared error between predicted and true noise."""
    if pred.numel() == 0:
        raise ParameterError("empty batch")
    if pred.shape != target.shape:
        raise ParameterError(f"shape mismatch {tuple(pred.shape)} vs {tuple(target.shape)}")
    return torch.mean((pred - target) ** 2)


def stage_trainable_groups(stage: int, adapter_group: str) -> tuple[str, ...]:
    if stage == 1:
        groups = ["control_pose", "temporal", "text_cond"]
        if adapter_group:
            groups.insert(0, adapter_group)
        return tuple(groups)
    return ("control_face",)


def _step_loss(
    model: AnimationModel,
    record: ClipRecord,
    schedule: NoiseSchedule,
    t: int,
    eps: torch.Tensor,
    ref_frame: int,
) -> torch.Tensor:
    frames = record.frames.to(model.cfg.torch_dtype)
    appearance = model.encode_appearance(frames[ref_frame])
    x_t = add_noise(frames, eps, t, schedule)
    pred = model(x_t, t, appearance, pose_map=record.pose_map, face_map=record.face_map)
    return epsilon_mse(pred, eps)


@torch.no_grad()
def evaluate_epsilon_loss(
    model: AnimationModel,
    records: list[ClipRecord],
    schedule: NoiseSchedule,
    seed: int,
    timesteps_per_clip: int = 4,
) -> float:
    """Deterministic probe loss over a fixed grid of clips and noise levels."""
    total, count = 0.0, 0
    t_grid = [
        int(round(f * (schedule.timesteps - 1)))
        for f in torch.linspace(0.1, 0.9, timesteps_per_clip).tolist()
    ]
    for ci, record in enumerate(records):
        for t in t_grid:
            eps = torch.randn(
                record.frames.shape,
                generator=torch_generator(seed, "probe", ci, t),
                dtype=model.cfg.torch_dtype,
            )
            total += float(_step_loss(model, record, schedule, t, eps, ref_frame=0))
            count += 1
    return total / count


@dataclass
class TrainResult:
    checkpoint_path: Path
    loss_curve: list[tuple[int, float]]
    initial_probe_loss: float
    final_probe_loss: float
    frozen_hashes_before: dict[str, str]
    frozen_hashes_after: dict[str, str]


def _loss_curve_csv(curve: list[tuple[int, float]]) -> str:
    lines = ["step,loss"]
    lines += [f"{step},{loss!r}" for step, loss in curve]
    return "\n".join(lines) + "\n"


def _run_training(
    model: AnimationModel,
    cfg: TrainConfig,
    records: list[ClipRecord],
    frozen_groups: list[str],
    stage: int,
) -> TrainResult:
    schedule = schedule_from_config(cfg.schedule, dtype=model.cfg.torch_dtype)
    hashes_before = {g: model.group_hash(g) for g in frozen_groups}
    probe_before = evaluate_epsilon_loss(model, records, schedule, cfg.seed)

    trainable = [p for p in model.parameters() if p.requires_grad]
    total_steps = cfg.max_steps if cfg.max_steps is not None else cfg.epochs * len(records)
    if not trainable and total_steps > 0:
        raise ConfigurationError("no trainable parameters for a nonzero-step run")
    optimizer = torch.optim.AdamW(trainable, lr=cfg.learning_rate) if trainable else None
    rng_ref = numpy_rng(cfg.seed, "ref-frame")
    curve: list[tuple[int, float]] = []
    step = 0
    epoch = 0
    while step < total_steps:
        order = numpy_rng(cfg.seed, "order", epoch).permutation(len(records))
        for idx in order:
            if step >= total_steps:
                break
            record = records[int(idx)]
            t = int(numpy_rng(cfg.seed, "t", step).integers(schedule.timesteps))
            eps = torch.randn(
                record.frames.shape,
                generator=torch_generator(cfg.seed, "noise", step),
                dtype=model.cfg.torch_dtype,
            )
            if cfg.ref_frame_policy == "first":
                ref_frame = 0
            else:
                ref_frame = int(rng_ref.integers(record.num_frames))
            loss = _step_loss(model, record, schedule, t, eps, ref_frame)
            if not torch.isfinite(loss):
                raise NumericalError(f"non-finite loss at step {step}")
            optimizer.zero_grad(set_to_none=True)
            loss.backward()
            optimizer.step()
            curve.append((step, float(loss.detach())))
            step += 1
        epoch += 1

    probe_after = evaluate_epsilon_loss(model, records, schedule, cfg.seed)
    hashes_after = {g: model.group_hash(g) for g in frozen_groups}
    changed = [g for g in frozen_groups if hashes_before[g] != hashes_after[g]]
    if changed:
        raise NumericalError(f"frozen groups changed during training: {changed}")

    out_dir = Path(cfg.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "loss_curve.csv").write_text(_loss_curve_csv(curve))
    ckpt_path = save_checkpoint(
        model,
        cfg.schedule,
        stage,
        cfg.seed,
        out_dir / f"stage{stage}.ckpt",
        extra={
            "learning_rate": cfg.learning_rate,
            "steps": total_steps,
            "ref_frame_policy": cfg.ref_frame_policy,
            "initial_probe_loss": probe_before,
            "final_probe_loss": probe_after,
        },
    )
    return TrainResult(
        checkpoint_path=ckpt_path,
        loss_curve=curve,
        initial_probe_loss=probe_before,
        final_probe_loss=probe_after,
        frozen_hashes_before=hashes_before,
        frozen_hashes_after=hashes_after,
    )


def _load_records(manifest: str | Path, image_size: int) -> list[ClipRecord]:
    records = load_manifest_clips(manifest)
    for record in records:
        if record.frames.shape[-1] != image_size:
            raise ConfigurationError(
                f"clip {record.clip_id} resolution {record.frames.shape[-1]} "
                f"!= model resolution {image_size}"
            )
    return records


def train_stage1(cfg: TrainConfig) -> tuple[AnimationModel, TrainResult]:
    """First stage: appearance mechanism + pose branch + temporal layers.

    The backbone must be frozen (a configuration with backbone gradients is
    rejected) and the face branch stays at its zero initialization.
    """
    if cfg.stage != 1:
        raise ConfigurationError("train_stage1 requires cfg.stage == 1")
    records = _load_records(cfg.manifest, cfg.arch.image_size)
    model = build_model(cfg.arch, cfg.seed)
    groups = (
        cfg.trainable_groups
        if cfg.trainable_groups is not None
        else stage_trainable_groups(1, model.adapter_group)
    )
    model.set_trainable(groups)
    if any(p.requires_grad for _, p in model.group_parameters("backbone")):
        raise ConfigurationError("unfrozen backbone detected; stage 1 trains residual modules only")
    if any(p.requires_grad for _, p in model.group_parameters("control_face")):
        raise ConfigurationError("face control branch must stay frozen in stage 1")
    frozen = [g for g in model.group_names() if g not in groups]
    return model, _run_training(model, cfg, records, frozen, stage=1)


def train_stage2(cfg: TrainConfig, stage1_ckpt: str | Path) -> tuple[AnimationModel, TrainResult]:
    """Second stage: face control branch only, on human clips only.

    The architecture travels with the checkpoint; ``cfg.arch`` is ignored.
    """
    if cfg.stage != 2:
        raise ConfigurationError("train_stage2 requires cfg.stage == 2")
    model, info = load_checkpoint(stage1_ckpt)
    if info.stage < 1:
        raise ConfigurationError("stage-1 checkpoint required")
    records = _load_records(cfg.manifest, model.cfg.image_size)
    scene = [r.clip_id for r in records if r.kind != "human"]
    if scene:
        raise ConfigurationError(f"stage-2 manifest must contain human clips only, found {scene}")
    groups = (
        cfg.trainable_groups
        if cfg.trainable_groups is not None
        else stage_trainable_groups(2, model.adapter_group)
    )
    model.set_trainable(groups)
    non_face = [g for g in groups if g != "control_face"]
    if non_face:
        raise ConfigurationError(f"stage 2 may only train control_face, got {groups}")
    frozen = [g for g in model.group_names() if g not in groups]
    return model, _run_training(model, cfg, records, frozen, stage=2)


# ----- gradient verification --------------------------------------------------


def finite_difference_max_rel_error(
    loss_fn,
    params: list[torch.Tensor],
    *,
    step: float = 1e-5,
    sample_size: int = 200,
    seed: int = 0,
) -> float:
    """Compare autograd gradients of ``loss_fn()`` against central differences.

    A random subsample of at most ``sample_size`` coordinates across the
    given parameters is probed.  The per-coordinate relative error is
    |g - g_fd| / max(|g|, |g_fd|, 1e-6); the maximum over the subsample is
    returned.  Raises NumericalError on non-finite gradients.
    """
    loss = loss_fn()
    grads = list(torch.autograd.grad(loss, params, allow_unused=True))
    for i, g in enumerate(grads):
        if g is None:
            # parameter provably outside the loss graph (e.g. the unused
            # decoder tail of a reference encoder); finite differences will
            # confirm a zero gradient
            grads[i] = torch.zeros_like(params[i])
        elif not torch.isfinite(g).all():
            raise NumericalError("non-finite analytic gradient")

    sizes = [p.numel() for p in params]
    total = sum(sizes)
    rng = numpy_rng(seed, "fd-coords")
    count = min(sample_size, total)
    coords = rng.choice(total, size=count, replace=False)

    max_rel = 0.0
    with torch.no_grad():
        for flat_index in sorted(int(c) for c in coords):
            pi = 0
            while flat_index >= sizes[pi]:
                flat_index -= sizes[pi]
                pi += 1
            param = params[pi]
            original = param.view(-1)[flat_index].item()
            param.view(-1)[flat_index] = original + step
            loss_plus = float(loss_fn())
            param.view(-1)[flat_index] = original - step
            loss_minus = float(loss_fn())
            param.view(-1)[flat_index] = original
            fd = (loss_plus - loss_minus) / (2.0 * step)
            analytic = float(grads[pi].view(-1)[flat_index])
            if not (torch.isfinite(torch.tensor(fd)) and torch.isfinite(torch.tensor(analytic))):
                raise NumericalError("non-finite finite-difference probe")
            rel = abs(analytic - fd) / max(abs(analytic), abs(fd), 1e-6)
            max_rel = max(max_rel, rel)
    return max_rel


def grad_check(
    model: AnimationModel,
    record: ClipRecord,
    schedule: NoiseSchedule,
    *,
    groups: list[str] | None = None,
    step: float = 1e-5,
    sample_size: int = 200,
    seed: int = 0,
    perturb: float = 0.05,
) -> dict[str, float]:
    """Finite-difference verification of every trainable group's gradients.

    Works on a perturbed copy of the model (a freshly initialized model has
    exactly-zero output projections, which would leave upstream parameters
    without gradient signal).  The model passed in is not modified.
    Requires a double-precision model.
    """
    if model.cfg.torch_dtype != torch.float64:
        raise ConfigurationError("grad_check requires a float64 model")
    model = copy.deepcopy(model)
    if groups is None:
        groups = [g for g in model.group_names() if g != "backbone"]
    for g in groups:
        if g not in model.group_names():
            raise ConfigurationError(f"unknown parameter group {g!r}")
    gen = torch_generator(seed, "grad-perturb")
    with torch.no_grad():
        for group in groups:
            for _, p in model.group_parameters(group):
                p.add_(torch.randn(p.shape, generator=gen, dtype=p.dtype) * perturb)

    t = schedule.timesteps // 2
    eps = torch.randn(
        record.frames.shape,
        generator=torch_generator(seed, "grad-noise"),
        dtype=model.cfg.torch_dtype,
    )

    def loss_fn():
        return _step_loss(model, record, schedule, t, eps, ref_frame=0)

    report: dict[str, float] = {}
    for group in groups:
        model.set_trainable([group])
        params = [p for _, p in model.group_parameters(group)]
        try:
            report[group] = finite_difference_max_rel_error(
                loss_fn, params, step=step, sample_size=sample_size, seed=child_seed(seed, group)
            )
        except NumericalError as exc:
            raise NumericalError(f"group {group!r}: {exc}") from exc
    return report
