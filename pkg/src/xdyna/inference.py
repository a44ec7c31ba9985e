"""Cross-driven animation and blank-control generation.

``animate`` takes a reference image and a driving control sequence and
produces a clip: the reference is encoded exactly once, then a
deterministic DDIM walk denoises seeded Gaussian noise under the full
conditioning.  ``live_photo`` is the blank-control variant: no pose, no
face, just the reference appearance and whatever dynamics the model
learned.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import torch

from .checkpoint import CheckpointInfo, load_checkpoint
from .controlnet import ControlMap
from .errors import ConfigurationError, ShapeError
from .metrics import frame_difference_energy
from .model import AnimationModel
from .render import compose_face_map, crop_bbox
from .sampling import ddim_sample
from .schedules import schedule_from_config
from .synthetic import ClipRecord


@dataclass
class DrivingBundle:
    """Per-frame pose and face conditioning driving a generation.

    Face patches are the raw crops from the driving clip (no identity swap);
    ``meta`` optionally carries driving ground truth (bounding boxes,
    expression parameters) for evaluation.
    """

    pose: ControlMap
    face: ControlMap
    meta: dict | None = None

    def __post_init__(self):
        if self.pose.raster.shape[0] != self.face.raster.shape[0]:
            raise ShapeError("pose and face sequences must have equal length")
        if self.pose.raster.shape[2:] != self.face.raster.shape[2:]:
            raise ShapeError("pose and face sequences must share spatial dims")

    @property
    def num_frames(self) -> int:
        return self.pose.raster.shape[0]

    @classmethod
    def blank(cls, frames: int, height: int, width: int) -> "DrivingBundle":
        return cls(
            pose=ControlMap.blank_map("pose", frames, height, width),
            face=ControlMap.blank_map("face", frames, height, width),
        )

    @classmethod
    def from_clip(cls, record: ClipRecord, include_face: bool = True) -> "DrivingBundle":
        """Build a driving bundle from a clip record.

        The face sequence holds the clip's own cropped face patches (masked
        by the stored foreground alpha), matching the inference-time
        convention of feeding driving-video crops directly.
        """
        frames, _, height, width = record.frames.shape
        if record.kind != "human" or not include_face:
            face = ControlMap.blank_map("face", frames, height, width)
        else:
            rasters = []
            for t in range(frames):
                bbox = tuple(record.meta["bboxes"][t])
                crop01 = (crop_bbox(record.frames[t], bbox) + 1.0) / 2.0
                alpha = crop_bbox(record.fg_mask[t, 0], bbox)
                rasters.append(compose_face_map(crop01 * alpha, bbox, height, width).raster[0])
            face = ControlMap(torch.stack(rasters), "face", blank=False)
        if record.kind != "human":
            pose = ControlMap.blank_map("pose", frames, height, width)
        else:
            pose = record.pose_map
        meta = {
            "bboxes": record.meta.get("bboxes"),
            "expressions": record.meta.get("expressions"),
            "source_clip": record.clip_id,
        } if record.kind == "human" else {"source_clip": record.clip_id}
        return cls(pose=pose, face=face, meta=meta)


def _resolve(ckpt) -> tuple[AnimationModel, CheckpointInfo]:
    if isinstance(ckpt, (str, Path)):
        return load_checkpoint(ckpt)
    return ckpt


def animate(
    ckpt,
    ref_image: torch.Tensor,
    driving: DrivingBundle,
    steps: int = 20,
    seed: int = 0,
) -> ClipRecord:
    """Animate a reference image with a driving control sequence.

    ``ckpt`` is a checkpoint path or a ``(model, info)`` pair.  The output
    clip is deterministic in ``seed`` and clamped to [-1, 1].
    """
    model, info = _resolve(ckpt)
    if info.stage < 1:
        raise ConfigurationError("animation requires a trained (stage >= 1) checkpoint")
    if not driving.face.blank and bool((driving.face.raster != 0).any()) and info.stage < 2:
        raise ConfigurationError(
            "face-driven animation requires a stage-2 checkpoint; "
            "blank the face sequence or finish stage-2 training"
        )
    size = model.cfg.image_size
    if ref_image.shape[-2:] != (size, size):
        raise ShapeError(f"reference resolution {tuple(ref_image.shape[-2:])} != model {size}x{size}")
    if driving.pose.raster.shape[-2:] != (size, size):
        raise ShapeError("driving resolution does not match the model")

    frames = driving.num_frames
    schedule = schedule_from_config(info.schedule, dtype=model.cfg.torch_dtype)
    ref_image = ref_image.to(model.cfg.torch_dtype)
    with torch.no_grad():
        appearance = model.encode_appearance(ref_image)

        def eps_fn(x_t, t):
            return model(x_t, t, appearance, pose_map=driving.pose, face_map=driving.face)

        video = ddim_sample(
            eps_fn,
            schedule,
            steps,
            (frames, model.cfg.in_channels, size, size),
            seed,
            dtype=model.cfg.torch_dtype,
        )
    meta = {
        "kind": "generated",
        "seed": seed,
        "steps": steps,
        "stage": info.stage,
        "frames": frames,
        "adapter_mode": model.cfg.adapter_mode,
        "driving": driving.meta or {},
    }
    return ClipRecord(
        clip_id="generated",
        kind="generated",
        frames=video,
        pose_map=driving.pose,
        face_map=driving.face,
        fg_mask=torch.zeros(frames, 1, size, size, dtype=model.cfg.torch_dtype),
        meta=meta,
    )


def live_photo(
    ckpt,
    ref_image: torch.Tensor,
    frames: int = 8,
    steps: int = 20,
    seed: int = 0,
) -> ClipRecord:
    """Blank-control generation: pure appearance-conditioned dynamics.

    The clip's metadata records the mean temporal variation of the output
    (its frame-difference energy).
    """
    model, info = _resolve(ckpt)
    size = model.cfg.image_size
    record = animate(
        (model, info), ref_image, DrivingBundle.blank(frames, size, size), steps=steps, seed=seed
    )
    record.meta["kind"] = "live_photo"
    record.meta["frame_difference_energy"] = frame_difference_energy(record.frames)
    return record
