"""Procedural clip generation: dynamic textures and articulated sprites.

Scene clips are pure dynamic textures (drifting noise, traveling waves,
scrolling gradients, flicker fields) with blank control maps and empty
foreground masks.  Human clips composite a five-limb sprite with a
parametric face over a static or dynamic background; their pose maps are
rasterized from the skeleton, their face maps carry identity-swapped,
expression-preserved patches, and their masks are exactly the sprite alpha.

Everything is reproducible from seeds, and frames are quantized to the
8-bit PNG grid at generation time so that saving and loading a clip is
lossless.
"""

from __future__ import annotations

import dataclasses
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from .controlnet import ControlMap
from .determinism import child_seed, numpy_rng
from .errors import ParameterError
from .render import (
    EXPRESSION_RANGES,
    FACE_PATCH_SIZE,
    IDENTITY_RANGES,
    FaceRenderParams,
    SkeletonPose,
    compose_face_map,
    render_face_patch,
    render_pose_map,
    synthesize_cross_identity_face,
)

TEXTURE_KINDS = ("drifting_noise", "traveling_wave", "scrolling_gradient", "flicker_field")


def quantize_unit(x: np.ndarray) -> np.ndarray:
    """Snap values in [0, 1] to the 256-level grid used by PNG storage."""
    return np.round(np.clip(x, 0.0, 1.0) * 255.0) / 255.0


def quantize_signed(x: np.ndarray) -> np.ndarray:
    """Snap values in [-1, 1] to the PNG grid."""
    return quantize_unit((x + 1.0) / 2.0) * 2.0 - 1.0


def _to_uint8_unit(x: np.ndarray) -> np.ndarray:
    return np.round(np.clip(x, 0.0, 1.0) * 255.0).astype(np.uint8)


@dataclass(frozen=True)
class SceneSpec:
    """Dynamic-texture parameters."""

    texture_kind: str
    speed: float               # pixels/frame for movers, cycles/clip for flicker
    direction: float           # radians; movers snap to their allowed axes
    frequency: int             # spatial cycles across the frame (wave)
    palette_seed: int

    def __post_init__(self):
        if self.texture_kind not in TEXTURE_KINDS:
            raise ParameterError(f"unknown texture kind {self.texture_kind!r}")
        if self.speed <= 0:
            raise ParameterError("speed must be > 0")

    @classmethod
    def sample(cls, rng: np.random.Generator) -> "SceneSpec":
        kind = TEXTURE_KINDS[int(rng.integers(len(TEXTURE_KINDS)))]
        if kind == "flicker_field":
            speed = float(rng.uniform(1.0, 2.0))
            direction = 0.0
        else:
            speed = float(rng.uniform(1.0, 3.0))
            if kind == "drifting_noise":
                direction = float(rng.integers(8)) * math.pi / 4.0
            else:
                direction = float(rng.integers(4)) * math.pi / 2.0
        return cls(
            texture_kind=kind,
            speed=speed,
            direction=direction,
            frequency=int(rng.integers(1, 4)),
            palette_seed=int(rng.integers(2**31)),
        )


def _palette(seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Two colors in [-1, 1]^3 with separation >= 1."""
    rng = numpy_rng(seed, "palette")
    while True:
        c0 = rng.uniform(-1.0, 1.0, 3)
        c1 = rng.uniform(-1.0, 1.0, 3)
        if np.linalg.norm(c1 - c0) >= 1.0:
            return c0, c1


def _smooth_periodic_field(rng: np.random.Generator, height: int, width: int, kmax: int = 4) -> np.ndarray:
    """Random band-limited periodic field, min-max normalized to [0, 1]."""
    noise = rng.normal(0.0, 1.0, (height, width))
    spec = np.fft.fft2(noise)
    ky = np.minimum(np.arange(height), height - np.arange(height))[:, None]
    kx = np.minimum(np.arange(width), width - np.arange(width))[None, :]
    spec[(ky > kmax) | (kx > kmax)] = 0.0
    fieldv = np.real(np.fft.ifft2(spec))
    lo, hi = fieldv.min(), fieldv.max()
    return (fieldv - lo) / (hi - lo) if hi > lo else np.zeros_like(fieldv)


def _colorize(values: np.ndarray, c0: np.ndarray, c1: np.ndarray) -> np.ndarray:
    """Map scalar fields [..., H, W] in [0,1] to colors [..., 3, H, W]."""
    return c0[:, None, None] + values[..., None, :, :] * (c1 - c0)[:, None, None]


def render_texture(spec: SceneSpec, seed: int, frames: int, height: int, width: int) -> np.ndarray:
    """Dynamic texture frames [F, 3, H, W] in [-1, 1] (unquantized)."""
    rng = numpy_rng(seed, "texture", spec.texture_kind)
    c0, c1 = _palette(spec.palette_seed)
    kind = spec.texture_kind

    if kind == "traveling_wave":
        horizontal = abs(math.cos(spec.direction)) > 0.5
        axis = 2 if horizontal else 1  # frame axes: [3, H, W]
        sign = 1 if (math.cos(spec.direction) + math.sin(spec.direction)) >= 0 else -1
        span = width if horizontal else height
        coords = np.arange(span) * 2.0 * math.pi * spec.frequency / span
        phase = float(rng.uniform(0.0, 2.0 * math.pi))
        line = 0.5 + 0.5 * np.sin(coords + phase)
        base = np.tile(line[None, :], (height, 1)) if horizontal else np.tile(line[:, None], (1, width))
        frame0 = _colorize(base, c0, c1)
        return np.stack(
            [np.roll(frame0, sign * round(spec.speed * t), axis=axis) for t in range(frames)]
        )

    if kind == "drifting_noise":
        base = _smooth_periodic_field(rng, height, width)
        frame0 = _colorize(base, c0, c1)
        vx = spec.speed * math.cos(spec.direction)
        vy = spec.speed * math.sin(spec.direction)
        return np.stack(
            [np.roll(frame0, (round(vy * t), round(vx * t)), axis=(1, 2)) for t in range(frames)]
        )

    if kind == "scrolling_gradient":
        horizontal = abs(math.cos(spec.direction)) > 0.5
        sign = 1 if (math.cos(spec.direction) + math.sin(spec.direction)) >= 0 else -1
        span = width if horizontal else height
        coords = np.arange(span, dtype=np.float64)
        out = np.empty((frames, 3, height, width))
        for t in range(frames):
            ramp = np.mod((coords + sign * spec.speed * t) / span, 1.0)
            base = np.tile(ramp[None, :], (height, 1)) if horizontal else np.tile(ramp[:, None], (1, width))
            out[t] = _colorize(base, c0, c1)
        return out

    # flicker_field
    pattern = _smooth_periodic_field(rng, height, width)
    phase_field = 2.0 * math.pi * _smooth_periodic_field(rng, height, width)
    out = np.empty((frames, 3, height, width))
    for t in range(frames):
        bright = 0.55 + 0.45 * np.sin(2.0 * math.pi * spec.speed * t / frames + phase_field)
        out[t] = _colorize(np.clip(pattern * bright, 0.0, 1.0), c0, c1)
    return out


def _static_background(palette_seed: int, height: int, width: int) -> np.ndarray:
    """Vertical two-color gradient, [3, H, W] in [-1, 1]."""
    c0, c1 = _palette(palette_seed)
    ramp = np.linspace(0.0, 1.0, height)
    base = np.tile(ramp[:, None], (1, width))
    return _colorize(base, c0, c1)


@dataclass
class HumanClipSpec:
    """Sprite motion, face trajectory, and background for one human clip.

    Identity parameters are constant across frames; expression and skeleton
    parameters vary per frame.
    """

    poses: list[SkeletonPose]
    faces: list[FaceRenderParams]          # identity fixed, expression varying
    background: SceneSpec | None           # None = static gradient
    bg_palette_seed: int
    body_color: tuple[float, float, float]

    def __post_init__(self):
        if len(self.poses) != len(self.faces):
            raise ParameterError("pose and face trajectories must have equal length")
        idents = {tuple(np.round(f.identity(), 12)) for f in self.faces}
        if len(idents) != 1:
            raise ParameterError("identity parameters must be constant across frames")

    @classmethod
    def sample(cls, rng: np.random.Generator, frames: int, height: int, width: int) -> "HumanClipSpec":
        identity = [float(rng.uniform(lo, hi)) for lo, hi in IDENTITY_RANGES]
        hip_x = float(rng.uniform(11.0, width - 11.0))
        hip_y = float(rng.uniform(height * 0.58, height * 0.70))
        walk = float(rng.uniform(-1.0, 1.0))
        sway_amp = float(rng.uniform(0.05, 0.18))
        sway_phase = float(rng.uniform(0.0, 2.0 * math.pi))
        arm_base = (-0.55, 0.55)
        leg_base = (-0.3, 0.3)
        arm_amp = float(rng.uniform(0.3, 0.8))
        leg_amp = float(rng.uniform(0.2, 0.5))
        gait_phase = float(rng.uniform(0.0, 2.0 * math.pi))
        expr_freq = rng.uniform(0.5, 1.5, 3)
        expr_phase = rng.uniform(0.0, 2.0 * math.pi, 3)

        poses, faces = [], []
        for t in range(frames):
            cycle = 2.0 * math.pi * t / frames
            pose = SkeletonPose(
                hip=(hip_x + walk * t, hip_y),
                torso_angle=sway_amp * math.sin(cycle + sway_phase),
                arm_angles=(
                    arm_base[0] - arm_amp * math.sin(cycle + gait_phase),
                    arm_base[1] + arm_amp * math.sin(cycle + gait_phase),
                ),
                leg_angles=(
                    leg_base[0] + leg_amp * math.sin(cycle + gait_phase),
                    leg_base[1] - leg_amp * math.sin(cycle + gait_phase),
                ),
            )
            waves = 0.5 + 0.5 * np.sin(expr_freq * cycle + expr_phase)
            expr = [lo + (hi - lo) * waves[k] for k, (lo, hi) in enumerate(EXPRESSION_RANGES)]
            faces.append(
                FaceRenderParams(
                    skin_tone=identity[0],
                    face_shape=identity[1],
                    eye_spacing=identity[2],
                    mouth_open=float(expr[0]),
                    brow_angle=float(expr[1]),
                    eye_open=float(expr[2]),
                    bbox=pose.face_bbox(height, width),
                )
            )
            poses.append(pose)
        background = SceneSpec.sample(rng) if rng.uniform() < 0.5 else None
        return cls(
            poses=poses,
            faces=faces,
            background=background,
            bg_palette_seed=int(rng.integers(2**31)),
            body_color=tuple(float(v) for v in rng.uniform(-1.0, 1.0, 3)),
        )


@dataclass
class ClipRecord:
    """One synthetic clip with frames, control maps, mask, and metadata."""

    clip_id: str
    kind: str                  # "human" | "scene"
    frames: torch.Tensor       # [F, 3, H, W] in [-1, 1]
    pose_map: ControlMap
    face_map: ControlMap
    fg_mask: torch.Tensor      # [F, 1, H, W] binary
    meta: dict = field(default_factory=dict)

    @property
    def num_frames(self) -> int:
        return self.frames.shape[0]


def gen_scene_clip(
    spec: SceneSpec, seed: int, frames: int, height: int, width: int, clip_id: str = "scene"
) -> ClipRecord:
    """Dynamic-texture clip with blank controls and an empty mask."""
    video = quantize_signed(render_texture(spec, seed, frames, height, width))
    meta = {
        "kind": "scene",
        "seed": seed,
        "spec": dataclasses.asdict(spec),
        "frames": frames,
    }
    return ClipRecord(
        clip_id=clip_id,
        kind="scene",
        frames=torch.from_numpy(video),
        pose_map=ControlMap.blank_map("pose", frames, height, width),
        face_map=ControlMap.blank_map("face", frames, height, width),
        fg_mask=torch.zeros(frames, 1, height, width, dtype=torch.float64),
        meta=meta,
    )


def _paint_segment(canvas_mask: np.ndarray, a, b, thickness: float = 0.9) -> None:
    height, width = canvas_mask.shape
    ys, xs = np.meshgrid(np.arange(height) + 0.5, np.arange(width) + 0.5, indexing="ij")
    dx, dy = b[0] - a[0], b[1] - a[1]
    length2 = dx * dx + dy * dy
    if length2 == 0.0:
        dist = np.hypot(xs - a[0], ys - a[1])
    else:
        s = np.clip(((xs - a[0]) * dx + (ys - a[1]) * dy) / length2, 0.0, 1.0)
        dist = np.hypot(xs - (a[0] + s * dx), ys - (a[1] + s * dy))
    canvas_mask |= dist <= thickness


def gen_human_clip(spec: HumanClipSpec, seed: int, height: int = 32, width: int = 32) -> ClipRecord:
    """Sprite-over-background clip with pose/face controls and exact mask.

    The face control map uses the identity-swap training variant: each
    frame's expression is preserved but rendered with a different, seeded
    identity, then pasted at the frame's face box.
    """
    num_frames = len(spec.poses)
    swap_seed = child_seed(seed, "swap")

    if spec.background is None:
        bg = np.broadcast_to(
            _static_background(spec.bg_palette_seed, height, width), (num_frames, 3, height, width)
        ).copy()
    else:
        bg = render_texture(spec.background, child_seed(seed, "bg"), num_frames, height, width)

    body = np.array(spec.body_color)
    frames = np.empty((num_frames, 3, height, width))
    masks = np.zeros((num_frames, 1, height, width))
    pose_rasters, face_rasters = [], []

    for t, (pose, face) in enumerate(zip(spec.poses, spec.faces)):
        alpha = np.zeros((height, width), dtype=bool)
        sprite = np.zeros((3, height, width))
        for a, b in pose.segments():
            seg_mask = np.zeros((height, width), dtype=bool)
            _paint_segment(seg_mask, a, b)
            alpha |= seg_mask
            sprite[:, seg_mask] = body[:, None]

        top, left, ph, pw = face.bbox
        rgb01, face_alpha = render_face_patch(face)
        patch_signed = rgb01 * 2.0 - 1.0
        fa = face_alpha.astype(bool)
        region = sprite[:, top : top + ph, left : left + pw]
        region[:, fa] = patch_signed[:, fa]
        alpha[top : top + ph, left : left + pw] |= fa

        frames[t] = bg[t] * (1.0 - alpha) + sprite * alpha
        masks[t, 0] = alpha.astype(np.float64)

        pose_rasters.append(render_pose_map(pose, height, width).raster[0])
        swapped = synthesize_cross_identity_face(face, swap_seed)
        srgb, salpha = render_face_patch(swapped)
        face_rasters.append(
            compose_face_map(quantize_unit(srgb * salpha), face.bbox, height, width).raster[0]
        )

    frames = quantize_signed(frames)
    pose_raster = quantize_unit(torch.stack(pose_rasters).numpy())
    face_raster = torch.stack(face_rasters)

    swap_identity = synthesize_cross_identity_face(spec.faces[0], swap_seed)
    meta = {
        "kind": "human",
        "seed": seed,
        "swap_seed": swap_seed,
        "frames": num_frames,
        "identity": list(spec.faces[0].identity()),
        "swap_identity": list(swap_identity.identity()),
        "expressions": [list(f.expression()) for f in spec.faces],
        "bboxes": [list(f.bbox) for f in spec.faces],
        "body_color": list(spec.body_color),
        "background": dataclasses.asdict(spec.background) if spec.background else None,
        "bg_palette_seed": spec.bg_palette_seed,
        "skeleton": [
            {
                "hip": list(p.hip),
                "torso_angle": p.torso_angle,
                "arm_angles": list(p.arm_angles),
                "leg_angles": list(p.leg_angles),
            }
            for p in spec.poses
        ],
    }
    return ClipRecord(
        clip_id="human",
        kind="human",
        frames=torch.from_numpy(frames),
        pose_map=ControlMap(torch.from_numpy(pose_raster), "pose", blank=False),
        face_map=ControlMap(face_raster, "face", blank=False),
        fg_mask=torch.from_numpy(masks),
        meta=meta,
    )


def save_clip(record: ClipRecord, clip_dir: str | Path) -> None:
    clip_dir = Path(clip_dir)
    clip_dir.mkdir(parents=True, exist_ok=True)
    frames = record.frames.numpy()
    pose = record.pose_map.raster.numpy()
    face = record.face_map.raster.numpy()
    mask = record.fg_mask.numpy()
    for t in range(record.num_frames):
        Image.fromarray(
            _to_uint8_unit((frames[t].transpose(1, 2, 0) + 1.0) / 2.0), "RGB"
        ).save(clip_dir / f"frame_{t:03d}.png")
        Image.fromarray(_to_uint8_unit(pose[t].transpose(1, 2, 0)), "RGB").save(
            clip_dir / f"pose_{t:03d}.png"
        )
        Image.fromarray(_to_uint8_unit(face[t].transpose(1, 2, 0)), "RGB").save(
            clip_dir / f"face_{t:03d}.png"
        )
        Image.fromarray(_to_uint8_unit(mask[t, 0]), "L").save(clip_dir / f"mask_{t:03d}.png")
    meta = dict(record.meta)
    meta["clip_id"] = record.clip_id
    (clip_dir / "meta.json").write_text(json.dumps(meta, sort_keys=True, indent=1))


def load_clip(clip_dir: str | Path) -> ClipRecord:
    clip_dir = Path(clip_dir)
    meta = json.loads((clip_dir / "meta.json").read_text())
    num_frames = meta["frames"]

    def read_stack(prefix: str, mode: str) -> np.ndarray:
        imgs = []
        for t in range(num_frames):
            arr = np.asarray(Image.open(clip_dir / f"{prefix}_{t:03d}.png")) / 255.0
            imgs.append(arr[None, :, :] if mode == "L" else arr.transpose(2, 0, 1))
        return np.stack(imgs)

    frames = read_stack("frame", "RGB") * 2.0 - 1.0
    pose = read_stack("pose", "RGB")
    face = read_stack("face", "RGB")
    mask = read_stack("mask", "L")
    kind = meta["kind"]
    blank = kind == "scene"
    return ClipRecord(
        clip_id=meta["clip_id"],
        kind=kind,
        frames=torch.from_numpy(frames),
        pose_map=ControlMap(torch.from_numpy(pose), "pose", blank=blank),
        face_map=ControlMap(torch.from_numpy(face), "face", blank=blank),
        fg_mask=torch.from_numpy(mask),
        meta=meta,
    )


def build_fused_dataset(
    n_human: int,
    n_scene: int,
    seed: int,
    out_dir: str | Path,
    frames: int = 8,
    height: int = 32,
    width: int = 32,
) -> Path:
    """Generate a mixed dataset on disk and return the manifest path."""
    if n_human + n_scene < 1:
        raise ParameterError("dataset must contain at least one clip")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    entries = []
    for i in range(n_human):
        clip_seed = child_seed(seed, "human", i)
        spec = HumanClipSpec.sample(numpy_rng(clip_seed, "spec"), frames, height, width)
        record = gen_human_clip(spec, clip_seed, height, width)
        record.clip_id = f"human_{i:03d}"
        save_clip(record, out_dir / record.clip_id)
        entries.append({"id": record.clip_id, "kind": "human", "seed": clip_seed, "path": record.clip_id})
    for i in range(n_scene):
        clip_seed = child_seed(seed, "scene", i)
        spec = SceneSpec.sample(numpy_rng(clip_seed, "spec"))
        record = gen_scene_clip(spec, clip_seed, frames, height, width, clip_id=f"scene_{i:03d}")
        save_clip(record, out_dir / record.clip_id)
        entries.append({"id": record.clip_id, "kind": "scene", "seed": clip_seed, "path": record.clip_id})
    manifest = {
        "seed": seed,
        "frames": frames,
        "height": height,
        "width": width,
        "n_human": n_human,
        "n_scene": n_scene,
        "clips": entries,
    }
    manifest_path = out_dir / "manifest.json"
    manifest_path.write_text(json.dumps(manifest, sort_keys=True, indent=1))
    return manifest_path


def load_manifest(manifest_path: str | Path) -> dict:
    manifest_path = Path(manifest_path)
    if not manifest_path.exists():
        raise FileNotFoundError(f"manifest not found: {manifest_path}")
    return json.loads(manifest_path.read_text())


def load_manifest_clips(manifest_path: str | Path) -> list[ClipRecord]:
    manifest_path = Path(manifest_path)
    manifest = load_manifest(manifest_path)
    root = manifest_path.parent
    return [load_clip(root / entry["path"]) for entry in manifest["clips"]]
