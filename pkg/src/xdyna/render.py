"""Procedural face and skeleton rendering.

The cartoon face is parameterized by three identity scalars (skin tone,
head width, eye spacing) and three expression scalars (mouth openness,
brow angle, eye openness).  Rendering uses soft-edged primitives so that
pixel values vary continuously and monotonically with every parameter,
which is what makes grid-search inverse rendering (the expression oracle)
work at 12x12 resolution.

Pose maps rasterize a five-limb stick figure with per-limb colors plus a
head marker; the face control map is a face patch pasted at its bounding
box with all other pixels zero.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np
import torch

from .controlnet import ControlMap
from .determinism import numpy_rng
from .errors import ParameterError

FACE_PATCH_SIZE = 12

SKIN_TONE_RANGE = (0.3, 0.9)
FACE_SHAPE_RANGE = (0.7, 1.3)
EYE_SPACING_RANGE = (0.25, 0.45)
MOUTH_OPEN_RANGE = (0.0, 1.0)
BROW_ANGLE_RANGE = (-1.0, 1.0)
EYE_OPEN_RANGE = (0.0, 1.0)

IDENTITY_RANGES = (SKIN_TONE_RANGE, FACE_SHAPE_RANGE, EYE_SPACING_RANGE)
EXPRESSION_RANGES = (MOUTH_OPEN_RANGE, BROW_ANGLE_RANGE, EYE_OPEN_RANGE)

_EYE_COLOR = np.array([0.08, 0.07, 0.10])
_BROW_COLOR = np.array([0.16, 0.09, 0.05])
_MOUTH_COLOR = np.array([0.55, 0.12, 0.14])

LIMB_COLORS = np.array(
    [
        [1.0, 0.0, 0.0],  # torso
        [0.0, 1.0, 0.0],  # left arm
        [0.0, 0.0, 1.0],  # right arm
        [1.0, 1.0, 0.0],  # left leg
        [1.0, 0.0, 1.0],  # right leg
    ]
)
HEAD_COLOR = np.array([0.0, 1.0, 1.0])


@dataclass(frozen=True)
class FaceRenderParams:
    """Identity, expression, and placement of one rendered face."""

    skin_tone: float
    face_shape: float
    eye_spacing: float
    mouth_open: float
    brow_angle: float
    eye_open: float
    bbox: tuple[int, int, int, int]  # (top, left, height, width)

    def identity(self) -> np.ndarray:
        return np.array([self.skin_tone, self.face_shape, self.eye_spacing])

    def expression(self) -> np.ndarray:
        return np.array([self.mouth_open, self.brow_angle, self.eye_open])

    def validate(self) -> None:
        for value, (lo, hi), name in (
            (self.skin_tone, SKIN_TONE_RANGE, "skin_tone"),
            (self.face_shape, FACE_SHAPE_RANGE, "face_shape"),
            (self.eye_spacing, EYE_SPACING_RANGE, "eye_spacing"),
            (self.mouth_open, MOUTH_OPEN_RANGE, "mouth_open"),
            (self.brow_angle, BROW_ANGLE_RANGE, "brow_angle"),
            (self.eye_open, EYE_OPEN_RANGE, "eye_open"),
        ):
            if not (lo <= value <= hi):
                raise ParameterError(f"{name}={value} outside [{lo}, {hi}]")


def _soft_ellipse(u, v, cu, cv, ru, rv, softness=0.35):
    """Coverage in [0, 1] of an ellipse, smooth at the boundary."""
    r2 = ((u - cu) / ru) ** 2 + ((v - cv) / rv) ** 2
    return np.clip(0.5 + (1.0 - r2) / (2.0 * softness), 0.0, 1.0)


def _soft_segment(u, v, ax, ay, bx, by, thickness, softness=0.05):
    """Coverage of a thick line segment from (ax, ay) to (bx, by)."""
    dx, dy = bx - ax, by - ay
    length2 = dx * dx + dy * dy
    if isinstance(length2, float) and length2 == 0.0:
        dist = np.hypot(u - ax, v - ay)
    else:
        s = np.clip(((u - ax) * dx + (v - ay) * dy) / length2, 0.0, 1.0)
        dist = np.hypot(u - (ax + s * dx), v - (ay + s * dy))
    return np.clip(0.5 + (thickness - dist) / (2.0 * softness), 0.0, 1.0)


def render_face_batch(
    identity: np.ndarray, expression: np.ndarray, size: int = FACE_PATCH_SIZE
) -> tuple[np.ndarray, np.ndarray]:
    """Render a batch of faces; returns (rgb [B,3,s,s] in [0,1], alpha [B,s,s]).

    ``identity`` is [B, 3] (skin tone, face shape, eye spacing) and
    ``expression`` is [B, 3] (mouth open, brow angle, eye open).
    """
    identity = np.atleast_2d(np.asarray(identity, dtype=np.float64))
    expression = np.atleast_2d(np.asarray(expression, dtype=np.float64))
    batch = identity.shape[0]
    coords = (np.arange(size) + 0.5) / size * 2.0 - 1.0
    v, u = np.meshgrid(coords, coords, indexing="ij")
    u = u[None]  # [1, s, s] broadcasting over batch
    v = v[None]

    skin = identity[:, 0][:, None, None]
    rx = (0.72 * identity[:, 1])[:, None, None]
    eye_u = (0.35 + identity[:, 2])[:, None, None] * rx  # eye offset scales with head width
    mouth_h = (0.06 + 0.30 * expression[:, 0])[:, None, None]
    brow_dy = (0.135 * expression[:, 1])[:, None, None]
    eye_h = (0.06 + 0.30 * expression[:, 2])[:, None, None]

    head = _soft_ellipse(u, v, 0.0, 0.0, rx, 0.90)
    eye_l = _soft_ellipse(u, v, -eye_u, -0.26, 0.13, eye_h, softness=0.5)
    eye_r = _soft_ellipse(u, v, eye_u, -0.26, 0.13, eye_h, softness=0.5)
    mouth = _soft_ellipse(u, v, 0.0, 0.45, 0.28, mouth_h, softness=0.35)
    brow_l = _soft_segment(
        u, v, -eye_u - 0.15, -0.52 + brow_dy, -eye_u + 0.15, -0.52 - brow_dy, 0.09, softness=0.08
    )
    brow_r = _soft_segment(
        u, v, eye_u - 0.15, -0.52 - brow_dy, eye_u + 0.15, -0.52 + brow_dy, 0.09, softness=0.08
    )

    skin_rgb = np.stack([skin, 0.78 * skin, 0.62 * skin], axis=1) * np.ones((batch, 3, size, size))
    rgb = skin_rgb * head[:, None]
    for cov, color in (
        (mouth, _MOUTH_COLOR),
        (eye_l, _EYE_COLOR),
        (eye_r, _EYE_COLOR),
        (brow_l, _BROW_COLOR),
        (brow_r, _BROW_COLOR),
    ):
        rgb = rgb * (1.0 - cov[:, None]) + color[None, :, None, None] * cov[:, None]

    union = np.maximum.reduce([head, eye_l, eye_r, mouth, brow_l, brow_r])
    alpha = (union > 0.5).astype(np.float64)
    rgb = rgb * alpha[:, None]
    return rgb, alpha


def render_face_patch(
    params: FaceRenderParams, size: int = FACE_PATCH_SIZE
) -> tuple[np.ndarray, np.ndarray]:
    """Render one face; returns (rgb [3,s,s] in [0,1], binary alpha [s,s])."""
    rgb, alpha = render_face_batch(params.identity()[None], params.expression()[None], size)
    return rgb[0], alpha[0]


def synthesize_cross_identity_face(src: FaceRenderParams, swap_seed: int) -> FaceRenderParams:
    """Resample the identity while preserving expression and placement.

    This is the training-time stand-in for a reenactment network: the
    returned parameters render a different subject wearing exactly the
    source expression.
    """
    rng = numpy_rng(swap_seed, "identity-swap")
    skin = rng.uniform(*SKIN_TONE_RANGE)
    shape = rng.uniform(*FACE_SHAPE_RANGE)
    spacing = rng.uniform(*EYE_SPACING_RANGE)
    return replace(src, skin_tone=skin, face_shape=shape, eye_spacing=spacing)


def compose_face_map(
    face_patch: np.ndarray | torch.Tensor,
    bbox: tuple[int, int, int, int],
    height: int,
    width: int,
) -> ControlMap:
    """Paste a [C, ph, pw] patch (values in [0, 1]) into a blank frame.

    Pixels outside the bounding box stay exactly zero.
    """
    patch = torch.as_tensor(np.asarray(face_patch), dtype=torch.float64)
    top, left, ph, pw = bbox
    if patch.shape[-2:] != (ph, pw):
        raise ParameterError(f"patch shape {tuple(patch.shape[-2:])} != bbox size ({ph}, {pw})")
    if top < 0 or left < 0 or top + ph > height or left + pw > width:
        raise ParameterError(f"bbox {bbox} outside frame {height}x{width}")
    raster = torch.zeros(1, patch.shape[0], height, width, dtype=torch.float64)
    raster[0, :, top : top + ph, left : left + pw] = patch
    return ControlMap(raster=raster, kind="face", blank=False)


def crop_bbox(frames: torch.Tensor, bbox: tuple[int, int, int, int]) -> torch.Tensor:
    """Crop [..., H, W] tensors to a (top, left, height, width) box."""
    top, left, ph, pw = bbox
    return frames[..., top : top + ph, left : left + pw]


@dataclass(frozen=True)
class SkeletonPose:
    """Articulated five-limb stick figure in pixel coordinates."""

    hip: tuple[float, float]  # (x, y)
    torso_angle: float        # radians, 0 = straight up
    arm_angles: tuple[float, float]   # left/right, radians from straight down
    leg_angles: tuple[float, float]
    torso_len: float = 7.0
    arm_len: float = 5.0
    leg_len: float = 6.0
    head_offset: float = 3.0

    @property
    def shoulder(self) -> tuple[float, float]:
        x, y = self.hip
        return (
            x + self.torso_len * math.sin(self.torso_angle),
            y - self.torso_len * math.cos(self.torso_angle),
        )

    @property
    def head_center(self) -> tuple[float, float]:
        sx, sy = self.shoulder
        return (
            sx + self.head_offset * math.sin(self.torso_angle),
            sy - self.head_offset * math.cos(self.torso_angle),
        )

    def segments(self) -> list[tuple[tuple[float, float], tuple[float, float]]]:
        """Limb segments ordered (torso, arm L, arm R, leg L, leg R)."""
        hip, shoulder = self.hip, self.shoulder

        def swing(origin, angle, length):
            return (origin[0] + length * math.sin(angle), origin[1] + length * math.cos(angle))

        return [
            (hip, shoulder),
            (shoulder, swing(shoulder, self.arm_angles[0], self.arm_len)),
            (shoulder, swing(shoulder, self.arm_angles[1], self.arm_len)),
            (hip, swing(hip, self.leg_angles[0], self.leg_len)),
            (hip, swing(hip, self.leg_angles[1], self.leg_len)),
        ]

    def face_bbox(self, height: int, width: int, patch: int = FACE_PATCH_SIZE) -> tuple[int, int, int, int]:
        """Patch-sized box centered on the head, clamped inside the frame."""
        if patch > height or patch > width:
            raise ParameterError(f"face patch {patch} exceeds frame {height}x{width}")
        hx, hy = self.head_center
        top = int(round(hy - patch / 2))
        left = int(round(hx - patch / 2))
        top = min(max(top, 0), height - patch)
        left = min(max(left, 0), width - patch)
        return (top, left, patch, patch)


def render_pose_map(pose: SkeletonPose | None, height: int, width: int) -> ControlMap:
    """Rasterize a skeleton as a 3-channel limb-colored map ([0, 1] values).

    Joints outside the frame are clipped by rasterization, never an error;
    ``pose=None`` yields a blank map.
    """
    if pose is None:
        return ControlMap.blank_map("pose", 1, height, width)
    ys, xs = np.meshgrid(np.arange(height) + 0.5, np.arange(width) + 0.5, indexing="ij")
    raster = np.zeros((3, height, width))
    for (a, b), color in zip(pose.segments(), LIMB_COLORS):
        cov = _soft_segment(xs, ys, a[0], a[1], b[0], b[1], thickness=0.9, softness=0.4)
        mask = cov > 0.5
        raster[:, mask] = color[:, None]
    hx, hy = pose.head_center
    head_cov = np.hypot(xs - hx, ys - hy) <= 1.6
    raster[:, head_cov] = HEAD_COLOR[:, None]
    tensor = torch.from_numpy(raster[None]).to(torch.float64)
    return ControlMap(raster=tensor, kind="pose", blank=False)
