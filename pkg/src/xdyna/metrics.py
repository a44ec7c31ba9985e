"""Evaluation suite: pixel metrics, Fréchet distance over handcrafted video
features, face identity/detection/expression measures, and report I/O.

Pixel values are assumed to live in [-1, 1] (range 2); masks are binary
with 1 marking the foreground.  All metrics are deterministic pure
functions; Gaussian feature statistics accumulate via exact sufficient
statistics so partial results can be merged without error.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .errors import MetricError, NumericalError, ParameterError, ShapeError
from .render import (
    EXPRESSION_RANGES,
    IDENTITY_RANGES,
    crop_bbox,
    render_face_batch,
)

logger = logging.getLogger(__name__)

PIXEL_RANGE = 2.0
PSNR_CAP = 100.0
SSIM_WINDOW = 7
SSIM_K1 = 0.01
SSIM_K2 = 0.03

FEATURE_DIM = 18  # 3 means + 3 variances + 8 gradient bins + 4 temporal bands

IDENTITY_GRID_POINTS = 5


# ----- pixel metrics ----------------------------------------------------------


def _as_f64(x) -> torch.Tensor:
    return torch.as_tensor(x).to(torch.float64)


def _select(values: torch.Tensor, mask: torch.Tensor | None) -> torch.Tensor:
    """Flatten ``values``, keeping only mask-selected pixels if a mask is given."""
    if mask is None:
        return values.reshape(-1)
    mask = _as_f64(mask)
    if mask.shape[0] != values.shape[0] or mask.shape[-2:] != values.shape[-2:]:
        raise ShapeError(f"mask shape {tuple(mask.shape)} incompatible with {tuple(values.shape)}")
    if not bool(((mask == 0) | (mask == 1)).all()):
        raise ParameterError("mask must be binary")
    expanded = mask.expand_as(values) if mask.shape != values.shape else mask
    selected = values[expanded == 1]
    if selected.numel() == 0:
        raise MetricError("empty region")
    return selected


def pixel_metrics(
    pred: torch.Tensor, gt: torch.Tensor, mask: torch.Tensor | None = None
) -> dict[str, float]:
    """L1, PSNR (capped), and SSIM over an optional binary region.

    PSNR uses the [-1, 1] value range (peak 2) and is capped at 100 dB;
    SSIM uses a 7x7 uniform window with K1=0.01, K2=0.03 and is averaged
    over window centers inside the region.
    """
    pred, gt = _as_f64(pred), _as_f64(gt)
    if pred.shape != gt.shape:
        raise ShapeError(f"shape mismatch {tuple(pred.shape)} vs {tuple(gt.shape)}")
    diff = pred - gt
    sel = _select(diff, mask)
    l1 = float(sel.abs().mean())
    mse = float((sel**2).mean())
    if mse <= 0.0:
        psnr = PSNR_CAP
    else:
        psnr = min(10.0 * float(np.log10(PIXEL_RANGE**2 / mse)), PSNR_CAP)
    return {"l1": l1, "psnr": psnr, "ssim": ssim(pred, gt, mask)}


def _uniform_window_mean(x: torch.Tensor, window: int) -> torch.Tensor:
    """Valid-mode uniform filter over the last two axes of [N, H, W]."""
    return torch.nn.functional.avg_pool2d(x.unsqueeze(1), window, stride=1).squeeze(1)


def ssim(pred: torch.Tensor, gt: torch.Tensor, mask: torch.Tensor | None = None) -> float:
    pred, gt = _as_f64(pred), _as_f64(gt)
    if pred.shape != gt.shape:
        raise ShapeError(f"shape mismatch {tuple(pred.shape)} vs {tuple(gt.shape)}")
    frames, channels, height, width = pred.shape
    if height < SSIM_WINDOW or width < SSIM_WINDOW:
        raise MetricError(f"frames smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} SSIM window")
    x = pred.reshape(frames * channels, height, width)
    y = gt.reshape(frames * channels, height, width)
    mu_x = _uniform_window_mean(x, SSIM_WINDOW)
    mu_y = _uniform_window_mean(y, SSIM_WINDOW)
    sigma_x = _uniform_window_mean(x * x, SSIM_WINDOW) - mu_x**2
    sigma_y = _uniform_window_mean(y * y, SSIM_WINDOW) - mu_y**2
    sigma_xy = _uniform_window_mean(x * y, SSIM_WINDOW) - mu_x * mu_y
    c1 = (SSIM_K1 * PIXEL_RANGE) ** 2
    c2 = (SSIM_K2 * PIXEL_RANGE) ** 2
    ssim_map = ((2 * mu_x * mu_y + c1) * (2 * sigma_xy + c2)) / (
        (mu_x**2 + mu_y**2 + c1) * (sigma_x + sigma_y + c2)
    )
    out_h, out_w = ssim_map.shape[-2:]
    ssim_map = ssim_map.reshape(frames, channels, out_h, out_w)
    if mask is None:
        return float(ssim_map.mean())
    crop = SSIM_WINDOW // 2
    center_mask = _as_f64(mask)[:, :, crop : crop + out_h, crop : crop + out_w]
    return float(_select(ssim_map, center_mask).mean())


# ----- Fréchet machinery ------------------------------------------------------


@dataclass(frozen=True)
class GaussianStats:
    """Gaussian moments stored as exact sufficient statistics."""

    count: int
    feat_sum: np.ndarray
    outer_sum: np.ndarray

    @classmethod
    def from_features(cls, features: np.ndarray) -> "GaussianStats":
        features = np.asarray(features, dtype=np.float64)
        if features.ndim != 2:
            raise ShapeError("features must be [count, dim]")
        if features.shape[0] < 2:
            raise MetricError("need at least 2 samples to fit Gaussian statistics")
        return cls(
            count=features.shape[0],
            feat_sum=features.sum(axis=0),
            outer_sum=features.T @ features,
        )

    def merge(self, other: "GaussianStats") -> "GaussianStats":
        if self.dim != other.dim:
            raise ShapeError("cannot merge statistics of different dimensions")
        return GaussianStats(
            count=self.count + other.count,
            feat_sum=self.feat_sum + other.feat_sum,
            outer_sum=self.outer_sum + other.outer_sum,
        )

    @property
    def dim(self) -> int:
        return self.feat_sum.shape[0]

    @property
    def mean(self) -> np.ndarray:
        return self.feat_sum / self.count

    @property
    def cov(self) -> np.ndarray:
        mu = self.mean
        cov = (self.outer_sum - self.count * np.outer(mu, mu)) / (self.count - 1)
        return (cov + cov.T) / 2.0


_EIG_CLIP = -1e-8


def _psd_sqrt(matrix: np.ndarray, what: str) -> np.ndarray:
    vals, vecs = np.linalg.eigh((matrix + matrix.T) / 2.0)
    if vals.min() < _EIG_CLIP * max(1.0, abs(vals.max())):
        raise NumericalError(f"{what} has eigenvalue {vals.min():.3e} below tolerance")
    vals = np.clip(vals, 0.0, None)
    return (vecs * np.sqrt(vals)) @ vecs.T


def frechet_distance(a: GaussianStats, b: GaussianStats) -> float:
    """Squared Wasserstein-2 distance between two Gaussians.

    ``|mu_a - mu_b|^2 + Tr(S_a + S_b - 2 (S_a S_b)^{1/2})``, with the matrix
    square root computed by eigendecomposition of the symmetrized product;
    eigenvalues in [-1e-8, 0) are clipped to zero, anything lower raises.
    """
    if a.dim != b.dim:
        raise ShapeError(f"dimension mismatch {a.dim} vs {b.dim}")
    cov_a, cov_b = a.cov, b.cov
    sqrt_a = _psd_sqrt(cov_a, "covariance")
    inner = sqrt_a @ cov_b @ sqrt_a
    vals = np.linalg.eigvalsh((inner + inner.T) / 2.0)
    if vals.min() < _EIG_CLIP * max(1.0, abs(vals.max())):
        raise NumericalError(f"covariance product has eigenvalue {vals.min():.3e} below tolerance")
    trace_sqrt = np.sqrt(np.clip(vals, 0.0, None)).sum()
    mean_diff = a.mean - b.mean
    fd = float(mean_diff @ mean_diff + np.trace(cov_a) + np.trace(cov_b) - 2.0 * trace_sqrt)
    return max(fd, 0.0) if fd > -1e-8 else fd


# ----- handcrafted video features ---------------------------------------------


def video_features_handcrafted(clip) -> np.ndarray:
    """Deterministic spatiotemporal feature vector of a clip.

    Components (dimension 18): per-channel mean (3) and variance (3), an
    8-bin histogram of gray spatial-gradient magnitudes over [0, 2], and
    per-pixel temporal spectrum energy folded into 4 frequency bands
    (DC excluded), averaged over pixels.
    """
    video = np.asarray(torch.as_tensor(clip).to(torch.float64))
    if video.ndim != 4:
        raise ShapeError("clip must be [F, C, H, W]")
    frames = video.shape[0]
    means = video.mean(axis=(0, 2, 3))
    variances = video.var(axis=(0, 2, 3))

    gray = video.mean(axis=1)
    gx = (gray[:, :, 1:] - gray[:, :, :-1])[:, :-1, :]
    gy = (gray[:, 1:, :] - gray[:, :-1, :])[:, :, :-1]
    magnitude = np.clip(np.hypot(gx, gy), 0.0, 2.0)
    hist, _ = np.histogram(magnitude, bins=8, range=(0.0, 2.0))
    hist = hist / magnitude.size

    spectrum = np.fft.rfft(gray, axis=0) / frames
    energies = [np.mean(np.abs(spectrum[k]) ** 2) for k in range(1, frames // 2 + 1)]
    bands = np.zeros(4)
    if energies:
        for band, chunk in enumerate(np.array_split(np.asarray(energies), 4)):
            bands[band] = chunk.sum()
    return np.concatenate([means, variances, hist, bands])


def frame_difference_energy(clip, mask=None) -> float:
    """Mean absolute inter-frame difference (temporal motion energy)."""
    video = _as_f64(clip)
    if video.shape[0] < 2:
        return 0.0
    diffs = (video[1:] - video[:-1]).abs()
    if mask is None:
        return float(diffs.mean())
    mask = _as_f64(mask)
    pair_mask = mask[1:] * mask[:-1]
    selected = _select(diffs, pair_mask)
    return float(selected.mean())


# ----- face metrics -----------------------------------------------------------


def face_embedding(patch: torch.Tensor) -> torch.Tensor:
    """Mean-centered flattened 8x8 average-pooled crop (identity stand-in)."""
    patch = _as_f64(patch)
    if patch.ndim != 3:
        raise ShapeError("face patch must be [C, H, W]")
    pooled = torch.nn.functional.adaptive_avg_pool2d(patch.unsqueeze(0), (8, 8))[0]
    vec = pooled.reshape(-1)
    return vec - vec.mean()


def face_cos(pred_clip: torch.Tensor, ref_face_patch: torch.Tensor, bboxes) -> float:
    """Mean over frames of cosine similarity between face embeddings.

    Frames whose crop is degenerate (all values equal, so the centered
    embedding is zero) are excluded with a warning; if every frame is
    degenerate the metric is undefined.
    """
    ref = face_embedding(ref_face_patch)
    ref_norm = float(ref.norm())
    if ref_norm < 1e-12:
        raise MetricError("reference face patch is degenerate")
    sims = []
    for t in range(pred_clip.shape[0]):
        emb = face_embedding(crop_bbox(pred_clip[t], tuple(bboxes[t])))
        norm = float(emb.norm())
        if norm < 1e-12:
            logger.warning("face_cos: degenerate crop at frame %d excluded", t)
            continue
        sims.append(float(emb @ ref) / (norm * ref_norm))
    if not sims:
        raise MetricError("all face crops degenerate")
    return float(np.mean(sims))


def face_detect_rate(pred_clip: torch.Tensor, ref_face_patch: torch.Tensor, threshold: float) -> float:
    """Percentage of frames where the reference patch is found by
    zero-normalized cross-correlation at or above ``threshold``."""
    if not (0.0 < threshold < 1.0):
        raise ParameterError(f"threshold must lie in (0, 1), got {threshold}")
    clip = _as_f64(pred_clip)
    template = _as_f64(ref_face_patch)
    _, ph, pw = template.shape
    t_vec = template.reshape(-1)
    t_vec = t_vec - t_vec.mean()
    t_norm = float(t_vec.norm())
    if t_norm < 1e-12:
        raise MetricError("reference face patch is degenerate")
    detected = 0
    for t in range(clip.shape[0]):
        windows = clip[t].unfold(1, ph, 1).unfold(2, pw, 1)  # [C, Ho, Wo, ph, pw]
        windows = windows.permute(1, 2, 0, 3, 4).reshape(-1, t_vec.numel())
        centered = windows - windows.mean(dim=1, keepdim=True)
        norms = centered.norm(dim=1)
        scores = torch.where(
            norms > 1e-12, (centered @ t_vec) / (norms * t_norm), torch.zeros_like(norms)
        )
        if float(scores.max()) >= threshold:
            detected += 1
    return 100.0 * detected / clip.shape[0]


# ----- expression inverse rendering -------------------------------------------


def _axis_grid(lo: float, hi: float, step: float) -> np.ndarray:
    n = (hi - lo) / step
    if abs(n - round(n)) > 1e-9:
        raise ParameterError(f"grid step {step} does not divide range [{lo}, {hi}]")
    return np.linspace(lo, hi, int(round(n)) + 1)


def _param_product(axes: list[np.ndarray]) -> np.ndarray:
    mesh = np.meshgrid(*axes, indexing="ij")
    return np.stack([m.reshape(-1) for m in mesh], axis=1)


def _best_render_match(crop01: np.ndarray, identity: np.ndarray, expression: np.ndarray) -> int:
    """Index of the render with minimal L2 pixel distance to the crop."""
    size = crop01.shape[-1]
    best_index, best_dist = 0, np.inf
    chunk = 4096
    for start in range(0, identity.shape[0], chunk):
        rgb, _ = render_face_batch(identity[start : start + chunk], expression[start : start + chunk], size)
        dists = ((rgb - crop01[None]) ** 2).sum(axis=(1, 2, 3))
        idx = int(np.argmin(dists))
        if dists[idx] < best_dist:
            best_dist = float(dists[idx])
            best_index = start + idx
    return best_index


def estimate_face_params(
    pred_face_crop, grid_step: float
) -> tuple[np.ndarray, np.ndarray]:
    """Inverse rendering by exhaustive search.

    Phase 1 scans a coarse joint grid (5 points per identity and expression
    axis) and fixes the nearest-match identity; phase 2 scans the full
    expression grid at ``grid_step`` with that identity.  The crop is
    expected in [-1, 1] (frame convention).
    """
    crop = np.asarray(torch.as_tensor(pred_face_crop).to(torch.float64))
    crop01 = (crop + 1.0) / 2.0

    identity_axes = [np.linspace(lo, hi, IDENTITY_GRID_POINTS) for lo, hi in IDENTITY_RANGES]
    coarse_expr_axes = [np.linspace(lo, hi, 5) for lo, hi in EXPRESSION_RANGES]
    identities = _param_product(identity_axes)
    coarse_expressions = _param_product(coarse_expr_axes)
    joint_identity = np.repeat(identities, coarse_expressions.shape[0], axis=0)
    joint_expression = np.tile(coarse_expressions, (identities.shape[0], 1))
    best = _best_render_match(crop01, joint_identity, joint_expression)
    identity = joint_identity[best]

    expr_axes = [_axis_grid(lo, hi, grid_step) for lo, hi in EXPRESSION_RANGES]
    expressions = _param_product(expr_axes)
    fixed_identity = np.tile(identity, (expressions.shape[0], 1))
    best = _best_render_match(crop01, fixed_identity, expressions)
    return identity, expressions[best]


def expression_error(pred_face_crop, true_expr, grid_step: float) -> float:
    """Mean absolute error of the three estimated expression parameters."""
    _, estimate = estimate_face_params(pred_face_crop, grid_step)
    true_expr = np.asarray(true_expr, dtype=np.float64)
    if true_expr.shape != (3,):
        raise ParameterError("true expression must have 3 parameters")
    return float(np.mean(np.abs(estimate - true_expr)))


# ----- report and run evaluation ----------------------------------------------


@dataclass
class MetricReport:
    """Named scalar metrics tagged with a scope (whole / fg / bg / face)."""

    rows: list[tuple[str, str, float]] = field(default_factory=list)

    def add(self, metric: str, scope: str, value: float) -> None:
        self.rows.append((metric, scope, float(value)))

    def get(self, metric: str, scope: str = "whole") -> float:
        for m, s, v in self.rows:
            if m == metric and s == scope:
                return v
        raise KeyError(f"no row for metric={metric!r} scope={scope!r}")

    def validate(self) -> None:
        for metric, _, value in self.rows:
            if metric == "face_det" and not (0.0 <= value <= 100.0):
                raise MetricError(f"face_det out of range: {value}")
            if metric in ("ssim", "face_cos") and not (-1.0 - 1e-9 <= value <= 1.0 + 1e-9):
                raise MetricError(f"{metric} out of range: {value}")

    def to_csv(self) -> str:
        lines = ["metric,scope,value"]
        lines += [f"{m},{s},{v!r}" for m, s, v in self.rows]
        return "\n".join(lines) + "\n"

    @classmethod
    def from_csv(cls, text: str) -> "MetricReport":
        rows = []
        for line in text.strip().splitlines()[1:]:
            metric, scope, value = line.split(",")
            rows.append((metric, scope, float(value)))
        return cls(rows=rows)

    def to_markdown(self) -> str:
        lines = ["| metric | scope | value |", "| --- | --- | --- |"]
        lines += [f"| {m} | {s} | {v:.6g} |" for m, s, v in self.rows]
        return "\n".join(lines) + "\n"


@dataclass
class EvalConfig:
    face_metrics: bool = True
    # same-identity faces under expression change correlate at ~0.4..1.0,
    # pure noise tops out near 0.2 over a 32x32 search
    detect_threshold: float = 0.4
    expression_grid_step: float = 0.25
    compute_fd: bool = True


def _discover_clip_dirs(root: Path) -> list[Path]:
    root = Path(root)
    manifest = root / "manifest.json"
    if manifest.exists():
        data = json.loads(manifest.read_text())
        return [root / entry["path"] for entry in data["clips"]]
    if (root / "meta.json").exists():
        return [root]
    subdirs = sorted(d for d in root.iterdir() if d.is_dir() and (d / "meta.json").exists())
    if not subdirs:
        raise ParameterError(f"{root} does not conform to the dataset layout")
    return subdirs


def evaluate_run(pred_dir, gt_dir, config: EvalConfig | None = None) -> MetricReport:
    """Compare a predicted clip set against a reference clip set.

    Pixel metrics are averaged per clip pair over whole / foreground /
    background scopes (using the reference masks); the Fréchet distance is
    computed between handcrafted-feature Gaussians of the two sets; face
    metrics run on clips whose reference metadata carries face boxes.
    """
    from .synthetic import load_clip  # local import to avoid a cycle

    config = config or EvalConfig()
    pred_dirs = _discover_clip_dirs(Path(pred_dir))
    gt_dirs = _discover_clip_dirs(Path(gt_dir))
    if len(pred_dirs) != len(gt_dirs):
        raise ParameterError(f"set sizes differ: {len(pred_dirs)} predicted vs {len(gt_dirs)} reference")
    pairs = [(load_clip(p), load_clip(g)) for p, g in zip(pred_dirs, gt_dirs)]

    report = MetricReport()
    scopes: dict[str, list[dict[str, float]]] = {"whole": [], "fg": [], "bg": []}
    fd_feats = {"pred": {"whole": [], "fg": [], "bg": []}, "gt": {"whole": [], "fg": [], "bg": []}}
    any_mask = False
    face_cos_vals, face_det_vals, face_exp_vals = [], [], []

    for pred, gt in pairs:
        if pred.frames.shape != gt.frames.shape:
            raise ShapeError(
                f"clip shape mismatch: {tuple(pred.frames.shape)} vs {tuple(gt.frames.shape)}"
            )
        mask = gt.fg_mask
        has_fg = bool((mask == 1).any())
        scopes["whole"].append(pixel_metrics(pred.frames, gt.frames))
        fd_feats["pred"]["whole"].append(video_features_handcrafted(pred.frames))
        fd_feats["gt"]["whole"].append(video_features_handcrafted(gt.frames))
        if has_fg:
            any_mask = True
            scopes["fg"].append(pixel_metrics(pred.frames, gt.frames, mask))
            scopes["bg"].append(pixel_metrics(pred.frames, gt.frames, 1.0 - mask))
            fd_feats["pred"]["fg"].append(video_features_handcrafted(pred.frames * mask))
            fd_feats["gt"]["fg"].append(video_features_handcrafted(gt.frames * mask))
            fd_feats["pred"]["bg"].append(video_features_handcrafted(pred.frames * (1.0 - mask)))
            fd_feats["gt"]["bg"].append(video_features_handcrafted(gt.frames * (1.0 - mask)))

        if config.face_metrics and gt.meta.get("bboxes"):
            bboxes = gt.meta["bboxes"]
            ref_patch = crop_bbox(gt.frames[0], tuple(bboxes[0]))
            face_cos_vals.append(face_cos(pred.frames, ref_patch, bboxes))
            face_det_vals.append(face_detect_rate(pred.frames, ref_patch, config.detect_threshold))
            if gt.meta.get("expressions"):
                errs = [
                    expression_error(
                        crop_bbox(pred.frames[t], tuple(bboxes[t])),
                        gt.meta["expressions"][t],
                        config.expression_grid_step,
                    )
                    for t in range(pred.frames.shape[0])
                ]
                face_exp_vals.append(float(np.mean(errs)))

    for scope in ("whole", "fg", "bg"):
        if not scopes[scope]:
            continue
        for key in ("l1", "psnr", "ssim"):
            report.add(key, scope, float(np.mean([m[key] for m in scopes[scope]])))

    if config.compute_fd:
        fd_scopes = ("whole", "fg", "bg") if any_mask else ("whole",)
        for scope in fd_scopes:
            pred_stats = GaussianStats.from_features(np.stack(fd_feats["pred"][scope]))
            gt_stats = GaussianStats.from_features(np.stack(fd_feats["gt"][scope]))
            report.add("fd", scope, frechet_distance(pred_stats, gt_stats))

    if face_cos_vals:
        report.add("face_cos", "face", float(np.mean(face_cos_vals)))
        report.add("face_det", "face", float(np.mean(face_det_vals)))
    if face_exp_vals:
        report.add("face_exp", "face", float(np.mean(face_exp_vals)))
    report.validate()
    return report
