"""Motion and image similarity metrics against ground truth.

Rotation metrics (``l2q``, ``hl2q``, ``npss``) work on quaternion components
canonicalized to ``w >= 0``. ``l2p`` compares FK positions normalized by the
character's rest-pose height so values are comparable across characters.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy.ndimage import gaussian_filter

from .errors import ConfigError, ContractError
from .motion import MotionSequence, joint_hierarchy_depths, quat_canonicalize

BUILTIN_METRICS = ("l2q", "hl2q", "l2p", "npss", "ssim")


@dataclass(frozen=True)
class HierarchyFilter:
    threshold: float = 0.5

    def __post_init__(self):
        if not 0 < self.threshold <= 1:
            raise ContractError("hierarchy threshold must lie in (0, 1]")

    def joint_mask(self, depths: Sequence[int]) -> np.ndarray:
        depths = np.asarray(depths)
        limit = math.floor(self.threshold * depths.max())
        return depths <= limit


def _check_pair(pred: MotionSequence, gt: MotionSequence) -> None:
    if pred.skeleton != gt.skeleton:
        raise ContractError("pred and gt use different skeletons")
    if len(pred) != len(gt):
        raise ContractError(f"frame count mismatch: {len(pred)} vs {len(gt)}")


def _quat_sq_err(pred: MotionSequence, gt: MotionSequence) -> np.ndarray:
    d = quat_canonicalize(pred.rotations) - quat_canonicalize(gt.rotations)
    return np.sum(d * d, axis=-1)


def _masked_mean(err: np.ndarray, mask: np.ndarray) -> float:
    return float(np.mean(err[:, mask]))


def l2q(pred: MotionSequence, gt: MotionSequence) -> float:
    """Mean squared quaternion distance over frames and joints."""
    _check_pair(pred, gt)
    return _masked_mean(_quat_sq_err(pred, gt), np.ones(gt.skeleton.num_joints, dtype=bool))


def hl2q(pred: MotionSequence, gt: MotionSequence, filter: HierarchyFilter = HierarchyFilter()) -> float:
    """``l2q`` restricted to joints within ``floor(threshold * max_depth)`` of the root."""
    _check_pair(pred, gt)
    mask = filter.joint_mask(joint_hierarchy_depths(gt.skeleton))
    return _masked_mean(_quat_sq_err(pred, gt), mask)


def l2p(pred: MotionSequence, gt: MotionSequence) -> float:
    """Mean squared global joint distance divided by the squared character height."""
    _check_pair(pred, gt)
    h = gt.skeleton.height()
    d = (pred.global_positions() - gt.global_positions()) / h
    return float(np.mean(np.sum(d * d, axis=-1)))


def power_spectrum_emd(pred_series: np.ndarray, gt_series: np.ndarray) -> float:
    """Power-weighted EMD between normalized power spectra of ``(T, D)`` channels.

    Channels whose ground-truth power is zero get zero weight; if every channel
    has zero power the result is 0.
    """
    gt_p = np.abs(np.fft.fft(gt_series, axis=0)) ** 2
    pr_p = np.abs(np.fft.fft(pred_series, axis=0)) ** 2
    gt_tot = gt_p.sum(axis=0)
    pr_tot = pr_p.sum(axis=0)
    gt_n = np.divide(gt_p, gt_tot, out=np.zeros_like(gt_p), where=gt_tot > 0)
    pr_n = np.divide(pr_p, pr_tot, out=np.zeros_like(pr_p), where=pr_tot > 0)
    emd = np.abs(np.cumsum(pr_n, axis=0) - np.cumsum(gt_n, axis=0)).sum(axis=0)
    emd = np.where(gt_tot > 0, emd, 0.0)
    total = gt_tot.sum()
    if total == 0:
        return 0.0
    return float(np.sum(emd * gt_tot) / total)


def npss(pred: MotionSequence, gt: MotionSequence) -> float:
    _check_pair(pred, gt)
    if len(gt) < 2:
        raise ContractError("npss needs at least two frames")
    t = len(gt)
    p = quat_canonicalize(pred.rotations).reshape(t, -1)
    g = quat_canonicalize(gt.rotations).reshape(t, -1)
    return power_spectrum_emd(p, g)


def _to_gray(img) -> np.ndarray:
    img = np.asarray(img, dtype=float)
    if img.ndim == 3 and img.shape[-1] in (3, 4):
        img = img[..., :3] @ np.array([0.299, 0.587, 0.114])
    if img.ndim != 2:
        raise ContractError(f"expected a 2D image, got shape {img.shape}")
    return img


def ssim(a, b, data_range: float = 1.0, sigma: float = 1.5, win_size: int = 11) -> float:
    """Mean SSIM with an ``win_size`` Gaussian window (valid region only)."""
    a = _to_gray(a)
    b = _to_gray(b)
    if a.shape != b.shape:
        raise ContractError(f"image shapes differ: {a.shape} vs {b.shape}")
    truncate = ((win_size - 1) / 2) / sigma
    c1 = (0.01 * data_range) ** 2
    c2 = (0.03 * data_range) ** 2

    def filt(x):
        return gaussian_filter(x, sigma=sigma, truncate=truncate, mode="reflect")

    mu_a, mu_b = filt(a), filt(b)
    var_a = filt(a * a) - mu_a * mu_a
    var_b = filt(b * b) - mu_b * mu_b
    cov = filt(a * b) - mu_a * mu_b
    s = ((2 * mu_a * mu_b + c1) * (2 * cov + c2)) / ((mu_a ** 2 + mu_b ** 2 + c1) * (var_a + var_b + c2))
    pad = (win_size - 1) // 2
    if min(s.shape) > 2 * pad:
        s = s[pad:-pad, pad:-pad]
    return float(s.mean())


# ---------------------------------------------------------------------------
# report + plug-ins
# ---------------------------------------------------------------------------

PerceptualMetric = Callable[[np.ndarray, np.ndarray], float]


class MetricRegistry:
    """Named perceptual metrics evaluated on rendered ``(T, H, W[, C])`` frame pairs."""

    def __init__(self):
        self._metrics: dict[str, PerceptualMetric] = {}

    def register(self, name: str, fn: PerceptualMetric) -> None:
        if name in self._metrics or name in BUILTIN_METRICS:
            raise ConfigError(f"metric {name!r} is already registered")
        self._metrics[name] = fn

    def unregister(self, name: str) -> None:
        self._metrics.pop(name, None)

    def items(self):
        return list(self._metrics.items())

    def __contains__(self, name):
        return name in self._metrics


default_registry = MetricRegistry()


def register_perceptual_metric(name: str, fn: PerceptualMetric, registry: MetricRegistry | None = None) -> None:
    (registry or default_registry).register(name, fn)


@dataclass
class MetricReport:
    values: dict[str, float]
    frame_range: tuple[int, int]
    joints: list[int]
    failures: dict[str, str] = field(default_factory=dict)
    invalid: list[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "values": self.values,
            "frame_range": list(self.frame_range),
            "joints": self.joints,
            "failures": self.failures,
            "invalid": self.invalid,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1, sort_keys=True)

    def write_csv(self, path, motion_name: str = "motion") -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["motion", "metric", "value"])
            for k in sorted(self.values):
                w.writerow([motion_name, k, repr(self.values[k])])


def evaluate_all(pred: MotionSequence, gt: MotionSequence, cams: Sequence | None = None,
                 style=None, registry: MetricRegistry | None = None,
                 frames: Sequence[int] | None = None,
                 filter: HierarchyFilter = HierarchyFilter()) -> MetricReport:
    """Compute the built-in metrics plus registered perceptual plug-ins.

    ``frames`` restricts evaluation to a frame subset (e.g. the in-between
    span). SSIM and plug-ins run on frames rendered from each camera in
    ``cams``. A plug-in that raises is recorded under ``failures``; one that
    returns a non-finite value is kept out of ``values`` and listed in
    ``invalid``.
    """
    from .render import RenderStyle, framing_camera, render_frames

    _check_pair(pred, gt)
    idx = list(range(len(gt))) if frames is None else sorted(int(i) for i in frames)
    p = pred.replace(roots=pred.roots[idx], rotations=pred.rotations[idx], keyframe_indices=(), context_length=0)
    g = gt.replace(roots=gt.roots[idx], rotations=gt.rotations[idx], keyframe_indices=(), context_length=0)
    mask = filter.joint_mask(joint_hierarchy_depths(gt.skeleton))

    values = {
        "l2q": l2q(p, g),
        "hl2q": hl2q(p, g, filter),
        "l2p": l2p(p, g),
        "npss": npss(p, g) if len(g) >= 2 else 0.0,
    }
    failures: dict[str, str] = {}
    invalid: list[str] = []
    style = style or RenderStyle()
    if cams is None:
        cams = [framing_camera(gt)]
    pairs = [(render_frames(p, cam, style), render_frames(g, cam, style)) for cam in cams]
    if pairs:
        values["ssim"] = float(np.mean([ssim(a, b) for pa, ga in pairs for a, b in zip(pa, ga)]))
    for name, fn in (registry or default_registry).items():
        try:
            v = float(np.mean([fn(pa, ga) for pa, ga in pairs])) if pairs else float("nan")
        except Exception as exc:  # plug-in failures must not affect other metrics
            failures[name] = f"{type(exc).__name__}: {exc}"
            continue
        if not math.isfinite(v):
            invalid.append(name)
            continue
        values[name] = v
    for k, v in list(values.items()):
        if not math.isfinite(v):
            invalid.append(k)
            del values[k]
    return MetricReport(values, (idx[0], idx[-1]) if idx else (0, -1),
                        [int(j) for j in np.flatnonzero(mask)], failures, invalid)
