"""Training-clip enumeration and the weighted joint-estimator dataset."""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .camera import CameraParams, project
from .errors import ConfigError, ContractError


@dataclass(frozen=True)
class ClipIndex:
    view: str
    frame_indices: tuple[int, ...]
    interval: int
    fps_tag: int


def gather_clips(num_views: int | Sequence[str], frames_per_view: int, k: int = 16,
                 intervals: Sequence[int] = (1, 2, 3), base_fps: int = 30) -> list[ClipIndex]:
    """Sliding-window clips of ``k`` frames at each stride, view-major.

    For every view and stride ``s`` a clip starts at each
    ``start in [0, frames_per_view - k*s]`` (inclusive). ``num_views`` may be a
    count or a sequence of view names.
    """
    views = [str(v) for v in range(num_views)] if isinstance(num_views, int) else list(num_views)
    if k < 2:
        raise ContractError("clips need at least two frames")
    clips = []
    for view in views:
        for s in intervals:
            if s <= 0:
                raise ContractError(f"interval must be positive, got {s}")
            if base_fps % s != 0:
                raise ContractError(f"base fps {base_fps} is not divisible by interval {s}")
            last_start = frames_per_view - k * s
            if last_start < 0:
                warnings.warn(f"interval {s} too large for {frames_per_view} frames; no clips",
                              stacklevel=2)
                continue
            for start in range(last_start + 1):
                clips.append(ClipIndex(view, tuple(start + i * s for i in range(k)), s, base_fps // s))
    return clips


@dataclass(frozen=True)
class ImageRef:
    """Pointer to a rendered frame: ``kind`` is ``context`` or ``keyframe``."""
    view: str
    kind: str
    index: int

    def relpath(self) -> str:
        from .render import frame_name
        return f"{self.kind}/{self.view}/{frame_name(self.index)}"


@dataclass(frozen=True)
class EstimatorSample:
    image: ImageRef
    view: str
    joints: np.ndarray
    target: np.ndarray
    multiplicity: int
    is_keyframe: bool


def assemble_estimator_dataset(context_frames: Mapping[str, Sequence[tuple[int, np.ndarray]]],
                               keyframes: Mapping[str, Sequence[tuple[int, np.ndarray]]],
                               cameras: Mapping[str, CameraParams], w: int = 3,
                               views_kept: Sequence[str] = ("front", "left", "right"),
                               allow_no_keyframes: bool = False) -> list[EstimatorSample]:
    """Build the estimator dataset from per-view ``(frame index, global joints)`` lists.

    Back-view frames are never kept. Keyframe samples carry multiplicity ``w``.
    An empty keyframe set is a configuration error unless
    ``allow_no_keyframes`` is set (the no-data-selection ablation).
    """
    if w < 1:
        raise ConfigError("keyframe weight w must be >= 1")
    if "back" in views_kept:
        raise ConfigError("back views must not be used for the joint estimator")
    n_kf = sum(len(v) for view, v in keyframes.items() if view in views_kept)
    if n_kf == 0 and not allow_no_keyframes:
        raise ConfigError("no keyframe samples; pass allow_no_keyframes=True for the ablation")
    samples = []
    for kind, source, mult in (("context", context_frames, 1), ("keyframe", keyframes, w)):
        for view in views_kept:
            if view not in source:
                continue
            if view not in cameras:
                raise ConfigError(f"no camera for view {view!r}")
            for index, joints in source[view]:
                joints = np.asarray(joints, dtype=float)
                target = project(joints, cameras[view])
                samples.append(EstimatorSample(ImageRef(view, kind, int(index)), view, joints,
                                               target, mult, kind == "keyframe"))
    return samples


def expand_weighted(samples: Sequence[EstimatorSample]) -> list[EstimatorSample]:
    """The epoch list: each sample repeated ``multiplicity`` times."""
    return [s for s in samples for _ in range(s.multiplicity)]


def dataset_manifest(clips: Sequence[ClipIndex], samples: Sequence[EstimatorSample]) -> dict:
    return {
        "clips": [
            {"view": c.view, "frames": list(c.frame_indices), "interval": c.interval, "fps": c.fps_tag}
            for c in clips
        ],
        "samples": [
            {"image": s.image.relpath(), "view": s.view, "kind": s.image.kind, "index": s.image.index,
             "multiplicity": s.multiplicity, "joints": s.joints.tolist(), "target": s.target.tolist()}
            for s in samples
        ],
    }


def write_dataset_manifest(path, clips, samples) -> None:
    Path(path).write_text(json.dumps(dataset_manifest(clips, samples), indent=1) + "\n")


def read_dataset_manifest(path) -> tuple[list[ClipIndex], list[EstimatorSample]]:
    data = json.loads(Path(path).read_text())
    clips = [ClipIndex(c["view"], tuple(c["frames"]), c["interval"], c["fps"]) for c in data["clips"]]
    samples = [
        EstimatorSample(ImageRef(s["view"], s["kind"], s["index"]), s["view"], np.asarray(s["joints"]),
                        np.asarray(s["target"]), s["multiplicity"], s["kind"] == "keyframe")
        for s in data["samples"]
    ]
    return clips, samples

