"""Affine (weak-perspective) camera shared by rendering, estimator targets and mimicking.

Screen coordinates are continuous pixels: the image spans ``[0, width) x
[0, height)``, pixel ``i`` covers ``[i, i + 1)`` and the optical axis lands on
``(width / 2, height / 2)``. ``y`` grows downward. Depth is normalized to
``[-1, 1]`` over the camera's ``depth_range`` and then denormalized by half the
image height so that all three screen coordinates share pixel units.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np
import torch

from .errors import ConfigError, ContractError
from .motion import quat_canonicalize, quat_from_axis_angle, quat_to_matrix

VIEWS = ("front", "left", "right", "back")

# yaw of the camera's viewing direction about world +y; 'front' looks along +z
_VIEW_YAW = {"front": 0.0, "left": math.pi / 2, "right": -math.pi / 2, "back": math.pi}


@dataclass
class CameraParams:
    rotation: np.ndarray
    translation: np.ndarray
    image_width: int
    image_height: int
    scale: float
    depth_range: tuple[float, float]
    view: str = "custom"
    clamped: int = field(default=0, compare=False)

    def __post_init__(self):
        self.rotation = quat_canonicalize(np.asarray(self.rotation, dtype=float).reshape(4))
        self.translation = np.asarray(self.translation, dtype=float).reshape(3)
        if self.image_width <= 0 or self.image_height <= 0:
            raise ContractError("image dimensions must be positive")
        if self.scale <= 0:
            raise ContractError("scale must be positive")
        near, far = (float(v) for v in self.depth_range)
        if not far > near:
            raise ContractError("depth_range must satisfy near < far")
        self.depth_range = (near, far)

    @property
    def matrix(self) -> np.ndarray:
        return quat_to_matrix(self.rotation)

    @property
    def depth_scale(self) -> float:
        return self.image_height / 2.0

    def to_dict(self) -> dict:
        return {
            "view": self.view,
            "rotation": self.rotation.tolist(),
            "translation": self.translation.tolist(),
            "image": [self.image_width, self.image_height],
            "scale": self.scale,
            "depth_range": list(self.depth_range),
        }


def project_tensor(points: torch.Tensor, cam: CameraParams) -> torch.Tensor:
    """Differentiable projection of ``(..., 3)`` points to ``(..., 3)`` screen coordinates."""
    rot = torch.as_tensor(cam.matrix, dtype=points.dtype)
    trans = torch.as_tensor(cam.translation, dtype=points.dtype)
    q = points @ rot.T + trans
    near, far = cam.depth_range
    x = cam.scale * q[..., 0] + cam.image_width / 2.0
    y = -cam.scale * q[..., 1] + cam.image_height / 2.0
    ndc = (2.0 * (q[..., 2] - near) / (far - near) - 1.0).clamp(-1.0, 1.0)
    return torch.stack([x, y, ndc * cam.depth_scale], dim=-1)


def project(points, cam: CameraParams) -> np.ndarray:
    """Project global points ``(n, 3)`` to rows of ``(x, y, depth)`` in pixels.

    Points outside the camera's depth range are clamped to it; each clamp
    increments ``cam.clamped`` and emits a warning.
    """
    pts = np.asarray(points, dtype=float)
    near, far = cam.depth_range
    qz = pts @ cam.matrix[2] + cam.translation[2]
    outside = int(np.count_nonzero((qz < near) | (qz > far)))
    if outside:
        cam.clamped += outside
        warnings.warn(f"{outside} point(s) outside depth range {cam.depth_range}; clamped",
                      stacklevel=2)
    out = project_tensor(torch.as_tensor(pts, dtype=torch.float64), cam)
    return out.numpy()


def ndc_depth(points, cam: CameraParams) -> np.ndarray:
    return project(points, cam)[..., 2] / cam.depth_scale


def named_view(name: str, subject_center=(0.0, 0.0, 0.0), distance: float = 3.0,
               image_size=(64, 64), scale: float = 20.0, radius: float = 1.5) -> CameraParams:
    """One of the four canonical views, placed ``distance`` from ``subject_center``.

    The depth range is ``[distance - radius, distance + radius]`` so the subject
    center sits at NDC depth 0.
    """
    if name not in _VIEW_YAW:
        raise ConfigError(f"unknown view {name!r}; expected one of {VIEWS}")
    if radius <= 0 or distance <= 0:
        raise ConfigError("distance and radius must be positive")
    yaw = _VIEW_YAW[name]
    center = np.asarray(subject_center, dtype=float)
    forward = np.array([math.sin(yaw), 0.0, math.cos(yaw)])
    position = center - distance * forward
    # world->camera is the inverse of the camera's yaw
    rotation = quat_from_axis_angle([0.0, 1.0, 0.0], -yaw)
    translation = -quat_to_matrix(rotation) @ position
    w, h = image_size
    return CameraParams(rotation, translation, int(w), int(h), float(scale),
                        (distance - radius, distance + radius), view=name)


def camera_from_config(block: dict, subject_center=(0.0, 0.0, 0.0)) -> CameraParams:
    """Build a camera from a run-config block ``{view, distance, scale, image, depth_range}``."""
    try:
        view = block["view"]
        distance = float(block["distance"])
        scale = float(block["scale"])
        w, h = block["image"]
    except (KeyError, TypeError, ValueError) as exc:
        raise ConfigError(f"camera block incomplete: {exc}") from None
    cam = named_view(view, subject_center, distance, (w, h), scale)
    if "depth_range" in block:
        cam.depth_range = tuple(float(v) for v in block["depth_range"])
        if not cam.depth_range[1] > cam.depth_range[0]:
            raise ConfigError("depth_range must satisfy near < far")
    return cam
