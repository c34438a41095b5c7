"""The bundled synthetic scene: a five-joint chain swinging in place.

The scene lasts five seconds at 30 fps. The first two seconds are context and
keyframes sit on every whole second after that (2, 3, 4 and 5 s). All joints
swing about one shared horizontal axis, so the chain stays in a vertical
plane. A stick figure cannot show twist about a bone, and keeping the motion
planar keeps the twist-free pose the natural solution when a pose is
recovered from images. The root only bobs vertically. The dominant
oscillation has a 2 s period so the context shows the whole pose cycle; a
slower, smaller component keeps later frames from being exact repeats.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from importlib import resources

import numpy as np

from .camera import CameraParams, VIEWS, named_view
from .motion import MotionSequence, Skeleton, motion_from_dict, quat_from_axis_angle
from .render import RenderStyle

TOY_SCENE_FILE = "toy_chain.json"

# (fast amplitude deg, fast phase, slow amplitude deg, slow phase) per joint
_SWING = {
    0: (16.0, 0.0, 4.0, 0.3),
    1: (26.0, 0.7, 5.0, 1.4),
    2: (30.0, 1.5, 6.0, 2.9),
    3: (24.0, 2.4, 5.0, 0.8),
}
FAST_PERIOD = 2.0
SLOW_PERIOD = 5.0
# every joint swings about this horizontal axis, so the chain moves in a
# vertical plane turned 30 degrees away from the front camera
SWING_YAW = math.radians(30.0)


def chain_skeleton(num_joints: int = 5, bone: float = 0.25) -> Skeleton:
    names = ["base"] + [f"link{j}" for j in range(1, num_joints)]
    parents = [None] + list(range(num_joints - 1))
    offsets = [[0.0, 0.0, 0.0]] + [[0.0, bone, 0.0]] * (num_joints - 1)
    return Skeleton(names, parents, np.array(offsets))


def _swing_quat(ax: float, az: float) -> np.ndarray:
    angle = math.hypot(ax, az)
    if angle == 0.0:
        return np.array([1.0, 0.0, 0.0, 0.0])
    return quat_from_axis_angle([ax / angle, 0.0, az / angle], angle)


def _wave(t: float, amp_fast, ph_fast, amp_slow, ph_slow) -> float:
    return math.radians(amp_fast * math.sin(2 * math.pi * t / FAST_PERIOD + ph_fast)
                        + amp_slow * math.sin(2 * math.pi * t / SLOW_PERIOD + ph_slow))


def chain_motion(seconds: float = 5.0, fps: int = 30, context_seconds: int = 2) -> MotionSequence:
    """Generate the toy chain motion with keyframes on whole seconds after the context."""
    sk = chain_skeleton()
    n = int(round(seconds * fps)) + 1
    roots = np.zeros((n, 3))
    rots = np.zeros((n, sk.num_joints, 4))
    rots[..., 0] = 1.0
    for i in range(n):
        t = i / fps
        roots[i, 1] = 0.03 * math.sin(2 * math.pi * t / FAST_PERIOD + 0.4)
        for j, wave in _SWING.items():
            a = _wave(t, *wave)
            rots[i, j] = _swing_quat(a * math.cos(SWING_YAW), a * math.sin(SWING_YAW))
    kf = list(range(context_seconds * fps, n, fps))
    return MotionSequence(sk, fps, roots, rots, kf, context_seconds * fps)


@dataclass
class ToyScene:
    motion: MotionSequence
    image_size: tuple[int, int] = (64, 64)
    style: RenderStyle = field(default_factory=lambda: RenderStyle(joint_radius=1.5, channels=3))
    margin: float = 1.15
    distance: float = 5.0

    @property
    def skeleton(self) -> Skeleton:
        return self.motion.skeleton

    @property
    def context_seconds(self) -> int:
        return self.motion.context_length // self.motion.fps

    def cameras(self, views=VIEWS) -> dict[str, CameraParams]:
        """Named-view cameras sharing one framing of the whole motion."""
        pts = self.motion.global_positions().reshape(-1, 3)
        lo, hi = pts.min(axis=0), pts.max(axis=0)
        center = 0.5 * (lo + hi)
        radius = float(np.max(np.linalg.norm(pts - center, axis=-1))) * self.margin
        scale = 0.5 * min(self.image_size) / radius
        return {v: named_view(v, center, self.distance, self.image_size, scale, radius) for v in views}

    def held_out_indices(self) -> list[int]:
        """Frames after the context that are not keyframes."""
        kf = set(self.motion.keyframe_indices)
        return [i for i in range(self.motion.context_length, len(self.motion)) if i not in kf]


def load_toy_scene() -> ToyScene:
    """The bundled scene, read from the package data."""
    text = resources.files("inbetween").joinpath("data", TOY_SCENE_FILE).read_text()
    return ToyScene(motion_from_dict(json.loads(text)))
