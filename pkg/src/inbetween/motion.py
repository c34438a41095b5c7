"""Skeletons, poses, forward kinematics and quaternion interpolation.

Conventions
-----------
- Quaternions are stored ``(w, x, y, z)`` and canonicalized to ``w >= 0`` when a
  :class:`Pose` or :class:`MotionSequence` is built, so that the double cover
  never shows up in distances.
- Rotations are local (relative to the parent joint). Offsets are the rest-pose
  translation of a joint in its parent's frame and live on the skeleton, not
  on individual frames.
- Joints are topologically ordered: the root is joint 0 and every parent index
  is smaller than its child's index.

Both a numpy implementation (:func:`fk`, :func:`fk_frames`) and a batched torch
implementation (:func:`fk_tensor`) of forward kinematics are provided; the
latter is what the differentiable optimizers use.
"""

from __future__ import annotations

import json
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
from scipy.ndimage import gaussian_filter1d

from .errors import ContractError, MotionParseError, UnsupportedRateError

UNIT_TOL = 1e-6
LOAD_DRIFT_TOL = 1e-4  # on the squared norm


# ---------------------------------------------------------------------------
# quaternion helpers (numpy)
# ---------------------------------------------------------------------------

def quat_identity(shape=()) -> np.ndarray:
    q = np.zeros(tuple(shape) + (4,))
    q[..., 0] = 1.0
    return q


def quat_from_axis_angle(axis, angle) -> np.ndarray:
    axis = np.asarray(axis, dtype=float)
    axis = axis / np.linalg.norm(axis, axis=-1, keepdims=True)
    half = 0.5 * np.asarray(angle, dtype=float)[..., None]
    return np.concatenate([np.cos(half), np.sin(half) * axis], axis=-1)


def quat_normalize(q) -> np.ndarray:
    q = np.asarray(q, dtype=float)
    n = np.linalg.norm(q, axis=-1, keepdims=True)
    if np.any(n == 0):
        raise ContractError("zero-norm quaternion")
    return q / n


def quat_canonicalize(q) -> np.ndarray:
    q = np.array(q, dtype=float)
    flip = q[..., 0] < 0
    q[flip] = -q[flip]
    return q


def quat_mul(a, b) -> np.ndarray:
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    aw, ax, ay, az = np.moveaxis(a, -1, 0)
    bw, bx, by, bz = np.moveaxis(b, -1, 0)
    return np.stack([
        aw * bw - ax * bx - ay * by - az * bz,
        aw * bx + ax * bw + ay * bz - az * by,
        aw * by - ax * bz + ay * bw + az * bx,
        aw * bz + ax * by - ay * bx + az * bw,
    ], axis=-1)


def quat_to_matrix(q) -> np.ndarray:
    """Rotation matrices for (unit) quaternions of shape ``(..., 4)``."""
    q = np.asarray(q, dtype=float)
    w, x, y, z = np.moveaxis(q, -1, 0)
    m = np.stack([
        1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y),
        2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x),
        2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y),
    ], axis=-1)
    return m.reshape(q.shape[:-1] + (3, 3))


def quat_angle(a, b) -> np.ndarray:
    """Rotation angle (radians) between two unit quaternions."""
    d = np.abs(np.sum(np.asarray(a) * np.asarray(b), axis=-1))
    return 2.0 * np.arccos(np.clip(d, -1.0, 1.0))


def slerp(q0, q1, t) -> np.ndarray:
    """Spherical linear interpolation along the shorter arc.

    Broadcasts over leading dimensions of ``q0``/``q1`` and over ``t``.
    ``t == 0`` returns ``q0`` exactly.
    """
    q0 = np.asarray(q0, dtype=float)
    q1 = np.asarray(q1, dtype=float)
    n0 = np.linalg.norm(q0, axis=-1)
    n1 = np.linalg.norm(q1, axis=-1)
    if np.any(n0 == 0) or np.any(n1 == 0):
        raise ContractError("slerp of a zero-norm quaternion")
    t = np.asarray(t, dtype=float)[..., None]

    dot = np.sum(q0 * q1, axis=-1, keepdims=True)
    q1 = np.where(dot < 0, -q1, q1)
    dot = np.abs(dot)

    theta = np.arccos(np.clip(dot, -1.0, 1.0))
    sin_theta = np.sin(theta)
    near = sin_theta < 1e-8
    safe = np.where(near, 1.0, sin_theta)
    w0 = np.where(near, 1.0 - t, np.sin((1.0 - t) * theta) / safe)
    w1 = np.where(near, t, np.sin(t * theta) / safe)
    out = w0 * q0 + w1 * q1
    out = out / np.linalg.norm(out, axis=-1, keepdims=True)
    return np.where(t == 0, np.broadcast_to(q0, out.shape), out)


# ---------------------------------------------------------------------------
# data types
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Skeleton:
    names: tuple[str, ...]
    parents: tuple[int | None, ...]
    offsets: np.ndarray = field(repr=False)

    def __post_init__(self):
        offsets = np.asarray(self.offsets, dtype=float).reshape(-1, 3)
        object.__setattr__(self, "names", tuple(self.names))
        object.__setattr__(self, "parents", tuple(None if p is None else int(p) for p in self.parents))
        object.__setattr__(self, "offsets", offsets)
        n = len(self.names)
        if n == 0:
            raise ContractError("skeleton has no joints")
        if len(self.parents) != n or offsets.shape[0] != n:
            raise ContractError("names, parents and offsets must have equal length")
        roots = [j for j, p in enumerate(self.parents) if p is None]
        if roots != [0]:
            raise ContractError(f"exactly one root at index 0 expected, got roots {roots}")
        for j, p in enumerate(self.parents[1:], start=1):
            if not 0 <= p < j:
                raise ContractError(f"joint {j} has parent {p}; parents must precede children")
        # acyclicity, checked independently of the ordering rule
        for j in range(n):
            seen = set()
            k = j
            while k is not None:
                if k in seen:
                    raise ContractError(f"cycle through joint {j}")
                seen.add(k)
                k = self.parents[k]

    @property
    def num_joints(self) -> int:
        return len(self.names)

    @property
    def parent_array(self) -> np.ndarray:
        """Parents as integers with ``-1`` for the root."""
        return np.array([-1 if p is None else p for p in self.parents])

    def __eq__(self, other):
        if not isinstance(other, Skeleton):
            return NotImplemented
        return (self.names == other.names and self.parents == other.parents
                and np.array_equal(self.offsets, other.offsets))

    def __hash__(self):
        return hash((self.names, self.parents, self.offsets.tobytes()))

    def height(self) -> float:
        """Largest bounding-box extent of the rest pose (scene units)."""
        rest = fk(self, Pose(np.zeros(3), quat_identity((self.num_joints,))))
        extent = float(np.max(rest.max(axis=0) - rest.min(axis=0)))
        return extent if extent > 0 else 1.0


@dataclass(frozen=True)
class Pose:
    root: np.ndarray
    rotations: np.ndarray

    def __post_init__(self):
        root = np.array(self.root, dtype=float).reshape(3)
        rot = np.array(self.rotations, dtype=float).reshape(-1, 4)
        norms = np.linalg.norm(rot, axis=-1)
        if np.any(np.abs(norms - 1.0) > UNIT_TOL):
            raise ContractError(f"non-unit quaternion (norms {norms})")
        object.__setattr__(self, "root", root)
        object.__setattr__(self, "rotations", quat_canonicalize(rot))

    def __eq__(self, other):
        if not isinstance(other, Pose):
            return NotImplemented
        return np.array_equal(self.root, other.root) and np.array_equal(self.rotations, other.rotations)

    __hash__ = None


class MotionSequence:
    """A skeleton animated over time.

    Poses are held as two arrays, ``roots`` ``(T, 3)`` and ``rotations``
    ``(T, J, 4)``; :attr:`poses` materializes them as :class:`Pose` objects.
    """

    def __init__(self, skeleton: Skeleton, fps: int, roots, rotations,
                 keyframe_indices: Sequence[int] = (), context_length: int = 0):
        roots = np.array(roots, dtype=float).reshape(-1, 3)
        rotations = np.array(rotations, dtype=float).reshape(roots.shape[0], -1, 4)
        if rotations.shape[1] != skeleton.num_joints:
            raise ContractError(
                f"rotations carry {rotations.shape[1]} joints, skeleton has {skeleton.num_joints}")
        norms = np.linalg.norm(rotations, axis=-1)
        if np.any(np.abs(norms - 1.0) > UNIT_TOL):
            raise ContractError("non-unit quaternion in motion")
        if int(fps) != fps or fps <= 0:
            raise ContractError(f"fps must be a positive integer, got {fps}")
        kf = [int(k) for k in keyframe_indices]
        if kf != sorted(set(kf)):
            raise ContractError("keyframe indices must be sorted and unique")
        if kf and (kf[0] < 0 or kf[-1] >= roots.shape[0]):
            raise ContractError("keyframe index out of range")
        if not 0 <= context_length <= roots.shape[0]:
            raise ContractError("context_length exceeds the number of frames")
        self.skeleton = skeleton
        self.fps = int(fps)
        self.roots = roots
        self.rotations = quat_canonicalize(rotations)
        self.keyframe_indices = kf
        self.context_length = int(context_length)

    @classmethod
    def from_poses(cls, skeleton, fps, poses: Sequence[Pose], keyframe_indices=(), context_length=0):
        roots = np.stack([p.root for p in poses]) if poses else np.zeros((0, 3))
        rots = (np.stack([p.rotations for p in poses]) if poses
                else np.zeros((0, skeleton.num_joints, 4)))
        return cls(skeleton, fps, roots, rots, keyframe_indices, context_length)

    def __len__(self):
        return self.roots.shape[0]

    def pose(self, i: int) -> Pose:
        return Pose(self.roots[i], self.rotations[i])

    @property
    def poses(self) -> list[Pose]:
        return [self.pose(i) for i in range(len(self))]

    def replace(self, **changes) -> "MotionSequence":
        kw = dict(skeleton=self.skeleton, fps=self.fps, roots=self.roots, rotations=self.rotations,
                  keyframe_indices=self.keyframe_indices, context_length=self.context_length)
        kw.update(changes)
        return MotionSequence(**kw)

    def global_positions(self) -> np.ndarray:
        return fk_frames(self.skeleton, self.roots, self.rotations)

    def __eq__(self, other):
        if not isinstance(other, MotionSequence):
            return NotImplemented
        return (self.skeleton == other.skeleton and self.fps == other.fps
                and np.array_equal(self.roots, other.roots)
                and np.array_equal(self.rotations, other.rotations)
                and self.keyframe_indices == other.keyframe_indices
                and self.context_length == other.context_length)

    __hash__ = None

    def __repr__(self):
        return (f"MotionSequence(joints={self.skeleton.num_joints}, frames={len(self)}, fps={self.fps}, "
                f"keyframes={self.keyframe_indices}, context_length={self.context_length})")


# ---------------------------------------------------------------------------
# kinematics
# ---------------------------------------------------------------------------

def fk_frames(skeleton: Skeleton, roots, rotations) -> np.ndarray:
    """Global joint positions for ``(T, 3)`` roots and ``(T, J, 4)`` rotations."""
    roots = np.asarray(roots, dtype=float)
    rotations = np.asarray(rotations, dtype=float)
    if rotations.shape[-2] != skeleton.num_joints:
        raise ContractError(
            f"pose has {rotations.shape[-2]} joints, skeleton has {skeleton.num_joints}")
    local = quat_to_matrix(rotations)
    glob_r = np.empty_like(local)
    glob_p = np.empty(rotations.shape[:-1] + (3,))
    for j, p in enumerate(skeleton.parents):
        if p is None:
            glob_r[..., j, :, :] = local[..., j, :, :]
            glob_p[..., j, :] = roots
        else:
            glob_r[..., j, :, :] = glob_r[..., p, :, :] @ local[..., j, :, :]
            glob_p[..., j, :] = (glob_r[..., p, :, :] @ skeleton.offsets[j]) + glob_p[..., p, :]
    return glob_p


def fk(skeleton: Skeleton, pose: Pose) -> np.ndarray:
    """Global joint positions ``(J, 3)`` of a single pose, in joint order."""
    if pose.rotations.shape[0] != skeleton.num_joints:
        raise ContractError(
            f"pose has {pose.rotations.shape[0]} joints, skeleton has {skeleton.num_joints}")
    return fk_frames(skeleton, pose.root, pose.rotations)


def quat_to_matrix_tensor(q: torch.Tensor) -> torch.Tensor:
    w, x, y, z = q.unbind(-1)
    m = torch.stack([
        1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y),
        2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x),
        2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y),
    ], dim=-1)
    return m.reshape(q.shape[:-1] + (3, 3))


def fk_tensor(parents: Sequence[int | None], offsets: torch.Tensor,
              root: torch.Tensor, quats: torch.Tensor) -> torch.Tensor:
    """Differentiable batched FK: ``root (..., 3)``, ``quats (..., J, 4)`` -> ``(..., J, 3)``.

    Quaternions are normalized internally so unconstrained 4-vectors can be
    optimized directly.
    """
    quats = quats / quats.norm(dim=-1, keepdim=True)
    local = quat_to_matrix_tensor(quats)
    rots: list[torch.Tensor] = []
    pos: list[torch.Tensor] = []
    for j, p in enumerate(parents):
        if p is None or p < 0:
            rots.append(local[..., j, :, :])
            pos.append(root)
        else:
            rots.append(rots[p] @ local[..., j, :, :])
            pos.append((rots[p] @ offsets[j].unsqueeze(-1)).squeeze(-1) + pos[p])
    return torch.stack(pos, dim=-2)


def joint_hierarchy_depths(skeleton: Skeleton) -> list[int]:
    depths: list[int] = []
    for p in skeleton.parents:
        depths.append(0 if p is None else depths[p] + 1)
    return depths


# ---------------------------------------------------------------------------
# resampling
# ---------------------------------------------------------------------------

def upsample_motion(motion: MotionSequence, target_fps: int, sigma: float = 1.0,
                    truncate: float = 3.0) -> MotionSequence:
    """Resample to an integer multiple of the source frame rate.

    Root positions are linearly interpolated and then smoothed with a Gaussian
    (``sigma`` in target-rate frames, reflection padding); rotations are
    slerped between the bracketing source frames. Keyframes keep their source
    values exactly at their mapped indices.
    """
    if target_fps % motion.fps != 0:
        raise UnsupportedRateError(f"{target_fps} fps is not a multiple of {motion.fps} fps")
    ratio = target_fps // motion.fps
    n_src = len(motion)
    if n_src == 0:
        raise ContractError("cannot upsample an empty motion")
    n_out = (n_src - 1) * ratio + 1

    src_pos = np.arange(n_out) / ratio
    i0 = np.minimum(np.floor(src_pos).astype(int), n_src - 1)
    i1 = np.minimum(i0 + 1, n_src - 1)
    frac = src_pos - i0

    roots = (1.0 - frac)[:, None] * motion.roots[i0] + frac[:, None] * motion.roots[i1]
    t = np.broadcast_to(frac[:, None], (n_out, motion.skeleton.num_joints))
    rots = slerp(motion.rotations[i0], motion.rotations[i1], t)

    if n_out > 1:
        smooth = gaussian_filter1d(roots, sigma=sigma, axis=0, mode="reflect", truncate=truncate)
    else:
        smooth = roots.copy()
    keyframes = [k * ratio for k in motion.keyframe_indices]
    for k_src, k in zip(motion.keyframe_indices, keyframes):
        smooth[k] = motion.roots[k_src]
        rots[k] = motion.rotations[k_src]

    ctx = (motion.context_length - 1) * ratio + 1 if motion.context_length > 0 else 0
    return MotionSequence(motion.skeleton, target_fps, smooth, rots, keyframes, ctx)


def decimate(motion: MotionSequence, ratio: int) -> MotionSequence:
    """Take every ``ratio``-th frame (inverse of :func:`upsample_motion` on the grid)."""
    idx = np.arange(0, len(motion), ratio)
    keep = {int(i): n for n, i in enumerate(idx)}
    kf = [keep[k] for k in motion.keyframe_indices if k in keep]
    ctx = len([i for i in idx if i < motion.context_length])
    fps = motion.fps // ratio if motion.fps % ratio == 0 else motion.fps
    return MotionSequence(motion.skeleton, fps, motion.roots[idx], motion.rotations[idx], kf, ctx)


# ---------------------------------------------------------------------------
# JSON persistence
# ---------------------------------------------------------------------------

def motion_to_dict(motion: MotionSequence) -> dict:
    sk = motion.skeleton
    return {
        "fps": motion.fps,
        "skeleton": [
            {"name": n, "parent": p, "offset": [float(v) for v in o]}
            for n, p, o in zip(sk.names, sk.parents, sk.offsets)
        ],
        "frames": [
            {"root": [float(v) for v in r], "rotations": [[float(v) for v in q] for q in rot]}
            for r, rot in zip(motion.roots, motion.rotations)
        ],
        "keyframes": list(motion.keyframe_indices),
        "context_length": motion.context_length,
    }


def _require(obj, key, where):
    if not isinstance(obj, dict) or key not in obj:
        raise MotionParseError(f"missing key {key!r} in {where}")
    return obj[key]


def _vector(value, n, where):
    try:
        arr = np.asarray(value, dtype=float)
    except (TypeError, ValueError) as exc:
        raise MotionParseError(f"{where}: not numeric ({exc})") from None
    if arr.shape != (n,):
        raise MotionParseError(f"{where}: expected {n} numbers, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise MotionParseError(f"{where}: non-finite value")
    return arr


def motion_from_dict(data: dict) -> MotionSequence:
    fps = _require(data, "fps", "document")
    joints = _require(data, "skeleton", "document")
    frames = _require(data, "frames", "document")
    if not isinstance(joints, list):
        raise MotionParseError("'skeleton' must be a list of joints")
    if not isinstance(frames, list):
        raise MotionParseError("'frames' must be a list")
    names, parents, offsets = [], [], []
    for j, jd in enumerate(joints):
        where = f"skeleton[{j}]"
        names.append(str(_require(jd, "name", where)))
        parents.append(_require(jd, "parent", where))
        offsets.append(_vector(_require(jd, "offset", where), 3, f"{where}.offset"))
    try:
        skeleton = Skeleton(names, parents, np.array(offsets).reshape(-1, 3))
    except (ContractError, TypeError) as exc:
        raise MotionParseError(f"skeleton: {exc}") from None

    nj = skeleton.num_joints
    roots = np.zeros((len(frames), 3))
    rots = np.zeros((len(frames), nj, 4))
    max_drift = 0.0
    for i, fd in enumerate(frames):
        where = f"frames[{i}]"
        roots[i] = _vector(_require(fd, "root", where), 3, f"{where}.root")
        rl = _require(fd, "rotations", where)
        if not isinstance(rl, list) or len(rl) != nj:
            raise MotionParseError(f"{where}.rotations: expected {nj} quaternions")
        for j, q in enumerate(rl):
            q = _vector(q, 4, f"{where}.rotations[{j}]")
            n = np.linalg.norm(q)
            if n == 0:
                raise MotionParseError(f"{where}.rotations[{j}]: zero quaternion")
            max_drift = max(max_drift, abs(n * n - 1.0))
            # leave exact-enough quaternions untouched so save/load round-trips bitwise
            rots[i, j] = q if abs(n - 1.0) <= 1e-12 else q / n
    if max_drift > LOAD_DRIFT_TOL:
        warnings.warn(f"squared quaternion norms drifted by up to {max_drift:.2e}; re-normalized on load",
                      stacklevel=3)
    try:
        return MotionSequence(skeleton, int(fps), roots, rots,
                              data.get("keyframes", []), int(data.get("context_length", 0)))
    except ContractError as exc:
        raise MotionParseError(str(exc)) from None


def save_motion(motion: MotionSequence, path) -> None:
    Path(path).write_text(json.dumps(motion_to_dict(motion), indent=1) + "\n")


def load_motion(path) -> MotionSequence:
    text = Path(path).read_text()
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise MotionParseError(f"{path}: line {exc.lineno} column {exc.colno}: {exc.msg}") from None
    return motion_from_dict(data)


def rotation_angle_deg(q) -> float:
    """Rotation angle of a single quaternion in degrees."""
    return math.degrees(float(quat_angle(q, quat_identity())))
