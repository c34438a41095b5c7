"""Recover a motion from a video of it by inward, per-frame optimization.

Between two keyframes the frames next to the keyframes are solved first and
the solver walks towards the middle, each frame starting from its already
solved neighbour. A frame's objective adds four terms:

* squared pixel distance between the projected pose joints and the joints the
  scene estimator reads from the video frame (``x``, ``y`` and depth);
* ``lambda_img`` times the squared luminance difference between the rendered
  pose and the video frame;
* ``lambda_pos`` times the squared distance of the root from the straight
  line between the two keyframe roots;
* ``lambda_rot`` times the squared quaternion difference to the neighbour the
  frame was initialized from.

All norms are plain sums of squares. Frames of the same round never depend on
each other, so they are optimized together in batches.
"""

from __future__ import annotations

import csv
import math
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np
import torch

from .camera import CameraParams, project_tensor
from .errors import ConfigError, ContractError
from .motion import MotionSequence, Skeleton, fk_tensor, quat_canonicalize, slerp
from .render import RenderStyle, luminance, render_screen


@dataclass
class MimicConfig:
    lambda_img: float = 50.0
    lambda_pos: float = 7000.0
    lambda_rot: float = 30000.0
    steps: int = 100
    batch_size: int = 6
    views: int = 1
    lr_root: float = 1e-2
    lr_rot: float = 1e-2
    optimizer: str = "adam"
    divergence_factor: float = 10.0

    def __post_init__(self):
        if min(self.lambda_img, self.lambda_pos, self.lambda_rot) < 0:
            raise ConfigError("loss weights must be non-negative")
        if self.steps <= 0 or self.batch_size <= 0:
            raise ConfigError("steps and batch_size must be positive")
        if self.optimizer not in ("adam", "sgd"):
            raise ConfigError(f"unknown optimizer {self.optimizer!r}")
        if self.views != 1:
            raise ConfigError("mimicking runs in a single view")


@dataclass
class FrameTask:
    index: int
    init_from: int | tuple[int, int]
    p_intp: np.ndarray
    r_prev: np.ndarray
    init_root: np.ndarray
    init_rotations: np.ndarray
    round: int = 0


def inward_schedule(k1: int, k2: int) -> list[tuple[int, ...]]:
    """Rounds of frame indices between two keyframes, outermost first.

    Round ``f`` holds ``(k1 + f, k2 - f)`` while ``k1 + f < k2 - f``; if the two
    meet, the middle frame is a final single-frame round.
    """
    rounds: list[tuple[int, ...]] = []
    f = 1
    while k1 + f < k2 - f:
        rounds.append((k1 + f, k2 - f))
        f += 1
    if k1 + f == k2 - f:
        rounds.append((k1 + f,))
    return rounds


def regularizer_targets(j: int, k1: int, k2: int, root_k1, root_k2, neighbor_rotations) -> tuple[np.ndarray, np.ndarray]:
    """``(P_intp, R_prev)`` for frame ``j`` strictly between keyframes ``k1 < k2``.

    ``neighbor_rotations`` are the rotations of the already solved frame
    adjacent to ``j`` on its own side (the keyframe itself in the first round).
    """
    if not k1 < j < k2:
        raise ContractError(f"frame {j} is not strictly between keyframes {k1} and {k2}")
    a = (j - k1) / (k2 - k1)
    p = (1.0 - a) * np.asarray(root_k1, dtype=float) + a * np.asarray(root_k2, dtype=float)
    return p, np.asarray(neighbor_rotations, dtype=float).copy()


# ---------------------------------------------------------------------------
# objective
# ---------------------------------------------------------------------------

def _luma(img: torch.Tensor) -> torch.Tensor:
    """``(B, C, H, W)`` -> ``(B, H, W)`` luminance."""
    if img.shape[1] == 1:
        return img[:, 0]
    w = torch.tensor([0.299, 0.587, 0.114], dtype=img.dtype)
    return torch.einsum("bchw,c->bhw", img, w)


def mimic_loss(root: torch.Tensor, quats: torch.Tensor, skeleton: Skeleton, cam: CameraParams,
               style: RenderStyle, target_joints: torch.Tensor, target_luma: torch.Tensor,
               p_intp: torch.Tensor, r_prev: torch.Tensor, config: MimicConfig) -> tuple[torch.Tensor, dict]:
    """Per-frame objective for a batch: returns ``(B,)`` totals and each ``(B,)`` term.

    ``quats`` may be unnormalized; they are normalized before use.
    """
    q = quats / quats.norm(dim=-1, keepdim=True)
    offsets = torch.as_tensor(skeleton.offsets, dtype=root.dtype)
    pts = fk_tensor(skeleton.parents, offsets, root, q)
    screen = project_tensor(pts, cam)
    joint = ((screen - target_joints) ** 2).sum(dim=(-1, -2))
    terms = {"joint": joint}
    total = joint
    if config.lambda_img:
        img = render_screen(screen, skeleton.parents, style, cam.image_width, cam.image_height)
        image = ((_luma(img) - target_luma) ** 2).sum(dim=(-1, -2))
        terms["image"] = image
        total = total + config.lambda_img * image
    pos = ((root - p_intp) ** 2).sum(-1)
    rot = ((q - r_prev) ** 2).sum(dim=(-1, -2))
    terms["pos"] = pos
    terms["rot"] = rot
    total = total + config.lambda_pos * pos + config.lambda_rot * rot
    return total, terms


@dataclass
class FrameResult:
    index: int
    root: np.ndarray
    rotations: np.ndarray
    initial_loss: float
    best_loss: float
    terms: dict
    failed: bool = False
    reason: str = ""
    round: int = 0
    batch: int = 0


def mimic_batch(tasks: Sequence[FrameTask], skeleton: Skeleton, cam: CameraParams, style: RenderStyle,
                target_joints: np.ndarray, target_images: np.ndarray, config: MimicConfig,
                dtype=torch.float64) -> list[FrameResult]:
    """Optimize a batch of independent frame tasks; returns the best iterate of each.

    ``target_joints`` is ``(B, J, 3)`` and ``target_images`` ``(B, H, W[, 3])``
    in task order. A task whose loss becomes non-finite or exceeds
    ``divergence_factor`` times its initial loss is frozen and returned at its
    initialization with ``failed`` set.
    """
    b = len(tasks)
    root = torch.tensor(np.stack([t.init_root for t in tasks]), dtype=dtype, requires_grad=True)
    quats = torch.tensor(np.stack([t.init_rotations for t in tasks]), dtype=dtype, requires_grad=True)
    tj = torch.as_tensor(np.asarray(target_joints), dtype=dtype)
    tl = torch.as_tensor(luminance(np.asarray(target_images)), dtype=dtype)
    pi = torch.as_tensor(np.stack([t.p_intp for t in tasks]), dtype=dtype)
    rp = torch.as_tensor(np.stack([t.r_prev for t in tasks]), dtype=dtype)
    params = [{"params": [root], "lr": config.lr_root}, {"params": [quats], "lr": config.lr_rot}]
    opt = torch.optim.Adam(params) if config.optimizer == "adam" else torch.optim.SGD(params)

    best_root = root.detach().clone()
    best_quat = quats.detach().clone()
    best = torch.full((b,), math.inf, dtype=dtype)
    best_terms: dict[str, torch.Tensor] = {}
    initial = None
    active = torch.ones(b, dtype=torch.bool)
    reasons = [""] * b

    for step in range(config.steps + 1):
        total, terms = mimic_loss(root, quats, skeleton, cam, style, tj, tl, pi, rp, config)
        with torch.no_grad():
            if initial is None:
                initial = total.detach().clone()
                best_terms = {k: v.detach().clone() for k, v in terms.items()}
            bad = ~torch.isfinite(total) | (total > config.divergence_factor * initial)
            for n in torch.nonzero(bad & active).flatten().tolist():
                diverged = [k for k, v in terms.items() if not torch.isfinite(v[n])]
                reasons[n] = f"non-finite {diverged}" if diverged else "loss grew past the divergence bound"
            active &= ~bad
            improved = active & (total < best)
            best = torch.where(improved, total.detach(), best)
            best_root[improved] = root.detach()[improved]
            best_quat[improved] = quats.detach()[improved]
            for k, v in terms.items():
                best_terms[k][improved] = v.detach()[improved]
        if step == config.steps or not bool(active.any()):
            break
        opt.zero_grad()
        # masked sum: frozen tasks contribute no gradient
        torch.where(active, total, torch.zeros_like(total)).sum().backward()
        opt.step()
        with torch.no_grad():
            quats /= quats.norm(dim=-1, keepdim=True)

    results = []
    for n, t in enumerate(tasks):
        failed = bool(reasons[n])
        r = t.init_root if failed else best_root[n].numpy().copy()
        q = t.init_rotations if failed else best_quat[n].numpy().copy()
        q = quat_canonicalize(q / np.linalg.norm(q, axis=-1, keepdims=True))
        results.append(FrameResult(t.index, np.asarray(r, dtype=float), q, float(initial[n]),
                                   float(initial[n] if failed else best[n]),
                                   {k: float(v[n]) for k, v in best_terms.items()},
                                   failed, reasons[n], t.round))
    return results


def mimic_frame(task: FrameTask, skeleton, cam, style, target_joints, target_image,
                config: MimicConfig = MimicConfig()) -> FrameResult:
    """Single-frame convenience wrapper around :func:`mimic_batch`."""
    return mimic_batch([task], skeleton, cam, style, np.asarray(target_joints)[None],
                       np.asarray(target_image)[None], config)[0]


# ---------------------------------------------------------------------------
# sequence
# ---------------------------------------------------------------------------

@dataclass
class MimicResult:
    motion: MotionSequence
    frames: list[FrameResult]
    repetitions: int
    rounds: int
    config: dict = field(default_factory=dict)

    def write_trace(self, path) -> None:
        keys = sorted({k for f in self.frames for k in f.terms})
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["frame", "round", "batch", "initial_loss", "best_loss", *keys, "failed", "reason"])
            for f in sorted(self.frames, key=lambda r: r.index):
                w.writerow([f.index, f.round, f.batch, repr(f.initial_loss), repr(f.best_loss),
                            *(repr(f.terms.get(k, float("nan"))) for k in keys), int(f.failed), f.reason])


def plan_batches(keyframes: Sequence[int], batch_size: int) -> list[list[tuple[int, int, int, int]]]:
    """Batches of ``(frame, k1, k2, round)`` covering every keyframe interval.

    Rounds run in order; within a round, tasks from all intervals are chunked
    into batches of at most ``batch_size``.
    """
    per_pair = [(k1, k2, inward_schedule(k1, k2)) for k1, k2 in zip(keyframes[:-1], keyframes[1:])]
    n_rounds = max((len(r) for _, _, r in per_pair), default=0)
    batches = []
    for f in range(n_rounds):
        tasks = [(j, k1, k2, f + 1) for k1, k2, rounds in per_pair if f < len(rounds) for j in rounds[f]]
        for s in range(0, len(tasks), batch_size):
            batches.append(tasks[s:s + batch_size])
    return batches


def count_repetitions(total_seconds: int, context_seconds: int, fps: int, batch_size: int) -> int:
    """Number of optimization batches for keyframes every second after the context."""
    keyframes = [s * fps for s in range(context_seconds, total_seconds + 1)]
    return len(plan_batches(keyframes, batch_size))


def mimic_sequence(motion: MotionSequence, video: Sequence[np.ndarray], estimator, cam: CameraParams,
                   style: RenderStyle, config: MimicConfig = MimicConfig(),
                   target_joints: np.ndarray | None = None, dtype=torch.float64) -> MimicResult:
    """Fill every frame strictly between keyframes of ``motion`` from ``video``.

    ``motion`` and ``video`` share one frame grid; only keyframe (and context)
    poses of ``motion`` are read. ``video[i]`` may be ``None`` for frames that
    are not optimized. ``target_joints`` overrides the estimator (``(T, J, 3)``).
    """
    kf = list(motion.keyframe_indices)
    if len(kf) < 2:
        raise ContractError("mimicking needs at least two keyframes")
    if len(video) < len(motion):
        raise ContractError(f"video has {len(video)} frames but the motion has {len(motion)}")
    batches = plan_batches(kf, config.batch_size)
    needed = sorted(j for batch in batches for j, *_ in batch)
    for j in needed:
        if video[j] is None:
            raise ContractError(f"video frame {j} is missing")
    if target_joints is None:
        est = estimator.estimate_batch([video[j] for j in needed], ids=needed) if needed else np.zeros((0,))
        joints_by_frame = {j: est[n] for n, j in enumerate(needed)}
    else:
        joints_by_frame = {j: np.asarray(target_joints[j], dtype=float) for j in needed}

    roots = motion.roots.copy()
    rots = motion.rotations.copy()
    solved = set(kf)
    results: list[FrameResult] = []
    for b_idx, batch in enumerate(batches):
        tasks = []
        for j, k1, k2, rnd in batch:
            lo, hi = j - 1, j + 1
            if j - k1 == k2 - j:
                # middle frame: start between both neighbours, regularize towards the lower side
                init_root = 0.5 * (roots[lo] + roots[hi])
                init_rot = slerp(rots[lo], rots[hi], 0.5)
                src, neighbor = (lo, hi), lo
            elif j - k1 < k2 - j:
                init_root, init_rot, src, neighbor = roots[lo], rots[lo], lo, lo
            else:
                init_root, init_rot, src, neighbor = roots[hi], rots[hi], hi, hi
            if any(n not in solved for n in np.atleast_1d(src)):
                raise ContractError(f"frame {j} has no solved neighbour")
            p, r = regularizer_targets(j, k1, k2, motion.roots[k1], motion.roots[k2], rots[neighbor])
            tasks.append(FrameTask(j, src, p, r, np.array(init_root), np.array(init_rot), rnd))
        tj = np.stack([joints_by_frame[t.index] for t in tasks])
        ti = np.stack([np.asarray(video[t.index], dtype=float) for t in tasks])
        out = mimic_batch(tasks, motion.skeleton, cam, style, tj, ti, config, dtype)
        for res in out:
            res.batch = b_idx
            roots[res.index] = res.root
            rots[res.index] = res.rotations
            solved.add(res.index)
        results.extend(out)

    # keyframes and context are copied from the input untouched
    for k in kf:
        roots[k] = motion.roots[k]
        rots[k] = motion.rotations[k]
    rounds = max((t[3] for batch in batches for t in batch), default=0)
    result_motion = MotionSequence(motion.skeleton, motion.fps, roots, rots, kf, motion.context_length)
    return MimicResult(result_motion, results, len(batches), rounds, asdict(config))
