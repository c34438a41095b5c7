"""Context-guided two-stage video generation.

Guidance frames are injected by latent inpainting: after every reverse
diffusion step the latents of guided frames are overwritten by the forward
noised encoding of the guidance image at the current noise level. The final
replacement happens at ``t = 0`` where it pins the guided frames exactly.

The coarse stage walks 3-second windows at 5 fps one second at a time and
feeds every frame produced so far back in as guidance. The fine stage then
regenerates each second at 15 fps, guided by the coarse frames, keyframes and
context frames that fall inside it.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np
import torch

from .diffusion import Conditioning, ToyVideoBackend
from .errors import ContractError

COARSE_FPS = 5
FINE_FPS = 15
COARSE_WINDOW_SECONDS = 3
FINE_WINDOW_SECONDS = 1
DEFAULT_TEXT = "a rendered character moving in a plain scene"


@dataclass
class GuidanceSpec:
    """Guidance images keyed by output frame index within a segment."""
    frames: dict[int, np.ndarray] = field(default_factory=dict)

    def validate(self, num_frames: int) -> None:
        for n in self.frames:
            if not 0 <= n < num_frames:
                raise ContractError(f"guided index {n} outside segment [0, {num_frames - 1}]")

    def indices(self) -> list[int]:
        return sorted(self.frames)


def inpaint_replace(backend: ToyVideoBackend, z_t: torch.Tensor, guidance: Mapping[int, torch.Tensor],
                    t: int, generator: torch.Generator | None = None) -> torch.Tensor:
    """Overwrite guided frame latents with their encodings noised to level ``t``.

    ``guidance`` maps frame index to an already encoded latent frame. Frames not
    in ``guidance`` are returned bitwise unchanged.
    """
    for n in guidance:
        if not 0 <= n < z_t.shape[0]:
            raise ContractError(f"guided index {n} outside segment [0, {z_t.shape[0] - 1}]")
    if not guidance:
        return z_t
    out = z_t.clone()
    for n in sorted(guidance):
        out[n] = backend.forward_noise(guidance[n], t, generator)[0]
    return out


def generate_segment(backend: ToyVideoBackend, first_frame, last_frame, spec: GuidanceSpec | None = None,
                     fps: int = FINE_FPS, seed: int = 0, text: str = DEFAULT_TEXT) -> list[np.ndarray]:
    """Run one guided reverse-diffusion chain and decode its frames.

    The segment endpoints are always pinned to ``first_frame``/``last_frame``;
    a guidance entry at an endpoint must agree with them.
    """
    spec = spec or GuidanceSpec()
    n_frames = backend.frames
    spec.validate(n_frames)
    for idx, img in ((0, first_frame), (n_frames - 1, last_frame)):
        if idx in spec.frames and not np.array_equal(np.asarray(spec.frames[idx]), np.asarray(img)):
            raise ContractError(f"guidance at endpoint {idx} conflicts with the conditioning frame")
    images = dict(spec.frames)
    images[0] = first_frame
    images[n_frames - 1] = last_frame
    try:
        latents = {n: backend.encode(img) for n, img in images.items()}
        gen = torch.Generator().manual_seed(int(seed))
        shape = (n_frames, backend.cfg.latent_channels, backend.cfg.latent_size, backend.cfg.latent_size)
        z = torch.randn(shape, generator=gen)
        for t in range(backend.timesteps, 0, -1):
            z = backend.denoise_step(z, Conditioning(first_frame, last_frame, text, fps, t))
            z = inpaint_replace(backend, z, latents, t - 1, gen)
    except Exception as exc:
        raise RuntimeError(f"segment generation failed (fps={fps}, seed={seed}, "
                           f"guided={sorted(images)}): {exc}") from exc
    backend.segment_calls += 1
    return [backend.decode(z[n]) for n in range(n_frames)]


# ---------------------------------------------------------------------------
# plans
# ---------------------------------------------------------------------------

@dataclass
class SegmentPlan:
    start_seconds: int
    fps: int
    frame_range: tuple[int, int]
    guided: list[int] = field(default_factory=list)


@dataclass
class InferencePlan:
    stage: str
    fps: int
    segments: list[SegmentPlan]
    context_seconds: int
    provenance: dict[int, str] = field(default_factory=dict)
    snapped: list[tuple[float, int]] = field(default_factory=list)

    @property
    def expected_calls(self) -> int:
        return len(self.segments)

    def to_dict(self) -> dict:
        return {
            "stage": self.stage,
            "fps": self.fps,
            "context_seconds": self.context_seconds,
            "expected_calls": self.expected_calls,
            "segments": [
                {"start_seconds": s.start_seconds, "fps": s.fps, "frame_range": list(s.frame_range),
                 "guided": s.guided}
                for s in self.segments
            ],
            "provenance": {str(k): v for k, v in sorted(self.provenance.items())},
            "snapped": [list(s) for s in self.snapped],
        }


def _coarse_segments(total_seconds: int) -> list[SegmentPlan]:
    per = COARSE_FPS
    return [SegmentPlan(t, COARSE_FPS, (per * t, per * (t + COARSE_WINDOW_SECONDS)))
            for t in range(total_seconds - COARSE_WINDOW_SECONDS + 1)]


def _fine_segments(total_seconds: int) -> list[SegmentPlan]:
    per = FINE_FPS
    return [SegmentPlan(t, FINE_FPS, (per * t, per * (t + FINE_WINDOW_SECONDS)))
            for t in range(total_seconds)]


def plan_two_stage(total_seconds: int, context_seconds: int = 2) -> tuple[InferencePlan, InferencePlan, int]:
    """Segment layout of both stages and the resulting number of backend calls."""
    if total_seconds < COARSE_WINDOW_SECONDS:
        raise ContractError(f"need at least {COARSE_WINDOW_SECONDS} s, got {total_seconds}")
    coarse = InferencePlan("coarse", COARSE_FPS, _coarse_segments(total_seconds), context_seconds)
    fine = InferencePlan("fine", FINE_FPS, _fine_segments(total_seconds), context_seconds)
    return coarse, fine, coarse.expected_calls + fine.expected_calls


# ---------------------------------------------------------------------------
# stages
# ---------------------------------------------------------------------------

@dataclass
class StageResult:
    frames: list[np.ndarray]
    plan: InferencePlan
    pinned: set[int]


def _snap_keyframes(keyframes: Mapping[float, np.ndarray], fps: int, plan: InferencePlan) -> dict[int, np.ndarray]:
    out = {}
    for time, img in keyframes.items():
        idx = int(round(float(time) * fps))
        if abs(idx - float(time) * fps) > 1e-9:
            warnings.warn(f"keyframe at {time} s is off the {fps} fps grid; snapped to frame {idx}",
                          stacklevel=3)
            plan.snapped.append((float(time), idx))
        out[idx] = img
    return out


def _context_on_grid(context_frames: Sequence[np.ndarray], context_fps: int, fps: int,
                     context_seconds: int) -> dict[int, np.ndarray]:
    if context_fps % fps:
        raise ContractError(f"context rate {context_fps} is not a multiple of {fps}")
    stride = context_fps // fps
    out = {}
    for g in range(context_seconds * fps):
        src = g * stride
        if src < len(context_frames):
            out[g] = context_frames[src]
    return out


def _run_stage(backend, plan: InferencePlan, known: dict[int, np.ndarray], fixed: set[int],
               seed: int, text: str) -> StageResult:
    frames: dict[int, np.ndarray] = dict(known)
    provenance = {i: "input" for i in known}
    for k, seg in enumerate(plan.segments):
        lo, hi = seg.frame_range
        if lo not in frames or hi not in frames:
            missing = [i for i in (lo, hi) if i not in frames]
            raise ContractError(f"{plan.stage} segment at {seg.start_seconds} s lacks endpoint frame(s) {missing}")
        spec = GuidanceSpec({i - lo: frames[i] for i in range(lo + 1, hi) if i in frames})
        seg.guided = sorted({0, hi - lo} | set(spec.frames))
        out = generate_segment(backend, frames[lo], frames[hi], spec, seg.fps, seed + k, text)
        for n, img in enumerate(out):
            i = lo + n
            if i in fixed:
                continue
            # later segments overwrite earlier generated values
            frames[i] = img
            provenance[i] = f"{plan.stage}:{seg.start_seconds}"
    plan.provenance = provenance
    n_total = plan.segments[-1].frame_range[1] + 1
    missing = [i for i in range(n_total) if i not in frames]
    if missing:
        raise ContractError(f"{plan.stage} stage left frames {missing} empty")
    return StageResult([frames[i] for i in range(n_total)], plan, set(known))


def coarse_stage(backend, keyframes: Mapping[float, np.ndarray], context_frames: Sequence[np.ndarray],
                 total_seconds: int, context_seconds: int = 2, context_fps: int = 30,
                 seed: int = 0, text: str = DEFAULT_TEXT) -> StageResult:
    """Autoregressive 5 fps generation over sliding 3-second windows.

    ``keyframes`` maps time in seconds to an image; ``context_frames`` are the
    context renders at ``context_fps``.
    """
    coarse, _, _ = plan_two_stage(total_seconds, context_seconds)
    known = _context_on_grid(context_frames, context_fps, COARSE_FPS, context_seconds)
    known.update(_snap_keyframes(keyframes, COARSE_FPS, coarse))
    return _run_stage(backend, coarse, known, set(known), seed, text)


def fine_stage(backend, coarse_video: Sequence[np.ndarray], keyframes: Mapping[float, np.ndarray],
               total_seconds: int, context_frames: Sequence[np.ndarray] = (), context_seconds: int = 2,
               context_fps: int = 30, seed: int = 1000, text: str = DEFAULT_TEXT) -> StageResult:
    """1-second 15 fps segments guided by coarse frames, keyframes and context."""
    _, fine, _ = plan_two_stage(total_seconds, context_seconds)
    ratio = FINE_FPS // COARSE_FPS
    if len(coarse_video) != COARSE_FPS * total_seconds + 1:
        raise ContractError(f"coarse video has {len(coarse_video)} frames, expected "
                            f"{COARSE_FPS * total_seconds + 1}")
    known = {g * ratio: img for g, img in enumerate(coarse_video)}
    known.update(_context_on_grid(context_frames, context_fps, FINE_FPS, context_seconds))
    known.update(_snap_keyframes(keyframes, FINE_FPS, fine))
    return _run_stage(backend, fine, known, set(known), seed, text)


def hold_upsample(coarse_video: Sequence[np.ndarray], ratio: int = FINE_FPS // COARSE_FPS) -> list[np.ndarray]:
    """Fine-rate video by repeating coarse frames (the no-fine-stage ablation)."""
    n = (len(coarse_video) - 1) * ratio + 1
    return [coarse_video[i // ratio] for i in range(n)]


def two_stage_generate(backend, keyframes, context_frames, total_seconds, context_seconds=2,
                       context_fps=30, seed=0, text=DEFAULT_TEXT, fine=True):
    """Coarse then fine generation; returns ``(fine_frames, coarse_result, fine_result)``."""
    coarse = coarse_stage(backend, keyframes, context_frames, total_seconds, context_seconds,
                          context_fps, seed, text)
    if not fine:
        return hold_upsample(coarse.frames), coarse, None
    fine_res = fine_stage(backend, coarse.frames, keyframes, total_seconds, context_frames,
                          context_seconds, context_fps, seed + 1000, text)
    return fine_res.frames, coarse, fine_res
