"""Soft, differentiable skeleton renderer.

Each joint is drawn as a soft disc and each bone as a soft capsule between the
projected parent and child; primitives are composed with a per-pixel maximum
over a constant background. Everything is written in torch so gradients flow
from pixels back to root positions and joint rotations.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
from PIL import Image

from .camera import CameraParams, project_tensor
from .errors import ContractError
from .motion import MotionSequence, Pose, Skeleton, fk_tensor

_EPS = 1e-12


@dataclass(frozen=True)
class RenderStyle:
    """Appearance of the stick figure.

    ``joint_colors`` holds one entry per joint: a float for grayscale
    (``channels=1``) or an RGB triple (``channels=3``). ``None`` picks distinct
    defaults. Bones take the child joint's color scaled by ``bone_level``.
    """
    joint_radius: float = 1.0
    bone_thickness: float = 1.0
    sigma: float = 1.0
    background: float = 0.0
    bone_level: float = 0.6
    channels: int = 1
    joint_colors: tuple | None = None

    def __post_init__(self):
        if self.sigma <= 0:
            raise ContractError("render softness sigma must be positive")
        if self.channels not in (1, 3):
            raise ContractError("channels must be 1 or 3")

    def colors(self, num_joints: int) -> np.ndarray:
        """``(J, channels)`` joint colors."""
        if self.joint_colors is not None:
            c = np.asarray(self.joint_colors, dtype=float).reshape(num_joints, -1)
            if c.shape[1] != self.channels:
                raise ContractError("joint_colors do not match the channel count")
            return c
        if self.channels == 1:
            return np.linspace(1.0, 0.55, num_joints).reshape(-1, 1) if num_joints > 1 else np.ones((1, 1))
        hues = np.arange(num_joints) / max(num_joints, 1)
        return np.stack([_hue_to_rgb(h) for h in hues])


def _hue_to_rgb(h: float) -> np.ndarray:
    k = (np.array([5.0, 3.0, 1.0]) + h * 6.0) % 6.0
    return 1.0 - np.clip(np.minimum(k, 4.0 - k), 0.0, 1.0) * 0.8


def _pixel_grid(width: int, height: int, dtype) -> tuple[torch.Tensor, torch.Tensor]:
    ys = torch.arange(height, dtype=dtype) + 0.5
    xs = torch.arange(width, dtype=dtype) + 0.5
    return torch.meshgrid(ys, xs, indexing="ij")


def render_screen(screen: torch.Tensor, parents: Sequence[int | None], style: RenderStyle,
                  width: int, height: int) -> torch.Tensor:
    """Render projected joints ``(B, J, >=2)`` to images ``(B, C, H, W)``."""
    if screen.dim() == 2:
        screen = screen.unsqueeze(0)
    dtype = screen.dtype
    b, nj = screen.shape[:2]
    gy, gx = _pixel_grid(width, height, dtype)
    colors = torch.as_tensor(style.colors(nj), dtype=dtype)
    xy = screen[..., :2]
    two_s2 = 2.0 * style.sigma ** 2

    # joints: (B, J, H, W)
    dx = gx - xy[..., 0, None, None]
    dy = gy - xy[..., 1, None, None]
    d = torch.sqrt(dx * dx + dy * dy + _EPS)
    fields = [torch.exp(-torch.relu(d - style.joint_radius) ** 2 / two_s2)]
    prim_colors = [colors]

    bones = [(p, j) for j, p in enumerate(parents) if p is not None and p >= 0]
    if bones:
        pa = torch.tensor([p for p, _ in bones])
        ch = torch.tensor([j for _, j in bones])
        a = xy[:, pa]
        ab = xy[:, ch] - a
        ax = gx - a[..., 0, None, None]
        ay = gy - a[..., 1, None, None]
        len2 = (ab * ab).sum(-1)[..., None, None] + _EPS
        t = ((ax * ab[..., 0, None, None] + ay * ab[..., 1, None, None]) / len2).clamp(0.0, 1.0)
        ex = ax - t * ab[..., 0, None, None]
        ey = ay - t * ab[..., 1, None, None]
        dseg = torch.sqrt(ex * ex + ey * ey + _EPS)
        fields.append(torch.exp(-torch.relu(dseg - 0.5 * style.bone_thickness) ** 2 / two_s2))
        prim_colors.append(colors[ch] * style.bone_level)

    field = torch.cat(fields, dim=1)                      # (B, P, H, W)
    pc = torch.cat(prim_colors, dim=0)                    # (P, C)
    layers = field[:, :, None] * pc[None, :, :, None, None]
    img = layers.amax(dim=1)
    return torch.clamp(img, min=style.background)


def render_tensor(skeleton: Skeleton, root: torch.Tensor, quats: torch.Tensor,
                  cam: CameraParams, style: RenderStyle) -> torch.Tensor:
    """Differentiable render of ``root (B, 3)``, ``quats (B, J, 4)`` -> ``(B, C, H, W)``."""
    offsets = torch.as_tensor(skeleton.offsets, dtype=root.dtype)
    pts = fk_tensor(skeleton.parents, offsets, root, quats)
    screen = project_tensor(pts, cam)
    return render_screen(screen, skeleton.parents, style, cam.image_width, cam.image_height)


def _to_hwc(img: torch.Tensor) -> np.ndarray:
    arr = img.detach().cpu().numpy()
    arr = np.moveaxis(arr, -3, -1)
    return arr[..., 0] if arr.shape[-1] == 1 else arr


def render(skeleton: Skeleton, pose: Pose, cam: CameraParams, style: RenderStyle = RenderStyle()) -> np.ndarray:
    """Render one pose to a float image, ``(H, W)`` grayscale or ``(H, W, 3)``."""
    root = torch.as_tensor(pose.root, dtype=torch.float64)[None]
    quats = torch.as_tensor(pose.rotations, dtype=torch.float64)[None]
    return _to_hwc(render_tensor(skeleton, root, quats, cam, style))[0]


def render_frames(motion: MotionSequence, cam: CameraParams, style: RenderStyle = RenderStyle(),
                  indices: Sequence[int] | None = None, chunk: int = 64) -> np.ndarray:
    """Render (a subset of) the frames of a motion, ``(T, H, W[, 3])``."""
    idx = np.arange(len(motion)) if indices is None else np.asarray(indices, dtype=int)
    out = []
    with torch.no_grad():
        for s in range(0, len(idx), chunk):
            sel = idx[s:s + chunk]
            root = torch.as_tensor(motion.roots[sel], dtype=torch.float64)
            quats = torch.as_tensor(motion.rotations[sel], dtype=torch.float64)
            out.append(_to_hwc(render_tensor(motion.skeleton, root, quats, cam, style)))
    if not out:
        shape = (0, cam.image_height, cam.image_width) + ((3,) if style.channels == 3 else ())
        return np.zeros(shape)
    return np.concatenate(out)


def luminance(img: np.ndarray) -> np.ndarray:
    img = np.asarray(img, dtype=float)
    if img.ndim >= 3 and img.shape[-1] == 3:
        return img @ np.array([0.299, 0.587, 0.114])
    return img


def to_uint8(img: np.ndarray) -> np.ndarray:
    return np.round(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8)


def save_png(img: np.ndarray, path) -> None:
    Image.fromarray(to_uint8(img)).save(path, format="PNG")


def load_png(path) -> np.ndarray:
    return np.asarray(Image.open(path), dtype=float) / 255.0


def frame_name(index: int) -> str:
    return f"{index:05d}.png"


def render_views(motion: MotionSequence, cameras: dict[str, CameraParams], style: RenderStyle,
                 out_dir, indices: Sequence[int] | None = None) -> dict[str, list[Path]]:
    """Write one PNG sequence per view to ``out_dir/<view>/<index>.png``.

    Returns the written paths per view. I/O failures are collected per frame
    and raised together after all views were attempted.
    """
    out_dir = Path(out_dir)
    written: dict[str, list[Path]] = {}
    failures = []
    idx = list(range(len(motion))) if indices is None else list(indices)
    for view, cam in cameras.items():
        vdir = out_dir / view
        vdir.mkdir(parents=True, exist_ok=True)
        frames = render_frames(motion, cam, style, idx)
        paths = []
        for i, img in zip(idx, frames):
            path = vdir / frame_name(i)
            try:
                save_png(img, path)
            except OSError as exc:
                failures.append(f"{view}/{frame_name(i)}: {exc}")
                continue
            paths.append(path)
        written[view] = paths
    if failures:
        raise OSError("failed to write frames: " + "; ".join(failures))
    return written


def framing_camera(motion: MotionSequence, view: str = "front", image_size=(64, 64),
                   margin: float = 1.15, distance: float = 5.0) -> CameraParams:
    """A named-view camera that keeps every frame of ``motion`` inside the image."""
    from .camera import named_view

    pts = motion.global_positions().reshape(-1, 3)
    lo, hi = pts.min(axis=0), pts.max(axis=0)
    center = 0.5 * (lo + hi)
    radius = float(np.max(np.linalg.norm(pts - center, axis=-1))) * margin
    radius = radius if radius > 0 else 1.0
    scale = 0.5 * min(image_size) / radius
    return named_view(view, center, max(distance, 2 * radius), image_size, scale, radius)
