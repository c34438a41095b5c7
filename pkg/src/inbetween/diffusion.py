"""Video diffusion backend interface, a deterministic toy backend, and context adaptation.

The toy backend keeps the structure that matters for the pipeline contracts:

* a linear, lossless latent codec (orthogonal projection of ``patch x patch``
  image blocks, so ``decode(encode(x)) == x`` up to float rounding);
* a noise-prediction network conditioned on first/last frame, a text string,
  the timestep and an fps embedding;
* a four-way parameter partition (``spatial``, ``temporal``,
  ``image_projector``, ``fps_embedding``) so adaptation can train the
  per-frame parts while the cross-frame parts stay frozen.

A real model can be wrapped out-of-tree by implementing :class:`VideoBackend`.
"""

from __future__ import annotations

import copy
import hashlib
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Protocol, Sequence

import numpy as np
import torch
from torch import nn
from torch.nn import functional as F

from .errors import ConfigError, ContractError

PARAMETER_SETS = ("spatial", "temporal", "image_projector", "fps_embedding")


@dataclass(frozen=True)
class Conditioning:
    first_frame: np.ndarray
    last_frame: np.ndarray
    text: str
    fps: int
    t: int


@dataclass(frozen=True)
class VideoClip:
    """``frames`` is ``(16, H, W)`` (or ``(16, H, W, C)``) in ``[0, 1]``."""
    frames: np.ndarray
    fps: int


@dataclass(frozen=True)
class AdaptConfig:
    steps: int = 500
    learning_rate: float = 1e-5
    batch_size: int = 16
    views: int = 4
    intervals: tuple[int, ...] = (1, 2, 3)
    text: str = "a rendered character moving in a plain scene"
    seed: int = 0

    def __post_init__(self):
        if self.steps <= 0:
            raise ConfigError("adapt steps must be positive")
        if self.learning_rate <= 0:
            raise ConfigError("adapt learning rate must be positive")


class VideoBackend(Protocol):
    """What the generation and adaptation code needs from a video model."""

    frames: int
    timesteps: int
    supported_fps: tuple[int, ...]

    def alpha_bar(self, t: int) -> float: ...
    def encode(self, image) -> torch.Tensor: ...
    def decode(self, latent: torch.Tensor) -> np.ndarray: ...
    def forward_noise(self, z0: torch.Tensor, t: int, generator: torch.Generator | None = None): ...
    def denoise_step(self, z_t: torch.Tensor, cond: Conditioning) -> torch.Tensor: ...
    def parameter_partition(self) -> dict[str, list[str]]: ...


@dataclass(frozen=True)
class ToyBackendConfig:
    image_size: int = 32
    image_channels: int = 1
    patch: int = 2
    hidden: int = 16
    frames: int = 16
    timesteps: int = 50
    alpha_bar_min: float = 1e-4
    fps_values: tuple[int, ...] = (5, 10, 15, 30)
    seed: int = 0

    @property
    def latent_channels(self) -> int:
        return self.patch * self.patch * self.image_channels

    @property
    def latent_size(self) -> int:
        return self.image_size // self.patch


def _timestep_embedding(t: torch.Tensor, dim: int) -> torch.Tensor:
    half = dim // 2
    freqs = torch.exp(-math.log(1000.0) * torch.arange(half, dtype=torch.float32) / max(half, 1))
    args = t.float()[:, None] * freqs[None]
    return torch.cat([torch.sin(args), torch.cos(args)], dim=-1)


def _text_vector(text: str, dim: int) -> torch.Tensor:
    seed = int.from_bytes(hashlib.sha256(text.encode()).digest()[:8], "little")
    g = torch.Generator().manual_seed(seed)
    return 0.1 * torch.randn(dim, generator=g)


class ToyVideoDenoiser(nn.Module):
    """Clean-latent estimator over ``(B, F, C, h, w)`` latents.

    The backend turns its output into a noise prediction. Per-frame convolutions form the spatial module; a kernel-3 convolution
    along the frame axis is the temporal module.
    """

    def __init__(self, cfg: ToyBackendConfig):
        super().__init__()
        c, hd = cfg.latent_channels, cfg.hidden
        self.cfg = cfg
        self.image_projector = nn.Conv2d(c, hd, 1)
        self.fps_embedding = nn.Embedding(len(cfg.fps_values), hd)
        self.spatial_in = nn.Conv2d(c + hd, hd, 3, padding=1)
        self.spatial_time = nn.Linear(hd, hd)
        self.spatial_mid = nn.Conv2d(hd, hd, 3, padding=1)
        self.spatial_out = nn.Conv2d(hd, c, 3, padding=1)
        self.temporal_mix = nn.Conv3d(hd, hd, (3, 1, 1), padding=(1, 0, 0))

    def forward(self, z, first_lat, last_lat, t, fps_index, text_vec):
        b, f, c, h, w = z.shape
        hd = self.cfg.hidden
        s = torch.linspace(0.0, 1.0, f, dtype=z.dtype).view(1, f, 1, 1, 1)
        p0 = self.image_projector(first_lat).unsqueeze(1)
        p1 = self.image_projector(last_lat).unsqueeze(1)
        cond = (1.0 - s) * p0 + s * p1                                       # (B, F, hd, h, w)

        x = torch.cat([z, cond], dim=2).reshape(b * f, c + hd, h, w)
        x = self.spatial_in(x)
        bias = self.spatial_time(_timestep_embedding(t, hd)) + self.fps_embedding(fps_index) + text_vec
        x = x.reshape(b, f, hd, h, w) + bias.view(b, 1, hd, 1, 1)
        x = F.silu(x)
        x = x + self.temporal_mix(x.permute(0, 2, 1, 3, 4)).permute(0, 2, 1, 3, 4)
        x = F.silu(self.spatial_mid(x.reshape(b * f, hd, h, w)))
        return self.spatial_out(x).reshape(b, f, c, h, w)


class ToyVideoBackend:
    """Deterministic desk-scale stand-in for a latent video interpolation model."""

    def __init__(self, cfg: ToyBackendConfig = ToyBackendConfig()):
        if cfg.image_size % cfg.patch:
            raise ConfigError("image_size must be a multiple of patch")
        self.cfg = cfg
        self.frames = cfg.frames
        self.timesteps = cfg.timesteps
        self.supported_fps = tuple(cfg.fps_values)
        with torch.random.fork_rng():
            torch.manual_seed(cfg.seed)
            self.model = ToyVideoDenoiser(cfg)
        g = torch.Generator().manual_seed(cfg.seed + 1)
        q, _ = torch.linalg.qr(torch.randn(cfg.latent_channels, cfg.latent_channels, generator=g,
                                           dtype=torch.float64))
        self._codec = q.float()
        self._alpha_bar = 1.0 - np.arange(cfg.timesteps + 1) / cfg.timesteps * (1.0 - cfg.alpha_bar_min)
        self._alpha_bar[0] = 1.0
        self.segment_calls = 0
        self.step_calls = 0

    # -- schedule -------------------------------------------------------
    def alpha_bar(self, t: int) -> float:
        if not 0 <= t <= self.timesteps:
            raise ContractError(f"timestep {t} outside [0, {self.timesteps}]")
        return float(self._alpha_bar[t])

    # -- codec ----------------------------------------------------------
    def _image_tensor(self, image) -> torch.Tensor:
        img = torch.as_tensor(np.asarray(image), dtype=torch.float32)
        n, c = self.cfg.image_size, self.cfg.image_channels
        if img.dim() == 2:
            img = img.unsqueeze(-1)
        if tuple(img.shape) != (n, n, c):
            raise ContractError(f"image shape {tuple(img.shape)} != ({n}, {n}, {c})")
        return img

    def encode(self, image) -> torch.Tensor:
        """``(H, W[, C])`` image -> ``(latent_channels, h, w)`` latent frame."""
        img = self._image_tensor(image)
        p, n = self.cfg.patch, self.cfg.latent_size
        blocks = img.reshape(n, p, n, p, -1).permute(0, 2, 1, 3, 4).reshape(n, n, -1)
        return (blocks @ self._codec.T).permute(2, 0, 1).contiguous()

    def decode(self, latent: torch.Tensor) -> np.ndarray:
        p, n, c = self.cfg.patch, self.cfg.latent_size, self.cfg.image_channels
        if tuple(latent.shape) != (self.cfg.latent_channels, n, n):
            raise ContractError(f"latent shape {tuple(latent.shape)} does not match the codec")
        blocks = latent.permute(1, 2, 0) @ self._codec
        img = blocks.reshape(n, n, p, p, c).permute(0, 2, 1, 3, 4).reshape(n * p, n * p, c)
        img = img.detach().numpy().astype(np.float64)
        return img[..., 0] if c == 1 else img

    def encode_video(self, frames) -> torch.Tensor:
        frames = list(frames)
        if len(frames) != self.frames:
            raise ContractError(f"expected {self.frames} frames, got {len(frames)}")
        return torch.stack([self.encode(f) for f in frames])

    # -- diffusion ------------------------------------------------------
    def forward_noise(self, z0: torch.Tensor, t: int, generator: torch.Generator | None = None):
        """``(z_t, eps)`` with ``z_t = sqrt(ab_t) z0 + sqrt(1 - ab_t) eps``."""
        ab = self.alpha_bar(t)
        eps = torch.randn(z0.shape, generator=generator, dtype=z0.dtype)
        if t == 0:
            return z0.clone(), eps
        return math.sqrt(ab) * z0 + math.sqrt(1.0 - ab) * eps, eps

    def fps_index(self, fps: int) -> int:
        try:
            return self.supported_fps.index(int(fps))
        except ValueError:
            raise ConfigError(f"fps {fps} not supported; expected one of {self.supported_fps}") from None

    def predict_noise(self, z_t: torch.Tensor, cond: Conditioning) -> torch.Tensor:
        first = self.encode(cond.first_frame).unsqueeze(0)
        last = self.encode(cond.last_frame).unsqueeze(0)
        t = torch.tensor([cond.t])
        fi = torch.tensor([self.fps_index(cond.fps)])
        text = _text_vector(cond.text, self.cfg.hidden)
        return self.noise_from_model(z_t.unsqueeze(0), first, last, t, fi, text)[0]

    def noise_from_model(self, z_t, first, last, t, fps_index, text_vec) -> torch.Tensor:
        """Batched noise prediction.

        The network estimates the clean latent; the noise is recovered from
        it. Near pure noise this keeps small network errors from being blown
        up by ``1 / sqrt(alpha_bar)`` when the clean latent is re-estimated.
        """
        x0 = self.model(z_t, first, last, t, fps_index, text_vec)
        ab = torch.as_tensor(self._alpha_bar, dtype=z_t.dtype)[t].view(-1, 1, 1, 1, 1)
        return (z_t - ab.sqrt() * x0) / (1.0 - ab).sqrt()

    @torch.no_grad()
    def denoise_step(self, z_t: torch.Tensor, cond: Conditioning) -> torch.Tensor:
        """Deterministic (DDIM, eta = 0) step from ``cond.t`` to ``cond.t - 1``."""
        if cond.t < 1:
            raise ContractError("denoise_step needs t >= 1")
        self.fps_index(cond.fps)
        self.step_calls += 1
        ab_t = self.alpha_bar(cond.t)
        ab_prev = self.alpha_bar(cond.t - 1)
        eps = self.predict_noise(z_t, cond)
        x0 = ((z_t - math.sqrt(1.0 - ab_t) * eps) / math.sqrt(ab_t)).clamp(-4.0, 4.0)
        return math.sqrt(ab_prev) * x0 + math.sqrt(1.0 - ab_prev) * eps

    # -- parameters -----------------------------------------------------
    def parameter_partition(self) -> dict[str, list[str]]:
        sets: dict[str, list[str]] = {k: [] for k in PARAMETER_SETS}
        for name, _ in self.model.named_parameters():
            for key in PARAMETER_SETS:
                if name.startswith(key):
                    sets[key].append(name)
                    break
            else:
                raise RuntimeError(f"parameter {name} belongs to no set")
        return sets

    def parameter_snapshot(self) -> dict[str, torch.Tensor]:
        return {k: v.detach().clone() for k, v in self.model.state_dict().items()}

    def copy(self) -> "ToyVideoBackend":
        return copy.deepcopy(self)


# ---------------------------------------------------------------------------
# context adaptation
# ---------------------------------------------------------------------------

TRAINABLE_SETS = ("spatial", "image_projector")


@dataclass
class AdaptResult:
    backend: ToyVideoBackend
    losses: list[float]
    update_counts: dict[str, int]
    manifest: dict = field(default_factory=dict)


def adaptation_loss(backend: ToyVideoBackend, clips: Sequence[VideoClip], text: str,
                    generator: torch.Generator) -> torch.Tensor:
    """Noise-prediction MSE on a batch of clips with random timesteps."""
    z0 = torch.stack([backend.encode_video(c.frames) for c in clips])
    first = torch.stack([backend.encode(c.frames[0]) for c in clips])
    last = torch.stack([backend.encode(c.frames[-1]) for c in clips])
    t = torch.randint(1, backend.timesteps + 1, (len(clips),), generator=generator)
    ab = torch.as_tensor(backend._alpha_bar, dtype=torch.float32)[t].view(-1, 1, 1, 1, 1)
    eps = torch.randn(z0.shape, generator=generator)
    z_t = ab.sqrt() * z0 + (1 - ab).sqrt() * eps
    fi = torch.tensor([backend.fps_index(c.fps) for c in clips])
    pred = backend.noise_from_model(z_t, first, last, t, fi, _text_vector(text, backend.cfg.hidden))
    return F.mse_loss(pred, eps)


def icadapt(backend: ToyVideoBackend, clips: Sequence[VideoClip], config: AdaptConfig = AdaptConfig(),
            trainable: Sequence[str] = TRAINABLE_SETS) -> AdaptResult:
    """Fine-tune the spatial and image-projector parameters on context clips.

    Returns a new backend; the input backend is left untouched. Frozen
    parameter sets never get gradient buffers or optimizer state.
    """
    for c in clips:
        if len(c.frames) != backend.frames:
            raise ContractError(f"clip has {len(c.frames)} frames, expected {backend.frames}")
    if not clips:
        raise ContractError("no clips to adapt on")
    adapted = backend.copy()
    partition = adapted.parameter_partition()
    params = dict(adapted.model.named_parameters())
    train_names = [n for k in trainable for n in partition[k]]
    for name, p in params.items():
        p.requires_grad_(name in train_names)
    opt = torch.optim.Adam([params[n] for n in train_names], lr=config.learning_rate)
    gen = torch.Generator().manual_seed(config.seed)
    rng = np.random.default_rng(config.seed)

    counts = {k: 0 for k in PARAMETER_SETS}
    losses = []
    adapted.model.train()
    for _ in range(config.steps):
        pick = rng.choice(len(clips), size=config.batch_size, replace=len(clips) < config.batch_size)
        loss = adaptation_loss(adapted, [clips[i] for i in pick], config.text, gen)
        opt.zero_grad(set_to_none=True)
        loss.backward()
        opt.step()
        losses.append(float(loss.detach()))
        for k in PARAMETER_SETS:
            if any(params[n].grad is not None for n in partition[k]):
                counts[k] += 1
    adapted.model.eval()
    for p in params.values():
        p.requires_grad_(False)
    manifest = {"adapt_config": asdict(config), "trainable": list(trainable),
                "partition": partition, "update_counts": counts}
    return AdaptResult(adapted, losses, counts, manifest)


def clips_from_frames(view_frames: dict[str, Sequence[np.ndarray]], clip_indices) -> list[VideoClip]:
    """Materialize :class:`~inbetween.clips.ClipIndex` entries into image clips."""
    return [VideoClip(np.stack([view_frames[c.view][i] for i in c.frame_indices]), c.fps_tag)
            for c in clip_indices]


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

def save_checkpoint(backend: ToyVideoBackend, path, adapt_config: AdaptConfig | None = None,
                    extra: dict | None = None) -> None:
    path = Path(path)
    state = {k: v.detach().numpy() for k, v in backend.model.state_dict().items()}
    with open(path, "wb") as fh:
        np.savez(fh, **state)
    sidecar = {
        "backend": "toy",
        "config": asdict(backend.cfg),
        "partition": backend.parameter_partition(),
        "adapt_config": asdict(adapt_config) if adapt_config else None,
    }
    if extra:
        sidecar.update(extra)
    path.with_suffix(".json").write_text(json.dumps(sidecar, indent=1, sort_keys=True) + "\n")


def load_checkpoint(path) -> tuple[ToyVideoBackend, dict]:
    path = Path(path)
    sidecar = json.loads(path.with_suffix(".json").read_text())
    cfg = dict(sidecar["config"])
    cfg["fps_values"] = tuple(cfg["fps_values"])
    backend = ToyVideoBackend(ToyBackendConfig(**cfg))
    with np.load(path) as data:
        backend.model.load_state_dict({k: torch.from_numpy(data[k]) for k in data.files})
    backend.model.eval()
    for p in backend.model.parameters():
        p.requires_grad_(False)
    return backend, sidecar
