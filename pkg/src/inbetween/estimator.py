"""Scene-specific joint estimator.

An image is turned into two aligned feature maps by a feature provider (a
"2D" map and a "3D-aware" map). A light merger fuses them, a convolutional
decoder turns the fused map into one heatmap per joint, and a soft-argmax
reads out screen coordinates. Depth is regressed per joint by a small MLP
fed with the fused feature sampled at the joint, the joint's 2D position and
a learned one-number joint index embedding. Depth is predicted in NDC and
denormalized by half the image height, the same convention the camera uses.

The model is trained only on frames rendered from one scene and is meant to
be accurate on that scene alone.
"""

from __future__ import annotations

import json
import time
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Mapping, Protocol, Sequence

import numpy as np
import torch
from scipy.ndimage import gaussian_filter
from torch import nn
from torch.nn import functional as F

from .clips import EstimatorSample, ImageRef, expand_weighted
from .errors import ConfigError, ContractError


@dataclass
class FeatureMap:
    values: np.ndarray      # (h, w, C)
    source: str

    def __post_init__(self):
        if self.values.ndim != 3 or self.values.shape[-1] == 0:
            raise ContractError(f"feature map must be (h, w, C>0), got {self.values.shape}")


# ---------------------------------------------------------------------------
# feature providers
# ---------------------------------------------------------------------------

class FeatureProvider(Protocol):
    name: str
    channels: tuple[int, int]

    def provide(self, image: np.ndarray) -> tuple[FeatureMap, FeatureMap]: ...


def _orthogonal_block(rows: int, cols: int, rng: np.random.Generator) -> np.ndarray:
    """Top-left block of a random orthogonal matrix: orthonormal rows or columns."""
    n = max(rows, cols)
    q, r = np.linalg.qr(rng.standard_normal((n, n)))
    q = q * np.sign(np.diag(r))
    return q[:rows, :cols]


def _patches(img: np.ndarray, p: int) -> np.ndarray:
    h, w, c = img.shape
    if h % p or w % p:
        raise ContractError(f"image {h}x{w} is not a multiple of patch {p}")
    return img.reshape(h // p, p, w // p, p, c).transpose(0, 2, 1, 3, 4).reshape(h // p, w // p, p * p * c)


class SyntheticFeatureProvider:
    """Fixed random projections of image patches, standing in for pretrained backbones.

    The 2D map projects raw ``patch x patch`` pixel blocks. The 3D-aware map
    projects the same blocks taken from Gaussian-blurred copies of the image,
    which gives each cell a wider view of the figure. Both projections are
    orthogonal blocks drawn from a seeded generator.
    """

    name = "synthetic"

    def __init__(self, image_channels: int = 3, patch: int = 2, c2d: int = 16, c3d: int = 16,
                 blur_sigmas: Sequence[float] = (2.0, 4.0, 8.0), seed: int = 0):
        self.image_channels = image_channels
        self.patch = patch
        self.blur_sigmas = tuple(float(s) for s in blur_sigmas)
        self.seed = seed
        rng = np.random.default_rng(seed)
        d = patch * patch * image_channels
        self._p2d = _orthogonal_block(d, c2d, rng)
        self._p3d = _orthogonal_block(d * len(self.blur_sigmas), c3d, rng)
        self.channels = (c2d, c3d)

    def config(self) -> dict:
        return {"name": self.name, "image_channels": self.image_channels, "patch": self.patch,
                "c2d": self.channels[0], "c3d": self.channels[1], "blur_sigmas": list(self.blur_sigmas),
                "seed": self.seed}

    def _as_hwc(self, image) -> np.ndarray:
        img = np.asarray(image, dtype=float)
        if img.ndim == 2:
            img = img[..., None]
        if img.ndim != 3 or img.shape[-1] != self.image_channels:
            raise ContractError(f"expected (H, W, {self.image_channels}) image, got {img.shape}")
        return img

    def provide(self, image) -> tuple[FeatureMap, FeatureMap]:
        img = self._as_hwc(image)
        f2d = _patches(img, self.patch) @ self._p2d
        blurred = [gaussian_filter(img, sigma=(s, s, 0), mode="constant") for s in self.blur_sigmas]
        f3d = np.concatenate([_patches(b, self.patch) for b in blurred], axis=-1) @ self._p3d
        return FeatureMap(f2d, "2d"), FeatureMap(f3d, "3d-aware")


_PROVIDERS: dict[str, Callable[..., FeatureProvider]] = {"synthetic": SyntheticFeatureProvider}


def register_feature_provider(name: str, factory: Callable[..., FeatureProvider]) -> None:
    if name in _PROVIDERS:
        raise ConfigError(f"feature provider {name!r} already registered")
    _PROVIDERS[name] = factory


def make_feature_provider(config: Mapping) -> FeatureProvider:
    config = dict(config)
    name = config.pop("name", "synthetic")
    if name not in _PROVIDERS:
        raise ConfigError(f"unknown feature provider {name!r}; registered: {sorted(_PROVIDERS)}")
    return _PROVIDERS[name](**config)


def provide_batch(provider: FeatureProvider, images: Sequence[np.ndarray], ids: Sequence | None = None,
                  dtype=torch.float32) -> tuple[torch.Tensor, torch.Tensor]:
    """Features for a list of images as ``(B, C, h, w)`` tensors."""
    f2, f3 = [], []
    for n, img in enumerate(images):
        try:
            a, b = provider.provide(img)
        except Exception as exc:
            ident = ids[n] if ids is not None else n
            raise RuntimeError(f"feature provider {provider.name!r} failed on image {ident}: {exc}") from exc
        if a.values.shape[:2] != b.values.shape[:2]:
            raise ContractError(f"provider maps disagree spatially: {a.values.shape} vs {b.values.shape}")
        f2.append(a.values)
        f3.append(b.values)
    t2 = torch.as_tensor(np.stack(f2), dtype=dtype).permute(0, 3, 1, 2).contiguous()
    t3 = torch.as_tensor(np.stack(f3), dtype=dtype).permute(0, 3, 1, 2).contiguous()
    return t2, t3


# ---------------------------------------------------------------------------
# model
# ---------------------------------------------------------------------------

@dataclass
class EstimatorConfig:
    num_joints: int
    image_size: tuple[int, int] = (64, 64)          # (width, height)
    heatmap_size: tuple[int, int] = (64, 64)        # (width, height)
    feature_channels: int = 32
    depth_hidden: int = 64
    steps: int = 3500
    lr: float = 1e-3
    batch_size: int = 16
    views: int = 3
    keyframe_weight: int = 3
    seed: int = 0
    provider: dict = field(default_factory=lambda: {"name": "synthetic"})

    def __post_init__(self):
        self.image_size = tuple(int(v) for v in self.image_size)
        self.heatmap_size = tuple(int(v) for v in self.heatmap_size)
        if self.num_joints < 1 or self.feature_channels < 1:
            raise ConfigError("num_joints and feature_channels must be positive")
        if self.steps < 0 or self.batch_size < 1:
            raise ConfigError("steps must be >= 0 and batch_size >= 1")


class FeatureMerger(nn.Module):
    def __init__(self, c2d: int, c3d: int, channels: int):
        super().__init__()
        half = max(channels // 2, 1)
        self.branch2d = nn.Conv2d(c2d, half, 3, padding=1)
        self.branch3d = nn.Conv2d(c3d, half, 3, padding=1)
        self.fuse = nn.Conv2d(2 * half, channels, 1)

    def forward(self, f2d: torch.Tensor, f3d: torch.Tensor) -> torch.Tensor:
        if f2d.shape[-2:] != f3d.shape[-2:]:
            raise ContractError(f"feature maps differ spatially: {tuple(f2d.shape)} vs {tuple(f3d.shape)}")
        a = F.relu(self.branch2d(f2d))
        b = F.relu(self.branch3d(f3d))
        return F.relu(self.fuse(torch.cat([a, b], dim=1)))


class HeatmapDecoder(nn.Module):
    """Convolutional trunk plus a residual block whose last layer starts at zero."""

    def __init__(self, channels: int, num_joints: int, heatmap_size: tuple[int, int]):
        super().__init__()
        self.heatmap_size = heatmap_size
        self.trunk = nn.Sequential(
            nn.Conv2d(channels, channels, 3, padding=1), nn.ReLU(),
            nn.Conv2d(channels, channels, 3, padding=2, dilation=2), nn.ReLU(),
            nn.Conv2d(channels, channels, 3, padding=4, dilation=4), nn.ReLU(),
        )
        self.residual = nn.Sequential(
            nn.Conv2d(channels, channels, 3, padding=1), nn.ReLU(),
            nn.Conv2d(channels, channels, 3, padding=1),
        )
        nn.init.zeros_(self.residual[-1].weight)
        nn.init.zeros_(self.residual[-1].bias)
        self.head = nn.Conv2d(channels, num_joints, 1)

    def forward(self, merged: torch.Tensor, use_residual: bool = True) -> torch.Tensor:
        x = self.trunk(merged)
        if use_residual:
            x = x + self.residual(x)
        logits = self.head(x)
        w, h = self.heatmap_size
        if logits.shape[-2:] != (h, w):
            logits = F.interpolate(logits, size=(h, w), mode="bilinear", align_corners=False)
        return logits


def heatmaps_to_joints(heatmaps: torch.Tensor, image_size: tuple[int, int]) -> torch.Tensor:
    """Soft-argmax of ``(B, J, h, w)`` logits to ``(B, J, 2)`` pixel ``(x, y)``.

    Heatmap cell ``(u, v)`` covers the image region of its continuous center
    ``((u + 0.5) W / w, (v + 0.5) H / h)``.
    """
    b, j, h, w = heatmaps.shape
    width, height = image_size
    prob = torch.softmax(heatmaps.reshape(b, j, h * w), dim=-1).reshape(b, j, h, w)
    xs = (torch.arange(w, dtype=heatmaps.dtype) + 0.5) * (width / w)
    ys = (torch.arange(h, dtype=heatmaps.dtype) + 0.5) * (height / h)
    x = (prob.sum(dim=2) * xs).sum(-1)
    y = (prob.sum(dim=3) * ys).sum(-1)
    return torch.stack([x, y], dim=-1)


def sample_feature(features: torch.Tensor, xy: torch.Tensor, image_size: tuple[int, int]
                   ) -> tuple[torch.Tensor, torch.Tensor]:
    """Bilinearly sample ``(B, C, h, w)`` features at pixel positions ``(B, J, 2)``.

    Returns ``(B, J, C)`` samples and a ``(B, J)`` flag marking positions that
    fell outside the feature grid's cell centers and were clamped to the border.
    """
    width, height = image_size
    b, c, h, w = features.shape
    u = xy[..., 0] * (w / width) - 0.5
    v = xy[..., 1] * (h / height) - 0.5
    outside = (u < 0) | (u > w - 1) | (v < 0) | (v > h - 1)
    u = u.clamp(0.0, w - 1)
    v = v.clamp(0.0, h - 1)
    u0 = u.detach().floor().clamp(max=max(w - 2, 0)).long()
    v0 = v.detach().floor().clamp(max=max(h - 2, 0)).long()
    u1 = (u0 + 1).clamp(max=w - 1)
    v1 = (v0 + 1).clamp(max=h - 1)
    fu = (u - u0).unsqueeze(-1)
    fv = (v - v0).unsqueeze(-1)
    flat = features.permute(0, 2, 3, 1).reshape(b, h * w, c)

    def gather(vi, ui):
        idx = (vi * w + ui).unsqueeze(-1).expand(-1, -1, c)
        return torch.gather(flat, 1, idx)

    top = gather(v0, u0) * (1 - fu) + gather(v0, u1) * fu
    bottom = gather(v1, u0) * (1 - fu) + gather(v1, u1) * fu
    return top * (1 - fv) + bottom * fv, outside


class DepthMLP(nn.Module):
    def __init__(self, channels: int, hidden: int):
        super().__init__()
        self.net = nn.Sequential(
            nn.Linear(channels + 3, hidden), nn.ReLU(),
            nn.Linear(hidden, hidden), nn.ReLU(),
            nn.Linear(hidden, 1),
        )
        nn.init.zeros_(self.net[-1].weight)
        nn.init.zeros_(self.net[-1].bias)

    def forward(self, f_processed: torch.Tensor, j_processed: torch.Tensor) -> torch.Tensor:
        if f_processed.shape[0] != j_processed.shape[0]:
            raise ContractError(f"{f_processed.shape[0]} feature rows vs {j_processed.shape[0]} joint rows")
        return self.net(torch.cat([f_processed, j_processed], dim=-1)).squeeze(-1)


class EstimatorModel(nn.Module):
    def __init__(self, config: EstimatorConfig, feature_channels: tuple[int, int]):
        super().__init__()
        self.config = config
        c = config.feature_channels
        nj = config.num_joints
        self.merger = FeatureMerger(feature_channels[0], feature_channels[1], c)
        self.decoder = HeatmapDecoder(c, nj, config.heatmap_size)
        self.depth_mlp = DepthMLP(c, config.depth_hidden)
        self.joint_embedding = nn.Parameter(torch.arange(nj, dtype=torch.float32).reshape(nj, 1) / nj)

    def estimate_depth(self, f_processed: torch.Tensor, j_processed: torch.Tensor) -> torch.Tensor:
        return self.depth_mlp(f_processed, j_processed)

    def forward(self, f2d: torch.Tensor, f3d: torch.Tensor, use_residual: bool = True) -> dict:
        width, height = self.config.image_size
        merged = self.merger(f2d, f3d)
        heat = self.decoder(merged, use_residual)
        xy = heatmaps_to_joints(heat, self.config.image_size)
        b, nj = xy.shape[:2]
        feats, outside = sample_feature(merged, xy, self.config.image_size)
        norm_xy = torch.stack([xy[..., 0] / width * 2 - 1, xy[..., 1] / height * 2 - 1], dim=-1)
        emb = self.joint_embedding.to(xy.dtype).expand(b, nj, 1)
        j_proc = torch.cat([norm_xy, emb], dim=-1).reshape(b * nj, 3)
        ndc = self.estimate_depth(feats.reshape(b * nj, -1), j_proc).reshape(b, nj)
        depth = ndc * (height / 2.0)
        return {"heatmaps": heat, "xy": xy, "ndc": ndc, "depth": depth,
                "joints": torch.cat([xy, depth.unsqueeze(-1)], dim=-1), "clamped": outside}


def joint_loss(pred: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """Mean squared error over ``(x, y, depth)`` pixel coordinates."""
    return torch.mean((pred - target) ** 2)


@dataclass
class JointEstimate:
    xy: np.ndarray          # (J, 2) pixels
    depth: np.ndarray       # (J,) pixels

    @property
    def joints(self) -> np.ndarray:
        return np.concatenate([self.xy, self.depth[:, None]], axis=-1)


@dataclass
class SceneEstimator:
    """A trained model bundled with its feature provider."""
    model: EstimatorModel
    provider: FeatureProvider

    def estimate_batch(self, images: Sequence[np.ndarray], ids: Sequence | None = None) -> np.ndarray:
        """``(B, J, 3)`` pixel estimates ``(x, y, depth)``."""
        dtype = next(self.model.parameters()).dtype
        f2, f3 = provide_batch(self.provider, images, ids, dtype)
        self.model.eval()
        with torch.no_grad():
            out = self.model(f2, f3)["joints"]
        return out.double().numpy()

    def estimate(self, image, image_id=None) -> JointEstimate:
        j = self.estimate_batch([image], None if image_id is None else [image_id])[0]
        return JointEstimate(j[:, :2], j[:, 2])


def build_estimator(config: EstimatorConfig) -> SceneEstimator:
    provider = make_feature_provider(config.provider)
    with torch.random.fork_rng():
        torch.manual_seed(config.seed)
        model = EstimatorModel(config, provider.channels)
    return SceneEstimator(model, provider)


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------

@dataclass
class TrainResult:
    estimator: SceneEstimator
    losses: list[float]
    excluded: list[str]
    seconds: float
    manifest: dict


def _in_image(target: np.ndarray, image_size) -> bool:
    w, h = image_size
    return bool(np.all((target[:, 0] >= 0) & (target[:, 0] < w) & (target[:, 1] >= 0) & (target[:, 1] < h)))


def train_estimator(samples: Sequence[EstimatorSample], images: Mapping[ImageRef, np.ndarray] | Callable,
                    config: EstimatorConfig, log_every: int = 0) -> TrainResult:
    """Fit a fresh estimator to projected ground-truth joints by Adam on ``joint_loss``.

    ``images`` maps each sample's :class:`ImageRef` to its image, or is a
    callable doing the lookup. Samples whose targets leave the image are
    dropped with a warning. Each epoch visits every sample ``multiplicity``
    times in a seeded random order.
    """
    if not samples:
        raise ContractError("estimator dataset is empty")
    lookup = images if callable(images) else images.__getitem__
    kept, excluded = [], []
    for s in samples:
        if _in_image(s.target, config.image_size):
            kept.append(s)
        else:
            excluded.append(s.image.relpath())
    if excluded:
        warnings.warn(f"{len(excluded)} sample(s) project outside the image and were excluded",
                      stacklevel=2)
    if not kept:
        raise ContractError("no usable estimator samples")

    est = build_estimator(config)
    model = est.model
    refs = sorted({s.image for s in kept}, key=lambda r: (r.kind, r.view, r.index))
    slot = {r: n for n, r in enumerate(refs)}
    f2_all, f3_all = provide_batch(est.provider, [lookup(r) for r in refs], [r.relpath() for r in refs])
    epoch = expand_weighted(kept)
    order_img = torch.tensor([slot[s.image] for s in epoch])
    order_tgt = torch.as_tensor(np.stack([s.target for s in epoch]), dtype=torch.float32)

    opt = torch.optim.Adam(model.parameters(), lr=config.lr)
    gen = torch.Generator().manual_seed(config.seed)
    losses: list[float] = []
    perm = torch.randperm(len(epoch), generator=gen)
    pos = 0
    t0 = time.perf_counter()
    model.train()
    for step in range(config.steps):
        if pos + config.batch_size > len(epoch):
            perm = torch.randperm(len(epoch), generator=gen)
            pos = 0
        sel = perm[pos:pos + config.batch_size]
        pos += config.batch_size
        idx = order_img[sel]
        out = model(f2_all[idx], f3_all[idx])
        loss = joint_loss(out["joints"], order_tgt[sel])
        opt.zero_grad()
        loss.backward()
        opt.step()
        losses.append(float(loss.detach()))
        if log_every and (step + 1) % log_every == 0:
            print(f"step {step + 1}: loss {np.mean(losses[-log_every:]):.4f}")
    model.eval()
    manifest = {
        "config": _config_dict(config),
        "provider": getattr(est.provider, "config", lambda: {"name": est.provider.name})(),
        "samples": len(kept),
        "epoch_length": len(epoch),
        "excluded": excluded,
        "final_loss": losses[-1] if losses else None,
    }
    return TrainResult(est, losses, excluded, time.perf_counter() - t0, manifest)


def _config_dict(config: EstimatorConfig) -> dict:
    d = asdict(config)
    d["image_size"] = list(config.image_size)
    d["heatmap_size"] = list(config.heatmap_size)
    return d


def save_estimator(est: SceneEstimator, path, extra: dict | None = None) -> None:
    """Parameters to ``path`` (npz) and a JSON sidecar next to it."""
    path = Path(path)
    state = {k: v.detach().cpu().numpy() for k, v in est.model.state_dict().items()}
    with open(path, "wb") as fh:
        np.savez(fh, **state)
    cfg = est.model.config
    meta = {
        "num_joints": cfg.num_joints,
        "feature_channels": cfg.feature_channels,
        "heatmap_size": list(cfg.heatmap_size),
        "provider": getattr(est.provider, "config", lambda: {"name": est.provider.name})(),
        "config": _config_dict(cfg),
    }
    if extra:
        meta.update(extra)
    path.with_suffix(".json").write_text(json.dumps(meta, indent=1, sort_keys=True) + "\n")


def load_estimator(path) -> tuple[SceneEstimator, dict]:
    path = Path(path)
    meta = json.loads(path.with_suffix(".json").read_text())
    cfg = dict(meta["config"])
    cfg["provider"] = meta["provider"]
    est = build_estimator(EstimatorConfig(**cfg))
    with np.load(path) as data:
        state = {k: torch.as_tensor(data[k]) for k in data.files}
    est.model.load_state_dict(state)
    est.model.eval()
    return est, meta
