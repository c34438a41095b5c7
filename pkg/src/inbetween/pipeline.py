"""Stage runner for the full in-betweening pipeline.

Stages, in order: ``synth-data`` -> ``adapt`` / ``train-estimator`` ->
``generate`` -> ``mimic`` -> ``evaluate``. Every stage reads files written by
earlier stages under one output root and writes a manifest to
``<root>/manifests/<stage>.json`` holding the effective configuration,
SHA-256 checksums of its inputs and outputs, timings and library versions.
A stage whose fingerprint (config, flags, input checksums) and outputs are
unchanged is skipped unless forced.
"""

from __future__ import annotations

import copy
import csv
import hashlib
import json
import logging
import os
import platform
import shutil
import time
from importlib import resources
from pathlib import Path
from typing import Callable, Iterable, Mapping

import numpy as np

from .clips import assemble_estimator_dataset, gather_clips, read_dataset_manifest, write_dataset_manifest
from .diffusion import (AdaptConfig, ToyBackendConfig, ToyVideoBackend, clips_from_frames, icadapt,
                        load_checkpoint, save_checkpoint)
from .errors import ConfigError, ContractError, StageOrderError
from .estimator import EstimatorConfig, load_estimator, save_estimator, train_estimator
from .guidance import two_stage_generate
from .metrics import HierarchyFilter, evaluate_all
from .mimic import MimicConfig, mimic_sequence
from .motion import MotionSequence, decimate, load_motion, motion_from_dict, save_motion, upsample_motion
from .render import RenderStyle, frame_name, load_png, render_views, save_png
from .scenes import TOY_SCENE_FILE, ToyScene

log = logging.getLogger("inbetween.pipeline")

STAGES = ("synth-data", "adapt", "train-estimator", "generate", "mimic", "evaluate")
SEEDED_SECTIONS = ("adapt", "backend", "estimator", "generate")
OUTPUT_ROOT_ENV = "ANYMOLE_OUTPUT_ROOT"
BUNDLED_CONFIG = "toy_config.json"
ESTIMATOR_VIEWS = ("front", "left", "right")


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------

def bundled_config() -> dict:
    return json.loads(resources.files("inbetween").joinpath("data", BUNDLED_CONFIG).read_text())


def load_config(path) -> dict:
    """Read a run config, or the config snapshot inside a stage manifest.

    ``"toy"`` selects the bundled toy configuration.
    """
    if str(path) == "toy":
        cfg = bundled_config()
        cfg.setdefault("_base_dir", str(Path.cwd()))
        return cfg
    path = Path(path)
    try:
        data = json.loads(path.read_text())
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON at line {exc.lineno}, column {exc.colno}: {exc.msg}") from None
    if isinstance(data, dict) and "stage" in data and "config" in data:
        data = data["config"]
    else:
        data["_base_dir"] = str(path.parent.resolve())
    return data


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_overrides(cfg: dict, overrides: Iterable[str]) -> dict:
    """Apply ``section.key=value`` overrides; values are parsed as JSON when possible."""
    cfg = copy.deepcopy(cfg)
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not of the form key=value")
        key, value = item.split("=", 1)
        node = cfg
        parts = key.split(".")
        for p in parts[:-1]:
            node = node.setdefault(p, {})
            if not isinstance(node, dict):
                raise ConfigError(f"override {key!r} descends into a non-section")
        node[parts[-1]] = _parse_value(value)
    return cfg


def validate_config(cfg: Mapping) -> None:
    for section in ("scene",) + SEEDED_SECTIONS + ("mimic",):
        if section not in cfg or not isinstance(cfg[section], dict):
            raise ConfigError(f"config lacks the {section!r} section")
    missing = [s for s in SEEDED_SECTIONS if "seed" not in cfg[s]]
    if missing:
        raise ConfigError(f"randomized stage(s) without an explicit seed: {missing}")
    if "motion" not in cfg["scene"]:
        raise ConfigError("scene.motion is required")


def output_root(cfg: Mapping, override=None) -> Path:
    if override:
        return Path(override)
    env = os.environ.get(OUTPUT_ROOT_ENV)
    if env:
        return Path(env)
    root = Path(cfg.get("output_root", "runs/default"))
    if not root.is_absolute():
        root = Path(cfg.get("_base_dir", ".")) / root
    return root


def _scene(cfg: Mapping) -> ToyScene:
    sc = cfg["scene"]
    ref = sc["motion"]
    if ref == "toy":
        text = resources.files("inbetween").joinpath("data", TOY_SCENE_FILE).read_text()
        motion = motion_from_dict(json.loads(text))
    else:
        path = Path(ref)
        if not path.is_absolute():
            path = Path(cfg.get("_base_dir", ".")) / path
        if not path.exists():
            raise ConfigError(f"motion file not found: {path}")
        motion = load_motion(path)
    style = RenderStyle(**sc.get("style", {}))
    return ToyScene(motion, tuple(sc.get("image_size", (64, 64))), style,
                    float(sc.get("margin", 1.15)), float(sc.get("distance", 5.0)))


def _scene_motion_source(cfg: Mapping) -> Path | None:
    ref = cfg["scene"]["motion"]
    if ref == "toy":
        return None
    path = Path(ref)
    return path if path.is_absolute() else Path(cfg.get("_base_dir", ".")) / path


def known_frames_only(motion: MotionSequence) -> MotionSequence:
    """Copy of ``motion`` where every frame that is neither context nor keyframe
    holds the most recent known pose, so ground truth cannot leak downstream."""
    known = set(range(motion.context_length)) | set(motion.keyframe_indices)
    roots = motion.roots.copy()
    rots = motion.rotations.copy()
    last = None
    for i in range(len(motion)):
        if i in known:
            last = i
        elif last is not None:
            roots[i] = motion.roots[last]
            rots[i] = motion.rotations[last]
    return motion.replace(roots=roots, rotations=rots)


# ---------------------------------------------------------------------------
# manifests
# ---------------------------------------------------------------------------

def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


def _files(paths: Iterable[Path]) -> list[Path]:
    out = []
    for p in paths:
        p = Path(p)
        if p.is_dir():
            out.extend(sorted(q for q in p.rglob("*") if q.is_file()))
        elif p.exists():
            out.append(p)
    return out


def checksums(paths: Iterable[Path], root: Path) -> dict[str, str]:
    return {str(p.relative_to(root)) if p.is_relative_to(root) else str(p): sha256_file(p)
            for p in _files(paths)}


def _versions() -> dict:
    import scipy
    import torch

    from . import __version__
    return {"python": platform.python_version(), "numpy": np.__version__, "scipy": scipy.__version__,
            "torch": torch.__version__, "inbetween": __version__}


def _public_config(cfg: Mapping) -> dict:
    """Config snapshot for manifests, with the motion path made absolute."""
    out = copy.deepcopy({k: v for k, v in cfg.items() if not k.startswith("_")})
    src = _scene_motion_source(cfg)
    if src is not None:
        out["scene"]["motion"] = str(src.resolve())
    return out


def _fingerprint(sections: dict, flags: dict, inputs: dict) -> str:
    blob = json.dumps({"config": sections, "flags": flags, "inputs": inputs}, sort_keys=True)
    return hashlib.sha256(blob.encode()).hexdigest()


# ---------------------------------------------------------------------------
# stages
# ---------------------------------------------------------------------------

def scene_views(cfg) -> list[str]:
    return list(cfg["scene"].get("views", ["front", "left", "right", "back"]))


def _stage_synth(cfg, root: Path, flags) -> None:
    scene = _scene(cfg)
    m = scene.motion
    if m.context_length == 0 or not m.keyframe_indices:
        raise ConfigError("scene motion needs context frames and keyframes")
    views = scene_views(cfg)
    cams = scene.cameras(tuple(views))
    out = root / "synth"
    if out.exists():
        shutil.rmtree(out)
    out.mkdir(parents=True)
    render_views(m, cams, scene.style, out / "context", range(m.context_length))
    render_views(m, cams, scene.style, out / "keyframe", m.keyframe_indices)
    save_motion(known_frames_only(m), out / "known_motion.json")
    (out / "cameras.json").write_text(json.dumps({v: c.to_dict() for v, c in cams.items()}, indent=1) + "\n")

    adapt = cfg["adapt"]
    clips = gather_clips(views, m.context_length, k=int(cfg["backend"].get("frames", 16)),
                         intervals=tuple(adapt.get("intervals", (1, 2, 3))), base_fps=m.fps)
    g = m.global_positions()
    est_views = [v for v in ESTIMATOR_VIEWS if v in views]
    ctx = {v: [(i, g[i]) for i in range(m.context_length)] for v in est_views}
    kf = {v: [(i, g[i]) for i in m.keyframe_indices] for v in est_views}
    w = 1 if flags.get("no_keyframe_weighting") else int(cfg["estimator"].get("keyframe_weight", 3))
    samples = assemble_estimator_dataset(ctx, kf, cams, w=w, views_kept=est_views)
    write_dataset_manifest(out / "dataset.json", clips, samples)


def _load_view_frames(root: Path, kind: str, view: str, indices) -> list[np.ndarray]:
    return [load_png(root / "synth" / kind / view / frame_name(i)) for i in indices]


def _stage_adapt(cfg, root: Path, flags) -> None:
    known = load_motion(root / "synth" / "known_motion.json")
    clips_idx, _ = read_dataset_manifest(root / "synth" / "dataset.json")
    views = sorted({c.view for c in clips_idx})
    frames = {v: _load_view_frames(root, "context", v, range(known.context_length)) for v in views}
    backend = ToyVideoBackend(_backend_config(cfg))
    a = dict(cfg["adapt"])
    a["intervals"] = tuple(a.get("intervals", (1, 2, 3)))
    acfg = AdaptConfig(**a)
    out = root / "adapt"
    out.mkdir(parents=True, exist_ok=True)
    if flags.get("no_icadapt"):
        save_checkpoint(backend, out / "backend.npz", None, {"icadapt": False})
        (out / "losses.csv").write_text("step,loss\n")
        return
    res = icadapt(backend, clips_from_frames(frames, clips_idx), acfg)
    save_checkpoint(res.backend, out / "backend.npz", acfg,
                    {"icadapt": True, "update_counts": res.update_counts, "clips": len(clips_idx)})
    with open(out / "losses.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["step", "loss"])
        for i, v in enumerate(res.losses):
            w.writerow([i + 1, repr(v)])


def _backend_config(cfg) -> ToyBackendConfig:
    b = dict(cfg["backend"])
    if "fps_values" in b:
        b["fps_values"] = tuple(b["fps_values"])
    bc = ToyBackendConfig(**b)
    w, h = cfg["scene"].get("image_size", (64, 64))
    if bc.image_size != w or bc.image_size != h:
        raise ConfigError(f"backend image_size {bc.image_size} does not match the scene image {w}x{h}")
    return bc


def _estimator_config(cfg, num_joints: int) -> EstimatorConfig:
    e = dict(cfg["estimator"])
    e.setdefault("image_size", cfg["scene"].get("image_size", (64, 64)))
    e.setdefault("heatmap_size", e["image_size"])
    return EstimatorConfig(num_joints=num_joints, **e)


def _stage_train_estimator(cfg, root: Path, flags) -> None:
    known = load_motion(root / "synth" / "known_motion.json")
    _, samples = read_dataset_manifest(root / "synth" / "dataset.json")
    images = {}
    for s in samples:
        if s.image not in images:
            images[s.image] = load_png(root / "synth" / s.image.relpath())
    ecfg = _estimator_config(cfg, known.skeleton.num_joints)
    res = train_estimator(samples, images, ecfg)
    out = root / "estimator"
    out.mkdir(parents=True, exist_ok=True)
    save_estimator(res.estimator, out / "estimator.npz",
                   {"samples": res.manifest["samples"], "excluded": res.excluded,
                    "keyframe_weighting": not flags.get("no_keyframe_weighting", False)})
    with open(out / "curve.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["step", "loss"])
        for i, v in enumerate(res.losses):
            w.writerow([i + 1, repr(v)])


def _stage_generate(cfg, root: Path, flags) -> None:
    known = load_motion(root / "synth" / "known_motion.json")
    backend, _ = load_checkpoint(root / "adapt" / "backend.npz")
    g = cfg["generate"]
    view = g.get("view", "front")
    fps = known.fps
    keyframes = {k / fps: load_png(root / "synth" / "keyframe" / view / frame_name(k))
                 for k in known.keyframe_indices}
    context = _load_view_frames(root, "context", view, range(known.context_length))
    total = (len(known) - 1) // fps
    if (len(known) - 1) % fps:
        raise ContractError("scene length must be a whole number of seconds")
    frames, coarse, fine = two_stage_generate(
        backend, keyframes, context, total, known.context_length // fps, fps, int(g["seed"]),
        g.get("text", "a rendered character moving in a plain scene"), fine=not flags.get("no_fine_stage"))
    out = root / "generate"
    if out.exists():
        shutil.rmtree(out)
    for sub, seq in (("coarse", coarse.frames), ("fine", frames)):
        d = out / sub
        d.mkdir(parents=True)
        for i, img in enumerate(seq):
            save_png(img, d / frame_name(i))
    plan = {"coarse": coarse.plan.to_dict(), "fine": fine.plan.to_dict() if fine else None,
            "backend_segment_calls": backend.segment_calls, "view": view, "fine_stage": fine is not None}
    (out / "plan.json").write_text(json.dumps(plan, indent=1) + "\n")


def _stage_mimic(cfg, root: Path, flags) -> None:
    known = load_motion(root / "synth" / "known_motion.json")
    est, _ = load_estimator(root / "estimator" / "estimator.npz")
    scene = _scene(cfg)
    mc = dict(cfg["mimic"])
    view = mc.pop("view", "front")
    mcfg = MimicConfig(**mc)
    cam = scene.cameras((view,))[view]
    ratio = known.fps // 15
    m15 = decimate(known, ratio)
    fine_dir = root / "generate" / "fine"
    video = []
    for i in range(len(m15)):
        p = fine_dir / frame_name(i)
        video.append(load_png(p) if p.exists() else None)
    res = mimic_sequence(m15, video, est, cam, scene.style, mcfg)
    out = root / "mimic"
    out.mkdir(parents=True, exist_ok=True)
    save_motion(res.motion, out / "motion_15fps.json")
    save_motion(upsample_motion(res.motion, known.fps), out / "motion_30fps.json")
    res.write_trace(out / "loss_trace.csv")
    (out / "summary.json").write_text(json.dumps(
        {"repetitions": res.repetitions, "rounds": res.rounds, "config": res.config,
         "failed_frames": [f.index for f in res.frames if f.failed]}, indent=1) + "\n")


LOWER_IS_BETTER = {"l2q": True, "hl2q": True, "l2p": True, "npss": True, "ssim": False}


def check_thresholds(values: Mapping[str, float], thresholds: Mapping[str, float]) -> dict[str, bool]:
    """Pass/fail per threshold; SSIM thresholds are minimums, all others maximums."""
    out = {}
    for name, limit in thresholds.items():
        if name not in values:
            out[name] = False
            continue
        v = values[name]
        out[name] = v <= limit if LOWER_IS_BETTER.get(name, True) else v >= limit
    return out


def _stage_evaluate(cfg, root: Path, flags) -> None:
    scene = _scene(cfg)
    gt = scene.motion
    pred = load_motion(root / "mimic" / "motion_30fps.json")
    ev = cfg.get("evaluate", {})
    cams = list(scene.cameras(tuple(ev.get("views", ["front"]))).values())
    frames = range(gt.context_length, len(gt))
    report = evaluate_all(pred, gt, cams, scene.style, frames=frames,
                          filter=HierarchyFilter(float(ev.get("hierarchy_threshold", 0.5))))
    thresholds = dict(ev.get("thresholds", {}))
    thresholds.update(flags.get("thresholds", {}))
    passed = check_thresholds(report.values, thresholds)
    out = root / "evaluate"
    out.mkdir(parents=True, exist_ok=True)
    doc = report.to_dict()
    doc["thresholds"] = thresholds
    doc["passed"] = passed
    (out / "report.json").write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n")
    report.write_csv(out / "report.csv")


# stage -> (runner, config sections in the fingerprint, inputs, outputs)
_STAGE_TABLE: dict[str, tuple[Callable, tuple[str, ...], tuple[str, ...], tuple[str, ...]]] = {
    "synth-data": (_stage_synth, ("scene", "adapt", "backend", "estimator"), (), ("synth",)),
    "adapt": (_stage_adapt, ("adapt", "backend"),
              ("synth/known_motion.json", "synth/dataset.json", "synth/context"), ("adapt",)),
    "train-estimator": (_stage_train_estimator, ("estimator", "scene"),
                        ("synth/known_motion.json", "synth/dataset.json", "synth/context", "synth/keyframe"),
                        ("estimator",)),
    "generate": (_stage_generate, ("generate",),
                 ("synth/known_motion.json", "synth/context", "synth/keyframe", "adapt/backend.npz"),
                 ("generate",)),
    "mimic": (_stage_mimic, ("mimic", "scene"),
              ("synth/known_motion.json", "estimator/estimator.npz", "generate/fine"), ("mimic",)),
    "evaluate": (_stage_evaluate, ("evaluate", "scene"), ("mimic/motion_30fps.json",), ("evaluate",)),
}
_PRODUCER = {"synth": "synth-data", "adapt": "adapt", "estimator": "train-estimator",
             "generate": "generate", "mimic": "mimic"}
_FLAG_STAGES = {"no_icadapt": ("adapt",), "no_fine_stage": ("generate",),
                "no_keyframe_weighting": ("synth-data",), "thresholds": ("evaluate",)}


def run_stage(stage: str, cfg: dict, root=None, force: bool = False, flags: Mapping | None = None) -> dict:
    """Run one stage (or skip it when up to date) and return its manifest."""
    if stage not in _STAGE_TABLE:
        raise ConfigError(f"unknown stage {stage!r}; expected one of {STAGES}")
    validate_config(cfg)
    root = output_root(cfg, root)
    runner, sections, inputs, outputs = _STAGE_TABLE[stage]
    flags = {k: v for k, v in dict(flags or {}).items() if v and stage in _FLAG_STAGES.get(k, ())}

    for rel in inputs:
        if not (root / rel).exists():
            producer = _PRODUCER.get(rel.split("/")[0], "?")
            raise StageOrderError(f"stage {stage!r} needs {root / rel}, which is written by {producer!r}; "
                                  f"run that stage first")
    in_paths = [root / rel for rel in inputs]
    src = _scene_motion_source(cfg) if stage in ("synth-data", "evaluate", "mimic") else None
    if src is not None:
        if not src.exists():
            raise ConfigError(f"motion file not found: {src}")
        in_paths.append(src)
    in_sums = checksums(in_paths, root)
    snapshot = {s: cfg.get(s) for s in sections}
    fp = _fingerprint(snapshot, flags, in_sums)

    mpath = root / "manifests" / f"{stage}.json"
    if mpath.exists() and not force:
        old = json.loads(mpath.read_text())
        if old.get("fingerprint") == fp and old.get("outputs") == checksums([root / o for o in outputs], root):
            log.info("%s: up to date, skipped", stage)
            old["skipped"] = True
            return old

    log.info("%s: running", stage)
    t0 = time.perf_counter()
    runner(cfg, root, flags)
    manifest = {
        "stage": stage,
        "fingerprint": fp,
        "config": _public_config(cfg),
        "flags": flags,
        "inputs": in_sums,
        "outputs": checksums([root / o for o in outputs], root),
        "timings": {"seconds": round(time.perf_counter() - t0, 3)},
        "versions": _versions(),
    }
    mpath.parent.mkdir(parents=True, exist_ok=True)
    mpath.write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")
    manifest["skipped"] = False
    return manifest


def run_all(cfg: dict, root=None, force: bool = False, flags: Mapping | None = None) -> dict[str, dict]:
    return {s: run_stage(s, cfg, root, force, flags) for s in STAGES}
