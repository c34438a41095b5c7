"""Keyframe in-betweening for rigged characters at desk scale.

Render context and keyframes, adapt a video model to them, generate the
in-between video, then recover the motion by optimizing poses to match it.
"""

__version__ = "0.1.0"

from .errors import ConfigError, ContractError, MotionParseError, StageOrderError, UnsupportedRateError
from .motion import MotionSequence, Pose, Skeleton, fk, load_motion, save_motion, slerp, upsample_motion
from .camera import CameraParams, named_view, project
from .render import RenderStyle, render, render_views
from .metrics import evaluate_all, hl2q, l2p, l2q, npss, ssim

__all__ = [
    "CameraParams", "ConfigError", "ContractError", "MotionParseError", "MotionSequence", "Pose",
    "RenderStyle", "Skeleton", "StageOrderError", "UnsupportedRateError", "evaluate_all", "fk",
    "hl2q", "l2p", "l2q", "load_motion", "named_view", "npss", "project", "render", "render_views",
    "save_motion", "slerp", "ssim", "upsample_motion",
]
