import numpy as np
import pytest
import torch
from scipy.spatial.transform import Rotation

from inbetween.motion import MotionSequence, Skeleton


def random_skeleton(rng: np.random.Generator, n: int) -> Skeleton:
    parents = [None] + [int(rng.integers(0, j)) for j in range(1, n)]
    offsets = rng.normal(size=(n, 3))
    offsets[0] = 0.0
    return Skeleton([f"j{i}" for i in range(n)], parents, offsets)


def random_quats(rng: np.random.Generator, shape) -> np.ndarray:
    """Uniform random rotations as (w, x, y, z)."""
    xyzw = Rotation.random(int(np.prod(shape)), random_state=rng).as_quat()
    return np.roll(xyzw, 1, axis=-1).reshape(*shape, 4)


def random_motion(rng: np.random.Generator, skeleton: Skeleton, frames: int, fps: int = 15) -> MotionSequence:
    return MotionSequence(skeleton, fps, rng.normal(size=(frames, 3)),
                          random_quats(rng, (frames, skeleton.num_joints)))


@pytest.fixture(autouse=True)
def _single_thread_torch():
    # keeps timings and floating-point reduction order stable across machines
    torch.set_num_threads(1)
    yield


def pytest_terminal_summary(terminalreporter):
    import sys
    mod = sys.modules.get("test_acceptance")
    if mod is not None and mod.RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in sorted(mod.RESULTS):
            terminalreporter.write_line(line)
