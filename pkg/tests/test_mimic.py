import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from inbetween.camera import named_view, project
from inbetween.errors import ConfigError, ContractError
from inbetween.mimic import (FrameTask, MimicConfig, count_repetitions, inward_schedule, mimic_frame,
                             mimic_loss, mimic_sequence, plan_batches, regularizer_targets)
from inbetween.motion import (MotionSequence, Pose, fk, quat_angle, quat_from_axis_angle, quat_identity,
                              quat_mul)
from inbetween.render import RenderStyle, render, render_frames
from inbetween.scenes import chain_skeleton

STYLE = RenderStyle(channels=3, joint_radius=1.5)


def arm():
    return chain_skeleton(3, 0.25)


def cam():
    return named_view("front", (0.0, 0.25, 0.0), 5.0, (32, 32), 40.0, 0.6)


def swing_motion(frames=11, fps=15, keyframes=(0, 5, 10)):
    t = np.arange(frames) / fps
    rots = np.zeros((frames, 3, 4))
    rots[..., 0] = 1.0
    for j, (amp, ph) in enumerate([(0.4, 0.0), (0.6, 1.0)]):
        rots[:, j] = quat_from_axis_angle([0.8, 0.0, 0.6], amp * np.sin(2 * np.pi * t + ph))
    roots = np.zeros((frames, 3))
    roots[:, 1] = 0.02 * np.sin(2 * np.pi * t)
    return MotionSequence(arm(), fps, roots, rots, list(keyframes))


def targets_for(sk, root, quats, c=None):
    c = c or cam()
    pose = Pose(np.asarray(root, float), np.asarray(quats, float))
    return project(fk(sk, pose), c), render(sk, pose, c, STYLE)


def as_t(x):
    return torch.as_tensor(np.asarray(x, dtype=float), dtype=torch.float64)


# -- schedule ---------------------------------------------------------------------

def test_inward_schedule_examples():
    assert inward_schedule(0, 10) == [(1, 9), (2, 8), (3, 7), (4, 6), (5,)]
    assert inward_schedule(0, 2) == [(1,)]
    assert inward_schedule(0, 3) == [(1, 2)]
    assert inward_schedule(4, 5) == []
    assert inward_schedule(4, 4) == []


@settings(max_examples=200, deadline=None)
@given(st.integers(-50, 50), st.integers(0, 40))
def test_schedule_completeness(k1, gap):
    k2 = k1 + gap
    frames = [j for r in inward_schedule(k1, k2) for j in r]
    assert sorted(frames) == list(range(k1 + 1, k2))
    assert len(frames) == len(set(frames))
    # each frame is adjacent to a keyframe or to a frame from an earlier round
    done = {k1, k2}
    for r in inward_schedule(k1, k2):
        assert all(j - 1 in done or j + 1 in done for j in r)
        done.update(r)


def test_repetition_count():
    assert count_repetitions(8, 2, 15, 6) == 14
    # 6 intervals of 15 frames: 7 rounds of 12 tasks (2 batches) and none left for a middle
    batches = plan_batches([15 * s for s in range(2, 9)], 6)
    assert len(batches) == 14 and all(len(b) == 6 for b in batches)
    assert count_repetitions(8, 2, 15, 1) == 6 * 14


# -- regularizer targets -----------------------------------------------------------

def test_regularizer_targets():
    p, r = regularizer_targets(5, 0, 10, [0, 0, 0], [2, 4, -6], quat_identity((3,)))
    np.testing.assert_allclose(p, [1, 2, -3])
    p, _ = regularizer_targets(1, 0, 4, [0, 0, 0], [4, 0, 0], quat_identity((3,)))
    np.testing.assert_allclose(p, [1, 0, 0])
    with pytest.raises(ContractError):
        regularizer_targets(0, 0, 4, [0, 0, 0], [4, 0, 0], quat_identity((3,)))


# -- objective ---------------------------------------------------------------------

def test_loss_zero_at_consistent_pose():
    m = swing_motion()
    sk = m.skeleton
    tj, ti = targets_for(sk, m.roots[3], m.rotations[3])
    from inbetween.render import luminance
    total, terms = mimic_loss(as_t(m.roots[3:4]), as_t(m.rotations[3:4]), sk, cam(), STYLE, as_t(tj[None]),
                              as_t(luminance(ti)[None]), as_t(m.roots[3:4]), as_t(m.rotations[3:4]), MimicConfig())
    assert float(total[0]) == pytest.approx(0.0, abs=1e-18)
    assert set(terms) == {"joint", "image", "pos", "rot"}


def test_zero_weights_leave_joint_term():
    m = swing_motion()
    sk = m.skeleton
    tj, ti = targets_for(sk, m.roots[2], m.rotations[2])
    cfg = MimicConfig(lambda_img=0, lambda_pos=0, lambda_rot=0)
    args = (as_t(m.roots[5:6]), as_t(m.rotations[5:6]), sk, cam(), STYLE, as_t(tj[None]), as_t(ti[None, ..., 0]),
            as_t(np.zeros((1, 3))), as_t(quat_identity((1, 3))))
    total, terms = mimic_loss(*args, cfg)
    screen = project(fk(sk, Pose(m.roots[5], m.rotations[5])), cam())
    assert float(total[0]) == pytest.approx(float(((screen - tj) ** 2).sum()), rel=1e-12)
    assert "image" not in terms


def fd_problem(seed=0):
    rng = np.random.default_rng(seed)
    m = swing_motion()
    sk = m.skeleton
    tj, ti = targets_for(sk, m.roots[4], m.rotations[4])
    from inbetween.render import luminance
    root = as_t(m.roots[1:2] + rng.normal(size=3) * 0.01)
    quats = as_t(m.rotations[1:2])
    fixed = (sk, cam(), STYLE, as_t(tj[None]), as_t(luminance(ti)[None]), as_t(m.roots[2:3]),
             as_t(m.rotations[2:3]), MimicConfig())
    return root, quats, fixed


def test_gradient_wrt_root_matches_finite_differences():
    root, quats, fixed = fd_problem()
    root.requires_grad_(True)
    mimic_loss(root, quats, *fixed)[0].sum().backward()
    h = 1e-6
    fd = []
    for k in range(3):
        e = torch.zeros_like(root)
        e[0, k] = h
        with torch.no_grad():
            fd.append(float((mimic_loss(root + e, quats, *fixed)[0] - mimic_loss(root - e, quats, *fixed)[0])
                            / (2 * h)))
    g = root.grad[0].numpy()
    assert np.linalg.norm(g - fd) / np.linalg.norm(fd) < 1e-4


def test_gradient_along_rotation_tangents_matches_finite_differences():
    root, quats, fixed = fd_problem(1)
    quats.requires_grad_(True)
    total = mimic_loss(root, quats, *fixed)[0].sum()
    (g,) = torch.autograd.grad(total, quats)
    rng = np.random.default_rng(2)
    h = 1e-6
    for _ in range(6):
        # perturb along the unit sphere: q(eps) = exp(eps * axis) * q
        j = int(rng.integers(0, 3))
        axis = rng.normal(size=3)
        axis /= np.linalg.norm(axis)

        def at(eps):
            q = quats.detach().numpy().copy()
            q[0, j] = quat_mul(quat_from_axis_angle(axis, eps), q[0, j])
            with torch.no_grad():
                return float(mimic_loss(root, as_t(q), *fixed)[0])

        fd = (at(h) - at(-h)) / (2 * h)
        dq = quat_mul(np.concatenate([[0.0], 0.5 * axis]), quats.detach().numpy()[0, j])
        analytic = float(np.dot(g[0, j].numpy(), dq))
        assert abs(analytic - fd) <= 1e-3 * max(abs(fd), 1e-6)


# -- single frame --------------------------------------------------------------------

def task_for(m, j, init_root, init_rot, p_intp=None, r_prev=None):
    return FrameTask(j, j - 1, m.roots[j] if p_intp is None else p_intp,
                     init_rot if r_prev is None else r_prev, np.array(init_root), np.array(init_rot))


def test_fixed_point_when_target_is_initialization():
    m = swing_motion()
    tj, ti = targets_for(m.skeleton, m.roots[3], m.rotations[3])
    res = mimic_frame(task_for(m, 3, m.roots[3], m.rotations[3]), m.skeleton, cam(), STYLE, tj, ti)
    np.testing.assert_allclose(res.root, m.roots[3], atol=1e-12)
    np.testing.assert_allclose(res.rotations, m.rotations[3], atol=1e-12)
    assert res.best_loss <= res.initial_loss


def bone_directions(sk, root, quats):
    pos = fk(sk, Pose(np.asarray(root, float), np.asarray(quats, float)))
    d = np.array([pos[c] - pos[p] for c, p in enumerate(sk.parents) if p is not None])
    return d / np.linalg.norm(d, axis=1, keepdims=True)


def test_recovers_swing_perturbation():
    """Perturb each bone-carrying joint by 5 degrees perpendicular to its bone; recover < 1 degree.

    Recovery is measured on global bone directions. A twist about a parent
    bone paired with a compensating child rotation leaves every joint where it
    was, so the raw quaternions are only determined up to that null space.
    """
    m = swing_motion()
    j = 3
    sk = m.skeleton
    gt_root, gt_rot = m.roots[j], m.rotations[j]
    tj, ti = targets_for(sk, gt_root, gt_rot)
    rng = np.random.default_rng(0)
    init = gt_rot.copy()
    for k in range(2):
        axis = np.cross(sk.offsets[k + 1], rng.normal(size=3))
        init[k] = quat_mul(init[k], quat_from_axis_angle(axis, math.radians(5.0)))
    np.testing.assert_allclose(np.degrees(quat_angle(init[:2], gt_rot[:2])), [5.0, 5.0])
    cfg = MimicConfig(lambda_rot=0.0)
    res = mimic_frame(task_for(m, j, gt_root, init, p_intp=gt_root), sk, cam(), STYLE, tj, ti, cfg)

    def err(q):
        cos = (bone_directions(sk, gt_root, q) * bone_directions(sk, gt_root, gt_rot)).sum(axis=1)
        return np.degrees(np.arccos(np.clip(cos, -1, 1))).mean()

    assert err(init) > 4.0
    assert err(res.rotations) < 1.0
    assert res.best_loss < 1e-3 * res.initial_loss


def test_divergence_returns_initialization_flagged():
    m = swing_motion()
    tj, ti = targets_for(m.skeleton, m.roots[3], m.rotations[3])
    cfg = MimicConfig(optimizer="sgd", lr_root=10.0, lr_rot=10.0, steps=5, lambda_pos=1e6)
    t = task_for(m, 3, m.roots[3] + 0.05, m.rotations[3])
    res = mimic_frame(t, m.skeleton, cam(), STYLE, tj, ti, cfg)
    assert res.failed and "divergence" in res.reason
    np.testing.assert_array_equal(res.root, t.init_root)


def test_config_validation_and_defaults():
    d = MimicConfig()
    assert (d.lambda_img, d.lambda_pos, d.lambda_rot, d.steps, d.batch_size, d.views) == (50, 7000, 30000, 100, 6, 1)
    for bad in (dict(lambda_img=-1), dict(steps=0), dict(optimizer="lbfgs"), dict(views=2)):
        with pytest.raises(ConfigError):
            MimicConfig(**bad)


# -- sequence --------------------------------------------------------------------------

def exact_targets(m, c=None):
    c = c or cam()
    return np.stack([project(p, c) for p in m.global_positions()])


def run_sequence(batch_size, steps=15):
    m = swing_motion()
    video = render_frames(m, cam(), STYLE)
    cfg = MimicConfig(steps=steps, batch_size=batch_size)
    return m, mimic_sequence(m, video, None, cam(), STYLE, cfg, target_joints=exact_targets(m))


def test_sequence_keeps_keyframes_and_counts_batches():
    m, res = run_sequence(6)
    for k in m.keyframe_indices:
        assert np.array_equal(res.motion.roots[k], m.roots[k])
        assert np.array_equal(res.motion.rotations[k], m.rotations[k])
    # two intervals of five frames: two rounds of four tasks, no middle frame
    assert res.repetitions == 2 and res.rounds == 2
    assert sorted(f.index for f in res.frames) == [1, 2, 3, 4, 6, 7, 8, 9]
    assert all(f.best_loss <= f.initial_loss for f in res.frames)


def test_batching_does_not_change_results():
    _, a = run_sequence(6)
    _, b = run_sequence(1)
    assert b.repetitions == 8
    np.testing.assert_allclose(a.motion.roots, b.motion.roots, atol=1e-6)
    np.testing.assert_allclose(a.motion.rotations, b.motion.rotations, atol=1e-6)


def test_middle_frame_initialization_and_regularizer_side():
    m = MotionSequence(arm(), 15, np.zeros((5, 3)), quat_identity((5, 3)), [0, 4])
    video = render_frames(m, cam(), STYLE)
    res = mimic_sequence(m, video, None, cam(), STYLE, MimicConfig(steps=1), target_joints=exact_targets(m))
    middle = [f for f in res.frames if f.index == 2][0]
    assert middle.round == 2


def test_missing_video_frame_named():
    m = swing_motion()
    video = list(render_frames(m, cam(), STYLE))
    video[7] = None
    with pytest.raises(ContractError, match="frame 7"):
        mimic_sequence(m, video, None, cam(), STYLE, MimicConfig(steps=1), target_joints=exact_targets(m))


def test_trace_csv(tmp_path):
    _, res = run_sequence(6, steps=2)
    res.write_trace(tmp_path / "trace.csv")
    rows = (tmp_path / "trace.csv").read_text().splitlines()
    assert rows[0].startswith("frame,round,batch,initial_loss,best_loss")
    assert len(rows) == 9
