import numpy as np
import pytest
import torch
from scipy.signal import correlate2d

from inbetween.camera import CameraParams, named_view
from inbetween.errors import ContractError
from inbetween.motion import MotionSequence, Pose, Skeleton, quat_from_axis_angle, quat_identity
from inbetween.render import (RenderStyle, load_png, luminance, render, render_frames, render_screen,
                              render_tensor, render_views)

from conftest import random_quats


def cam64(scale=10.0):
    return CameraParams([1, 0, 0, 0], np.zeros(3), 64, 64, scale, (-3.0, 3.0))


def single_joint():
    return Skeleton(["root"], [None], np.zeros((1, 3)))


def arm():
    return Skeleton(["a", "b", "c"], [None, 0, 1], np.array([[0, 0, 0], [0.8, 0, 0], [0, 0.8, 0]], float))


def test_root_blob_centered_at_image_center():
    img = render(single_joint(), Pose(np.zeros(3), quat_identity((1,))), cam64(), RenderStyle(sigma=1.0))
    assert img.shape == (64, 64)
    # the blob is symmetric about (32, 32), i.e. between pixels 31 and 32
    peak = img[31:33, 31:33]
    np.testing.assert_allclose(peak, img.max())
    assert img.max() == pytest.approx(1.0)
    np.testing.assert_allclose(img, img[::-1, ::-1], atol=1e-12)


def test_translation_shifts_image_by_scale_times_offset():
    sk, style, cam = arm(), RenderStyle(), cam64(scale=10.0)
    a = render(sk, Pose(np.zeros(3), quat_identity((3,))), cam, style)
    b = render(sk, Pose(np.array([0.5, -0.3, 0.0]), quat_identity((3,))), cam, style)
    xc = correlate2d(b - b.mean(), a - a.mean(), mode="full")
    dy, dx = np.unravel_index(np.argmax(xc), xc.shape)
    assert (dx - 63, dy - 63) == (5, 3)


def test_pixel_gradient_matches_finite_differences():
    sk, style, cam = arm(), RenderStyle(sigma=1.3), cam64()
    rng = np.random.default_rng(0)
    quats = torch.tensor(random_quats(rng, (1, 3)) * 0.2 + [1, 0, 0, 0], dtype=torch.float64)
    quats = quats / quats.norm(dim=-1, keepdim=True)
    root = torch.tensor([[0.11, -0.07, 0.05]], dtype=torch.float64, requires_grad=True)
    weights = torch.tensor(rng.normal(size=(1, 1, 64, 64)))

    def f(r):
        return (render_tensor(sk, r, quats, cam, style) * weights).sum()

    f(root).backward()
    h = 1e-6
    fd = []
    for k in range(3):
        e = torch.zeros(1, 3, dtype=torch.float64)
        e[0, k] = h
        with torch.no_grad():
            fd.append(float((f(root + e) - f(root - e)) / (2 * h)))
    g = root.grad.numpy()[0]
    assert np.max(np.abs(g - fd)) / np.max(np.abs(fd)) < 1e-4


def test_far_outside_renders_background_only():
    img = render(single_joint(), Pose(np.array([40.0, 0.0, 0.0]), quat_identity((1,))), cam64(),
                 RenderStyle())
    assert img.max() < 1e-12


def test_intensity_bounded_by_brightest_primitive():
    style = RenderStyle(channels=3, joint_radius=1.5)
    sk = arm()
    rng = np.random.default_rng(1)
    for _ in range(5):
        img = render(sk, Pose(rng.normal(size=3) * 0.3, random_quats(rng, (3,))), cam64(), style)
        assert img.min() >= 0.0
        assert img.max() <= style.colors(3).max() + 1e-12


def test_render_deterministic_bytes(tmp_path):
    m = MotionSequence(arm(), 30, np.zeros((3, 3)), np.tile(quat_identity((3,)), (3, 1, 1)))
    cams = {"front": named_view("front", scale=15.0)}
    a = render_views(m, cams, RenderStyle(), tmp_path / "a")
    b = render_views(m, cams, RenderStyle(), tmp_path / "b")
    assert [p.read_bytes() for p in a["front"]] == [p.read_bytes() for p in b["front"]]


def test_render_views_four_views_sixty_frames(tmp_path):
    n = 60
    rng = np.random.default_rng(2)
    m = MotionSequence(arm(), 30, rng.normal(size=(n, 3)) * 0.05, random_quats(rng, (n, 3)))
    cams = {v: named_view(v, scale=12.0, image_size=(16, 16)) for v in ("front", "left", "right", "back")}
    out = render_views(m, cams, RenderStyle(), tmp_path)
    assert {v: len(p) for v, p in out.items()} == {v: 60 for v in cams}
    assert out["left"][7].name == "00007.png"
    assert load_png(out["left"][7]).shape == (16, 16)


def test_front_back_of_symmetric_pose_are_mirrors():
    # pose symmetric under z -> -z (all points in the z = 0 plane)
    sk = arm()
    pose = Pose(np.zeros(3), quat_identity((3,)))
    front = render(sk, pose, named_view("front", scale=15.0), RenderStyle())
    back = render(sk, pose, named_view("back", scale=15.0), RenderStyle())
    np.testing.assert_allclose(front, back[:, ::-1], atol=1e-12)


def test_invariant_under_hierarchy_preserving_reorder():
    # a star: root with two leaves; swapping the leaves (and their colors) changes nothing
    colors = (1.0, 0.8, 0.6)
    sk = Skeleton(["r", "a", "b"], [None, 0, 0], np.array([[0, 0, 0], [0.6, 0, 0], [0, 0.7, 0]], float))
    sk2 = Skeleton(["r", "b", "a"], [None, 0, 0], np.array([[0, 0, 0], [0, 0.7, 0], [0.6, 0, 0]], float))
    rng = np.random.default_rng(4)
    q = random_quats(rng, (3,))
    a = render(sk, Pose(np.zeros(3), q), cam64(15.0), RenderStyle(joint_colors=colors))
    b = render(sk2, Pose(np.zeros(3), q[[0, 2, 1]]), cam64(15.0), RenderStyle(joint_colors=(1.0, 0.6, 0.8)))
    np.testing.assert_allclose(a, b, atol=1e-12)


def test_small_pose_perturbation_gives_small_image_change():
    sk, cam, style = arm(), cam64(15.0), RenderStyle()
    q0 = quat_identity((3,))
    q1 = q0.copy()
    q1[1] = quat_from_axis_angle([0, 0, 1], 1e-3)
    a = render(sk, Pose(np.zeros(3), q0), cam, style)
    b = render(sk, Pose(np.zeros(3), q1), cam, style)
    # 1e-3 rad moves the leaf by 0.012 px; the softness bounds the slope by ~1/sigma
    assert np.abs(a - b).max() < 0.02


def test_rgb_channels_and_luminance():
    img = render(arm(), Pose(np.zeros(3), quat_identity((3,))), cam64(), RenderStyle(channels=3))
    assert img.shape == (64, 64, 3)
    np.testing.assert_allclose(luminance(img), img @ [0.299, 0.587, 0.114])


def test_render_frames_matches_single_render():
    rng = np.random.default_rng(5)
    m = MotionSequence(arm(), 30, rng.normal(size=(4, 3)) * 0.1, random_quats(rng, (4, 3)))
    frames = render_frames(m, cam64(), RenderStyle(), chunk=3)
    for i in range(4):
        np.testing.assert_allclose(frames[i], render(m.skeleton, m.pose(i), cam64(), RenderStyle()))


def test_style_rejects_hard_edges():
    with pytest.raises(ContractError):
        RenderStyle(sigma=0.0)


def test_render_screen_accepts_unbatched_input():
    img = render_screen(torch.tensor([[8.0, 8.0, 0.0]]), [None], RenderStyle(), 16, 16)
    assert img.shape == (1, 1, 16, 16)
