import json
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.spatial.transform import Rotation
from scipy.stats import wasserstein_distance
from skimage.metrics import structural_similarity

from inbetween.errors import ConfigError, ContractError
from inbetween.metrics import (BUILTIN_METRICS, HierarchyFilter, MetricRegistry, evaluate_all, hl2q, l2p, l2q,
                               npss, power_spectrum_emd, ssim)
from inbetween.motion import MotionSequence, Skeleton, quat_from_axis_angle

from conftest import random_motion, random_quats, random_skeleton


def chain(n):
    return Skeleton([f"j{i}" for i in range(n)], [None] + list(range(n - 1)),
                    np.array([[0.0, 0, 0]] + [[0, 1.0, 0]] * (n - 1)))


def with_rotations(m, rots):
    return m.replace(rotations=rots)


# -- oracles ---------------------------------------------------------------------

def brute_l2p(pred, gt):
    """Global positions by explicit matrix chains, averaged joint by joint."""
    sk = gt.skeleton

    def positions(m, f):
        out = []
        mats = []
        for j, p in enumerate(sk.parents):
            r = Rotation.from_quat(np.roll(m.rotations[f, j], -1)).as_matrix()
            if p is None:
                mats.append((r, m.roots[f]))
            else:
                pr, pt = mats[p]
                mats.append((pr @ r, pt + pr @ sk.offsets[j]))
            out.append(mats[-1][1])
        return out

    rest = [np.zeros(3)]
    for j, p in enumerate(sk.parents[1:], 1):
        rest.append(rest[p] + sk.offsets[j])
    rest = np.array(rest)
    height = max(rest.max(axis=0) - rest.min(axis=0)) or 1.0  # a single-point rest pose is not rescaled
    total, count = 0.0, 0
    for f in range(len(gt)):
        for a, b in zip(positions(pred, f), positions(gt, f)):
            total += sum(((a[k] - b[k]) / height) ** 2 for k in range(3))
            count += 1
    return total / count


def brute_spectrum(x):
    """Squared-magnitude DFT by the defining sum."""
    n = len(x)
    return np.array([abs(sum(x[t] * np.exp(-2j * np.pi * k * t / n) for t in range(n))) ** 2 for k in range(n)])


def brute_npss(pred_series, gt_series):
    """Per channel: EMD between normalized power spectra, weighted by gt power."""
    num, den = 0.0, 0.0
    bins = np.arange(pred_series.shape[0])
    for c in range(gt_series.shape[1]):
        pg = brute_spectrum(gt_series[:, c])
        pp = brute_spectrum(pred_series[:, c])
        if pg.sum() == 0:
            continue
        if pp.sum() == 0:
            emd = np.abs(np.cumsum(pg / pg.sum())).sum()
        else:
            # for distributions on unit-spaced bins this is the EMD
            emd = wasserstein_distance(bins, bins, pp / pp.sum(), pg / pg.sum())
        num += emd * pg.sum()
        den += pg.sum()
    return num / den if den else 0.0


# -- l2q / hl2q ------------------------------------------------------------------

def test_l2q_identity_and_double_cover():
    rng = np.random.default_rng(0)
    m = random_motion(rng, random_skeleton(rng, 4), 6)
    assert l2q(m, m) == 0.0
    flipped = MotionSequence(m.skeleton, m.fps, m.roots, -m.rotations)
    assert l2q(flipped, m) == 0.0


def test_l2q_quarter_turn_hand_value():
    sk = chain(1)
    a = MotionSequence(sk, 30, np.zeros((1, 3)), np.array([[[1.0, 0, 0, 0]]]))
    b = with_rotations(a, quat_from_axis_angle([0, 0, 1], math.pi / 2)[None, None])
    # |(1,0,0,0) - (cos45,0,0,sin45)|^2 = (1 - cos45)^2 + sin45^2 = 2 - sqrt(2)
    assert l2q(a, b) == pytest.approx(2 - math.sqrt(2), abs=1e-12)
    assert l2q(a, b) == pytest.approx(0.58579, abs=1e-5)


def test_hierarchy_filter_floor_rule():
    assert HierarchyFilter(0.5).joint_mask([0, 1, 2, 3, 4]).tolist() == [True, True, True, False, False]
    assert HierarchyFilter(1.0).joint_mask([0, 1, 2, 3, 4]).all()
    assert HierarchyFilter(0.5).joint_mask([0, 1, 2, 3]).tolist() == [True, True, False, False]
    with pytest.raises(ContractError):
        HierarchyFilter(0.0)


def test_hl2q_ignores_leaf_error():
    rng = np.random.default_rng(1)
    m = MotionSequence(chain(5), 30, np.zeros((3, 3)), random_quats(rng, (3, 5)))
    rots = m.rotations.copy()
    rots[:, 4] = random_quats(rng, (3,))
    p = with_rotations(m, rots)
    assert hl2q(p, m) == 0.0
    assert l2q(p, m) > 0.0


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_hl2q_full_threshold_equals_l2q_bitwise(seed):
    rng = np.random.default_rng(seed)
    sk = random_skeleton(rng, int(rng.integers(1, 9)))
    a = random_motion(rng, sk, int(rng.integers(1, 6)))
    b = random_motion(rng, sk, len(a))
    assert hl2q(a, b, HierarchyFilter(1.0)) == l2q(a, b)


def test_mismatched_inputs_rejected():
    rng = np.random.default_rng(2)
    a = random_motion(rng, chain(3), 4)
    with pytest.raises(ContractError):
        l2q(a, random_motion(rng, chain(4), 4))
    with pytest.raises(ContractError):
        l2p(a, random_motion(rng, chain(3), 5))


# -- l2p -----------------------------------------------------------------------------

def test_l2p_uniform_root_offset():
    rng = np.random.default_rng(3)
    m = MotionSequence(chain(4), 30, rng.normal(size=(5, 3)), random_quats(rng, (5, 4)))
    d = 0.7
    moved = m.replace(roots=m.roots + [d, 0, 0])
    assert l2p(moved, m) == pytest.approx((d / 3.0) ** 2, rel=1e-12)


def test_l2p_single_joint_is_unnormalized():
    sk = chain(1)
    a = MotionSequence(sk, 30, np.zeros((2, 3)), np.tile([1.0, 0, 0, 0], (2, 1, 1)))
    assert l2p(a.replace(roots=a.roots + [0.3, 0.4, 0]), a) == pytest.approx(0.25)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_l2p_matches_brute_force_oracle(seed):
    rng = np.random.default_rng(seed)
    sk = random_skeleton(rng, 3)
    a = random_motion(rng, sk, 4)
    b = random_motion(rng, sk, 4)
    assert l2p(a, b) == pytest.approx(brute_l2p(a, b), abs=1e-9)
    assert l2p(a, b) == pytest.approx(l2p(b, a), abs=1e-15)


# -- npss ----------------------------------------------------------------------------------

def test_npss_identity_and_constants():
    rng = np.random.default_rng(4)
    m = random_motion(rng, chain(3), 8)
    assert npss(m, m) == 0.0
    const = MotionSequence(chain(3), 30, np.zeros((8, 3)), np.tile([1.0, 0, 0, 0], (8, 3, 1)))
    assert npss(const, const) == 0.0
    assert power_spectrum_emd(np.zeros((8, 2)), np.zeros((8, 2))) == 0.0


def test_npss_two_sines_matches_reference():
    t = np.arange(32)
    a = np.sin(2 * np.pi * t / 8)[:, None]
    b = np.sin(2 * np.pi * t / 4)[:, None]
    got = power_spectrum_emd(a, b)
    assert got > 0
    assert got == pytest.approx(brute_npss(a, b), abs=1e-9)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_npss_matches_dft_emd_oracle(seed):
    rng = np.random.default_rng(seed)
    sk = random_skeleton(rng, 2)
    a = random_motion(rng, sk, int(rng.integers(2, 12)))
    b = random_motion(rng, sk, len(a))
    series = [np.where(m.rotations[..., :1] < 0, -m.rotations, m.rotations).reshape(len(a), -1) for m in (a, b)]
    got = npss(a, b)
    assert got >= 0
    assert got == pytest.approx(brute_npss(*series), abs=1e-9)


def test_npss_needs_two_frames():
    rng = np.random.default_rng(5)
    m = random_motion(rng, chain(2), 1)
    with pytest.raises(ContractError):
        npss(m, m)


# -- ssim --------------------------------------------------------------------------------

def test_ssim_identity_and_constant():
    rng = np.random.default_rng(6)
    img = rng.random((32, 32))
    assert ssim(img, img) == pytest.approx(1.0)
    c = np.full((20, 20), 0.3)
    assert ssim(c, c) == pytest.approx(1.0)


def test_ssim_inverted_checkerboard_is_negative():
    board = (np.indices((32, 32)).sum(axis=0) // 4 % 2).astype(float)
    assert ssim(board, 1 - board) < 0


@pytest.mark.parametrize("seed", range(4))
def test_ssim_matches_skimage(seed):
    rng = np.random.default_rng(seed)
    a = rng.random((40, 36))
    b = np.clip(a + rng.normal(scale=0.2, size=a.shape), 0, 1)
    ref = structural_similarity(a, b, data_range=1.0, gaussian_weights=True, sigma=1.5,
                                use_sample_covariance=False)
    assert ssim(a, b) == pytest.approx(ref, abs=1e-9)


def test_ssim_color_and_shape_checks():
    rng = np.random.default_rng(7)
    rgb = rng.random((16, 16, 3))
    assert ssim(rgb, rgb) == pytest.approx(1.0)
    with pytest.raises(ContractError):
        ssim(np.zeros((16, 16)), np.zeros((16, 17)))


# -- report and plug-ins -------------------------------------------------------------------

def small_pair(seed=8):
    rng = np.random.default_rng(seed)
    sk = chain(3)
    a = MotionSequence(sk, 15, rng.normal(size=(4, 3)) * 0.1, random_quats(rng, (4, 3)))
    b = a.replace(roots=a.roots + 0.05)
    return a, b


def test_default_report_has_builtins_only():
    a, b = small_pair()
    rep = evaluate_all(a, b, registry=MetricRegistry())
    assert set(rep.values) == set(BUILTIN_METRICS)
    assert all(math.isfinite(v) for v in rep.values.values())
    assert json.loads(rep.to_json())["joints"] == [0, 1]


def test_identical_inputs_give_zero_and_unit_ssim():
    a, _ = small_pair()
    rep = evaluate_all(a, a, registry=MetricRegistry())
    assert rep.values == {"l2q": 0.0, "hl2q": 0.0, "l2p": 0.0, "npss": 0.0, "ssim": pytest.approx(1.0)}


def test_plugins_failures_and_invalid_values():
    a, b = small_pair()
    reg = MetricRegistry()
    reg.register("mae", lambda p, g: float(np.abs(p - g).mean()))
    reg.register("broken", lambda p, g: 1 / 0)
    reg.register("nan", lambda p, g: float("nan"))
    rep = evaluate_all(a, b, registry=reg)
    assert "mae" in rep.values and rep.values["mae"] > 0
    assert "broken" not in rep.values and "ZeroDivisionError" in rep.failures["broken"]
    assert rep.invalid == ["nan"] and "nan" not in rep.values
    assert set(BUILTIN_METRICS) <= set(rep.values)


def test_duplicate_registration_rejected():
    reg = MetricRegistry()
    reg.register("x", lambda p, g: 0.0)
    with pytest.raises(ConfigError):
        reg.register("x", lambda p, g: 0.0)
    with pytest.raises(ConfigError):
        reg.register("ssim", lambda p, g: 0.0)


def test_report_csv(tmp_path):
    a, b = small_pair()
    rep = evaluate_all(a, b, registry=MetricRegistry(), frames=[1, 2])
    rep.write_csv(tmp_path / "r.csv", "walk")
    rows = (tmp_path / "r.csv").read_text().splitlines()
    assert rows[0] == "motion,metric,value"
    assert len(rows) == 6 and all(r.startswith("walk,") for r in rows[1:])
    assert rep.frame_range == (1, 2)
