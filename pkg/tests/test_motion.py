import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from motionpet import motion
from motionpet.errors import InvalidArgumentError
from motionpet.motion import (IDENTITY, MotionTrace, RigidPose, calibrate_amplitude_scale, gen_trace,
                              identity_trace, motion_magnitude, pose_apply, pose_at, pose_compose,
                              pose_inverse, read_trace, rotation_matrix, write_trace)


def random_pose(rng, t_scale=20.0, r_scale=0.3):
    return RigidPose(tuple(rng.normal(0, t_scale, 3)), tuple(rng.normal(0, r_scale, 3)))


def brute_magnitude(trace, pts):
    # independent: explicit loops, explicit matrix products, reference = first pose
    R0 = rotation_matrix(trace.poses[0].r_rad)
    t0 = np.array(trace.poses[0].t_mm)
    bounds = list(trace.breakpoints) + [trace.duration_s]
    total = 0.0
    for k, pose in enumerate(trace.poses):
        w = (bounds[k + 1] - bounds[k]) / trace.duration_s
        R = rotation_matrix(pose.r_rad)
        t = np.array(pose.t_mm)
        d = 0.0
        for p in pts:
            a = R0.dot(p) + t0
            b = R.dot(p) + t
            d += math.sqrt(sum((a[i] - b[i]) ** 2 for i in range(3)))
        total += w * d / len(pts)
    return total


def test_identity_pose_exact(rng):
    x = rng.normal(0, 50, (100, 3))
    assert np.array_equal(pose_apply(IDENTITY, x), x)


def test_pure_translation_displaces_exactly():
    x = np.random.default_rng(1).normal(0, 50, (200, 3))
    y = pose_apply(RigidPose((5.0, 0.0, 0.0)), x)
    assert np.allclose(np.linalg.norm(y - x, axis=1), 5.0, atol=1e-12)


def test_round_trip_and_composition(rng):
    worst_rt = worst_id = 0.0
    for _ in range(1000):
        p = random_pose(rng)
        x = rng.normal(0, 100, 3)
        back = pose_inverse(p).apply(pose_apply(p, x))
        worst_rt = max(worst_rt, np.linalg.norm(back - x))
        ident = pose_compose(pose_inverse(p), p)
        worst_id = max(worst_id, np.linalg.norm(ident.apply(x) - x))
    assert worst_rt < 1e-9
    assert worst_id < 1e-9


def test_compose_order(rng):
    p1, p2 = random_pose(rng), random_pose(rng)
    x = rng.normal(0, 30, (10, 3))
    assert np.allclose(pose_compose(p2, p1).apply(x), pose_apply(p2, pose_apply(p1, x)), atol=1e-10)


@settings(max_examples=200, deadline=None)
@given(st.tuples(*[st.floats(-math.pi, math.pi)] * 3))
def test_rotation_orthonormal(r):
    R = rotation_matrix(r)
    assert np.max(np.abs(R.T @ R - np.eye(3))) < 1e-12
    assert np.linalg.det(R) == pytest.approx(1.0, abs=1e-12)


def test_rotation_order_is_zyx():
    r = (0.1, 0.2, 0.3)
    Rx = rotation_matrix((0.1, 0, 0))
    Ry = rotation_matrix((0, 0.2, 0))
    Rz = rotation_matrix((0, 0, 0.3))
    assert np.allclose(rotation_matrix(r), Rz @ Ry @ Rx)


def test_pose_rejects_non_finite():
    with pytest.raises(InvalidArgumentError):
        RigidPose((math.nan, 0, 0))


def test_pose_at_single_interval():
    p = RigidPose((1.0, 2.0, 3.0))
    tr = MotionTrace([0.0], [p], 100.0)
    for t in (0.0, 13.2, 99.999):
        assert pose_at(tr, t) == p


def test_pose_at_left_closed():
    poses = [IDENTITY, RigidPose((1, 0, 0)), RigidPose((2, 0, 0))]
    tr = MotionTrace([0.0, 10.0, 20.0], poses, 30.0)
    assert pose_at(tr, 10.0) == poses[1]
    assert pose_at(tr, 9.999999) == poses[0]
    assert pose_at(tr, 20.0) == poses[2]
    with pytest.raises(InvalidArgumentError):
        pose_at(tr, 30.0)
    with pytest.raises(InvalidArgumentError):
        pose_at(tr, -1e-9)


def test_pose_at_matches_linear_scan(rng):
    tr = gen_trace("step", 5.0, 15, 600.0, 3)
    ts = rng.uniform(0, 600.0, 10_000)
    idx = tr.interval_index(ts)
    for t, k in zip(ts, idx):
        scan = 0
        for j, b in enumerate(tr.breakpoints):
            if b <= t:
                scan = j
        assert pose_at(tr, t) is tr.poses[scan]
        assert k == scan


def test_trace_validation():
    with pytest.raises(InvalidArgumentError):
        MotionTrace([1.0], [IDENTITY], 10.0)
    with pytest.raises(InvalidArgumentError):
        MotionTrace([0.0, 5.0, 5.0], [IDENTITY] * 3, 10.0)
    with pytest.raises(InvalidArgumentError):
        MotionTrace([0.0, 10.0], [IDENTITY] * 2, 10.0)
    with pytest.raises(InvalidArgumentError):
        MotionTrace([0.0], [IDENTITY, IDENTITY], 10.0)


def test_magnitude_constant_trace_is_zero():
    p = RigidPose((3.0, -1.0, 2.0), (0.1, 0.0, 0.2))
    assert motion_magnitude(MotionTrace([0.0, 50.0], [p, p], 100.0)) == 0.0
    assert motion_magnitude(gen_trace("none", 10.0, 12, 1200.0, 0)) == 0.0


def test_magnitude_two_interval_analytic():
    tr = MotionTrace([0.0, 50.0], [IDENTITY, RigidPose((6.0, 0.0, 0.0))], 100.0)
    assert motion_magnitude(tr) == 3.0


def test_step_translation_only_gives_amplitude():
    for seed in range(5):
        tr = gen_trace("step", 4.0, 8, 1000.0, seed, translation_only=True)
        w0 = tr.weights[0]
        # first interval is the identity reference (distance 0), the rest move exactly 4 mm
        assert motion_magnitude(tr) == pytest.approx(4.0 * (1 - w0), abs=1e-12)
        # dropping the identity interval: the reference then carries zero weight
        t1 = tr.breakpoints[1]
        moved = MotionTrace([b - t1 for b in tr.breakpoints[1:]], tr.poses[1:], tr.duration_s - t1)
        assert motion_magnitude(moved, reference=IDENTITY) == pytest.approx(4.0, abs=1e-12)


def test_magnitude_matches_brute_force(rng):
    pts = motion.default_head_points()
    for seed in range(20):
        tr = gen_trace(("step", "drift", "mixed")[seed % 3], rng.uniform(1, 15), 10, 1200.0, seed)
        assert motion_magnitude(tr) == pytest.approx(brute_magnitude(tr, pts), abs=1e-12)


def test_magnitude_invariances(rng):
    tr = gen_trace("mixed", 8.0, 6, 600.0, 11)
    m = motion_magnitude(tr)
    # split every interval into two equal halves
    bps, poses = [], []
    for b, e, p in zip(tr.breakpoints, tr.ends, tr.poses):
        bps += [b, 0.5 * (b + e)]
        poses += [p, p]
    assert motion_magnitude(MotionTrace(bps, poses, tr.duration_s)) == pytest.approx(m, abs=1e-12)
    assert m > 0
    # uniform time scaling leaves the time weights unchanged
    scaled = MotionTrace([2 * b for b in tr.breakpoints], tr.poses, 2 * tr.duration_s)
    assert motion_magnitude(scaled) == pytest.approx(m, abs=1e-12)


def test_default_head_points():
    pts = motion.default_head_points()
    assert pts.shape == (9, 3)
    assert np.allclose(np.linalg.norm(pts[:8], axis=1), 70.0)
    assert np.array_equal(pts[8], np.zeros(3))


@pytest.mark.parametrize("kind", ["step", "drift", "mixed"])
def test_gen_trace_first_pose_identity_and_deterministic(kind):
    a = gen_trace(kind, 6.0, 12, 1200.0, 42)
    b = gen_trace(kind, 6.0, 12, 1200.0, 42)
    assert a.poses[0].is_identity
    assert a.breakpoints == b.breakpoints and a.poses == b.poses
    assert a.n_intervals == 12
    assert motion_magnitude(a) > 0


def test_gen_trace_errors():
    with pytest.raises(InvalidArgumentError):
        gen_trace("wobble", 1.0, 3, 10.0, 0)
    with pytest.raises(InvalidArgumentError):
        gen_trace("step", -1.0, 3, 10.0, 0)


def test_calibration_hits_target():
    rng = np.random.default_rng(5)
    rel = rng.gamma(2.0, 0.5, 20)
    seeds = list(range(20))
    scale = calibrate_amplitude_scale("mixed", rel, seeds, 12, 1200.0, 7.0)
    mean = np.mean([motion_magnitude(gen_trace("mixed", a * scale, 12, 1200.0, s)) for a, s in zip(rel, seeds)])
    assert abs(mean - 7.0) <= 0.5
    assert abs(mean - 7.0) <= 1e-3


def test_trace_csv_round_trip(tmp_path):
    tr = gen_trace("mixed", 5.0, 7, 900.0, 8)
    write_trace(tr, tmp_path / "t.csv")
    back = read_trace(tmp_path / "t.csv")
    assert back.breakpoints == tr.breakpoints
    assert back.duration_s == tr.duration_s
    for p, q in zip(back.poses, tr.poses):
        assert p.t_mm == q.t_mm
        assert np.allclose(p.r_rad, q.r_rad, atol=1e-15)
    assert (tmp_path / "t.csv").read_text().splitlines()[0] == "t_s,tx_mm,ty_mm,tz_mm,rx_deg,ry_deg,rz_deg"


def test_identity_trace_static():
    assert identity_trace(10.0).is_static_identity
