import json
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from numpy.testing import assert_allclose, assert_array_equal

from exoforge.errors import (BranchDiscontinuity, JointLimitViolation, LoopClosureFailure, ParseError,
                             ValidationError)
from exoforge.kinemodel import (FOURBAR, SERIAL, SERIAL_WITH_FOURBAR, FingerMechanism, FourBarLinkage, HandModel,
                                Pose, RevoluteJoint, SerialChain, Transform, bundled_hand_path, fk_batch,
                                fk_finger, fk_fourbar, fk_serial, fourbar_joints, hand_model_to_dict,
                                load_hand_model, read_hand_json, save_hand_model)

from conftest import random_linkage, random_transform


def one_link_chain():
    j = RevoluteJoint(axis=(0, 0, 1), limits=(-math.pi, math.pi))
    return SerialChain((j,), Transform((100.0, 0, 0)))


def test_one_link_identity():
    pose = fk_serial(one_link_chain(), [0.0])
    assert_allclose(pose.position, [100, 0, 0], atol=1e-12)
    assert_allclose(pose.direction, [1, 0, 0], atol=1e-12)


def test_one_link_quarter_turn():
    pose = fk_serial(one_link_chain(), [math.pi / 2])
    assert_allclose(pose.position, [0, 100, 0], atol=1e-12)
    assert_allclose(pose.direction, [0, 1, 0], atol=1e-12)


def _homogeneous(t: Transform):
    cr, cp, cy = (math.cos(a) for a in t.rpy)
    sr, sp, sy = (math.sin(a) for a in t.rpy)
    rx = np.array([[1, 0, 0], [0, cr, -sr], [0, sr, cr]])
    ry = np.array([[cp, 0, sp], [0, 1, 0], [-sp, 0, cp]])
    rz = np.array([[cy, -sy, 0], [sy, cy, 0], [0, 0, 1]])
    m = np.eye(4)
    m[:3, :3] = rz @ ry @ rx
    m[:3, 3] = t.translation
    return m


def _axis_angle(axis, theta):
    # written out element by element, independent of the library's Rodrigues form
    x, y, z = axis
    c, s, C = math.cos(theta), math.sin(theta), 1 - math.cos(theta)
    m = np.eye(4)
    m[:3, :3] = [[c + x * x * C, x * y * C - z * s, x * z * C + y * s],
                 [y * x * C + z * s, c + y * y * C, y * z * C - x * s],
                 [z * x * C - y * s, z * y * C + x * s, c + z * z * C]]
    return m


def test_serial_matches_matrix_product(rng):
    for _ in range(50):
        joints = []
        for _ in range(3):
            axis = rng.normal(size=3)
            axis /= np.linalg.norm(axis)
            joints.append(RevoluteJoint(random_transform(rng), tuple(axis), (-math.pi, math.pi)))
        chain = SerialChain(tuple(joints), random_transform(rng))
        theta = rng.uniform(-math.pi, math.pi, 3)
        m = np.eye(4)
        for j, t in zip(joints, theta):
            m = m @ _homogeneous(j.origin) @ _axis_angle(j.axis, t)
        m = m @ _homogeneous(chain.tip_offset)
        pose = fk_serial(chain, theta)
        assert_allclose(pose.position, m[:3, 3], atol=1e-9)
        assert_allclose(pose.direction, m[:3, 0], atol=1e-12)


def test_serial_zero_config_is_origin_composition(rng):
    joints = tuple(RevoluteJoint(random_transform(rng), (0, 1, 0), (-1, 1)) for _ in range(4))
    chain = SerialChain(joints, random_transform(rng))
    m = np.eye(4)
    for j in joints:
        m = m @ j.origin.matrix
    m = m @ chain.tip_offset.matrix
    pose = fk_serial(chain, np.zeros(4))
    assert_allclose(pose.position, m[:3, 3], atol=1e-9)
    assert_allclose(pose.direction, m[:3, 0], atol=1e-12)


def test_joint_limit_violation():
    chain = SerialChain((RevoluteJoint(limits=(0, 1)), RevoluteJoint(limits=(0, 1))))
    with pytest.raises(JointLimitViolation) as exc:
        fk_serial(chain, [0.5, 1.5])
    assert exc.value.index == 1


def test_invalid_types():
    with pytest.raises(ValidationError):
        RevoluteJoint(limits=(1.0, 0.0))
    with pytest.raises(ValidationError):
        RevoluteJoint(axis=(1, 1, 0))
    with pytest.raises(ValidationError):
        Pose([0, 0, 0], [1, 1e-6, 0.1])
    with pytest.raises(ValidationError):
        FourBarLinkage(10, 0, 5, 5)
    with pytest.raises(ValidationError):
        HandModel("h", (FingerMechanism("a", SERIAL, chain=one_link_chain()),) * 2)


# --- four-bar ----------------------------------------------------------------

def test_fourbar_loop_closure_residual(rng):
    for _ in range(200):
        fb = random_linkage(rng)
        theta = np.linspace(*fb.input_limits, 64)
        pa, o2, pb, ok = fourbar_joints(fb, theta)
        assert ok.all()
        assert np.abs(np.hypot(*(pb - pa).T) - fb.coupler).max() <= 1e-9
        assert np.abs(np.hypot(*(pb - o2).T) - fb.rocker).max() <= 1e-9
        assert_allclose(np.hypot(*pa.T), fb.crank, atol=1e-9)


def test_parallelogram():
    fb = FourBarLinkage(50, 30, 50, 30, input_limits=(0.1, math.pi - 0.1), branch=1)
    theta = np.linspace(0.1, math.pi - 0.1, 64)
    pa, o2, pb, ok = fourbar_joints(fb, theta)
    assert ok.all()
    # coupler stays parallel to the ground line
    coupler_angle = np.arctan2(pb[:, 1] - pa[:, 1], pb[:, 0] - pa[:, 0])
    assert np.abs(coupler_angle).max() <= 1e-9
    # rocker stays parallel to the crank
    rocker_angle = np.arctan2(pb[:, 1] - o2[:, 1], pb[:, 0] - o2[:, 0])
    assert np.abs(rocker_angle - theta).max() <= 1e-9
    for t in theta[::8]:
        assert_allclose(fk_fourbar(fb, t).direction, [1, 0, 0], atol=1e-12)


def test_branches_mirror_across_crank_tip_to_pivot_line():
    kw = dict(ground=40, crank=20, coupler=50, rocker=45, input_limits=(0, math.pi))
    pa, o2, b1, _ = fourbar_joints(FourBarLinkage(branch=1, **kw), [math.pi / 2])
    _, _, b2, _ = fourbar_joints(FourBarLinkage(branch=-1, **kw), [math.pi / 2])
    a, o, p, q = pa[0], o2[0], b1[0], b2[0]
    u = (o - a) / np.linalg.norm(o - a)
    # reflect p across the line through a along u
    r = p - a
    mirrored = a + 2 * (r @ u) * u - r
    assert_allclose(mirrored, q, atol=1e-12)
    assert not np.allclose(p, q)


def test_fourbar_closure_failure_and_discontinuity():
    # crank longer than anything the coupler/rocker can reach at theta = pi
    fb = FourBarLinkage(40, 30, 20, 30, input_limits=(0.0, math.pi))
    assert not fb.is_closable()
    with pytest.raises(LoopClosureFailure):
        fk_fourbar(fb, math.pi)
    with pytest.raises((LoopClosureFailure, BranchDiscontinuity)):
        fb.check_continuity()
    # opens only around theta = 0: closes on both sides inside (-1, 1)
    fb = FourBarLinkage(40, 30, 30, 6.0, input_limits=(-1.0, 1.0))
    with pytest.raises(BranchDiscontinuity):
        fb.check_continuity()


def test_pivot_distance_range_matches_dense_sweep(rng):
    for _ in range(100):
        g, a = rng.uniform(5, 60, 2)
        lo = rng.uniform(-7, 7)
        hi = lo + rng.uniform(0.01, 7)
        fb = FourBarLinkage(g, a, 10, 10, input_limits=(lo, hi))
        t = np.linspace(lo, hi, 20001)
        d = np.sqrt(a * a + g * g - 2 * a * g * np.cos(t))
        dmin, dmax = fb.pivot_distance_range()
        assert dmin <= d.min() + 1e-12 and dmax >= d.max() - 1e-12
        assert d.min() - dmin < 1e-3 and dmax - d.max() < 1e-3


# --- thumb composition ---------------------------------------------------------

def thumb(rng):
    swing = RevoluteJoint(random_transform(rng), (0, 0, 1), (-math.pi, math.pi))
    return FingerMechanism("thumb", SERIAL_WITH_FOURBAR, fourbar=random_linkage(rng), swing=swing)


def test_zero_swing_matches_fourbar_in_swing_frame(rng):
    mech = thumb(rng)
    th = mech.fourbar.input_limits[0]
    flat = fk_fourbar(mech.fourbar, th)
    got = fk_finger(mech, [0.0, th])
    o = mech.swing.origin
    assert_allclose(got.position, o.apply_point(flat.position), atol=1e-9)
    assert_allclose(got.direction, o.apply_vector(flat.direction), atol=1e-12)


def test_swing_half_turn():
    fb = FourBarLinkage(8, 32, 9, 30, coupler_point=(28, 0), input_limits=(0.1, 1.5))
    mech = FingerMechanism("t", SERIAL_WITH_FOURBAR, fourbar=fb, swing=RevoluteJoint(axis=(0, 0, 1)))
    flat = fk_fourbar(fb, 0.7).position
    got = fk_finger(mech, [math.pi, 0.7]).position
    assert_allclose(got, [-flat[0], -flat[1], flat[2]], atol=1e-9)


def test_swing_composition_oracle(rng):
    for _ in range(30):
        mech = thumb(rng)
        s = rng.uniform(-math.pi, math.pi)
        b = rng.uniform(*mech.fourbar.input_limits)
        m = mech.swing.origin.matrix @ _axis_angle(mech.swing.axis, s)
        flat = fk_fourbar(mech.fourbar, b)
        got = fk_finger(mech, [s, b])
        assert_allclose(got.position, m[:3, :3] @ flat.position + m[:3, 3], atol=1e-9)
        assert_allclose(got.direction, m[:3, :3] @ flat.direction, atol=1e-12)


def test_batch_matches_scalar(rng):
    mech = thumb(rng)
    lim = mech.limits
    theta = rng.uniform(lim[:, 0], lim[:, 1], (20, 2))
    pos, direction, ok = fk_batch(mech, theta)
    for i in range(20):
        p = fk_finger(mech, theta[i])
        assert_allclose(p.position, pos[i], rtol=0, atol=1e-12)
        assert_allclose(p.direction, direction[i], rtol=0, atol=1e-15)


@settings(max_examples=60, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), kind=st.sampled_from([SERIAL, FOURBAR, SERIAL_WITH_FOURBAR]))
def test_base_transform_covariance(seed, kind):
    rng = np.random.default_rng(seed)
    if kind == SERIAL:
        joints = tuple(RevoluteJoint(random_transform(rng), (0, 0, 1), (-2, 2)) for _ in range(3))
        mech = FingerMechanism("f", SERIAL, chain=SerialChain(joints, random_transform(rng)))
    elif kind == FOURBAR:
        mech = FingerMechanism("f", FOURBAR, fourbar=random_linkage(rng))
    else:
        mech = thumb(rng)
    t = random_transform(rng)
    lim = mech.limits
    theta = rng.uniform(lim[:, 0], lim[:, 1], (16, lim.shape[0]))
    p0, d0, _ = fk_batch(mech, theta)
    p1, d1, _ = fk_batch(mech.rebased(t), theta)
    assert_allclose(p1, t.apply_point(p0), atol=1e-9)
    assert_allclose(d1, t.apply_vector(d0), atol=1e-12)


def test_fk_deterministic(rng):
    fb = random_linkage(rng)
    mech = FingerMechanism("f", FOURBAR, fourbar=fb)
    theta = np.linspace(*fb.input_limits, 33)[:, None]
    a = fk_batch(mech, theta)
    b = fk_batch(mech, theta.copy())
    for x, y in zip(a, b):
        assert_array_equal(x, y)


# --- hand files ------------------------------------------------------------------

def test_bundled_hands_load():
    toy = load_hand_model(bundled_hand_path("toy2f"))
    assert len(toy.fingers) == 2
    assert all(f.kind == SERIAL for f in toy.fingers)
    inspire = load_hand_model(bundled_hand_path("inspire_like"))
    assert sum(f.actuated_dofs for f in inspire.fingers) == 6
    assert inspire.finger("thumb").kind == SERIAL_WITH_FOURBAR
    xhand = load_hand_model(bundled_hand_path("xhand_like"))
    assert sum(f.actuated_dofs for f in xhand.fingers) == 12


def test_inverted_limits_rejected(tmp_path):
    d = read_hand_json(bundled_hand_path("toy2f"))
    d["fingers"][0]["joints"][1]["limits_deg"] = [100.0, 0.0]
    p = tmp_path / "bad.hand"
    p.write_text(json.dumps(d))
    with pytest.raises(ValidationError) as exc:
        load_hand_model(p)
    assert "joints[1].limits_deg" in exc.value.field


def test_parse_error_line(tmp_path):
    p = tmp_path / "broken.hand"
    p.write_text('{\n  "name": "x",\n  "fingers": [,]\n}\n')
    with pytest.raises(ParseError) as exc:
        load_hand_model(p)
    assert exc.value.line == 3


def test_unclosable_fourbar_rejected_at_load(tmp_path):
    d = read_hand_json(bundled_hand_path("inspire_like"))
    d["fingers"][0]["fourbar"]["coupler_mm"] = 1.0
    p = tmp_path / "bad.hand"
    p.write_text(json.dumps(d))
    with pytest.raises(ValidationError):
        load_hand_model(p)


def _random_model(rng):
    fingers = []
    for i in range(int(rng.integers(1, 5))):
        kind = rng.choice([SERIAL, FOURBAR, SERIAL_WITH_FOURBAR])
        if kind == SERIAL:
            joints = []
            for _ in range(int(rng.integers(1, 4))):
                axis = rng.normal(size=3)
                lo = rng.uniform(-90, 0)
                joints.append(RevoluteJoint(random_transform(rng), tuple(axis / np.linalg.norm(axis)),
                                            (math.radians(lo), math.radians(lo + rng.uniform(1, 90)))))
            fingers.append(FingerMechanism(f"f{i}", SERIAL, chain=SerialChain(tuple(joints), random_transform(rng))))
        elif kind == FOURBAR:
            fingers.append(FingerMechanism(f"f{i}", FOURBAR, fourbar=random_linkage(rng)))
        else:
            fingers.append(FingerMechanism(f"f{i}", SERIAL_WITH_FOURBAR, fourbar=random_linkage(rng),
                                           swing=RevoluteJoint(random_transform(rng), (0, 0, 1), (0, 1))))
    return HandModel("rand", tuple(fingers))


def test_save_load_round_trip(tmp_path, rng):
    for k in range(20):
        model = _random_model(rng)
        p = tmp_path / f"m{k}.hand"
        save_hand_model(model, p)
        back = load_hand_model(p)
        assert hand_model_to_dict(back) == hand_model_to_dict(model)
        for f, g in zip(model.fingers, back.fingers):
            lim = f.limits
            theta = rng.uniform(lim[:, 0], lim[:, 1], (8, lim.shape[0]))
            theta = np.clip(theta, np.maximum(lim[:, 0], g.limits[:, 0]), np.minimum(lim[:, 1], g.limits[:, 1]))
            assert_allclose(fk_batch(g, theta)[0], fk_batch(f, theta)[0], atol=1e-9)
