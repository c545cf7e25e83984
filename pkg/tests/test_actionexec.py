import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from numpy.testing import assert_allclose, assert_array_equal
from scipy.spatial.transform import Rotation

from exoforge.actionexec import (ABSOLUTE, HAND_PROFILES, HARDWARE, RELATIVE, VIRTUAL, ActionFrame,
                                 HorizonPolicy, VirtualMotorState, WristPose, interpolate_commands, replay,
                                 resolve_hand, resolve_wrist, window_actions)
from exoforge.errors import LengthMismatch, UninitializedVirtualState, ValidationError


def frame(hand, mode=RELATIVE):
    return ActionFrame(np.zeros(6), np.atleast_1d(np.asarray(hand, dtype=float)), mode)


def test_wrist_identity_and_translation():
    p = WristPose([1, 2, 3], [0.1, 0.2, 0.3])
    same = resolve_wrist(p, np.zeros(6))
    assert_array_equal(same.position, p.position)
    assert_array_equal(same.rotvec, p.rotvec)
    moved = resolve_wrist(p, [1, 2, 3, 0, 0, 0])
    assert_array_equal(moved.position, [2, 4, 6])
    assert_array_equal(moved.rotvec, p.rotvec)


def test_wrist_sequence_matches_composed(rng):
    pose = WristPose(rng.normal(size=3), rng.normal(size=3) * 0.5)
    deltas = np.hstack([rng.normal(0, 5, (30, 3)), rng.normal(0, 0.2, (30, 3))])
    p = pose
    for d in deltas:
        p = resolve_wrist(p, d)
    rot = Rotation.from_rotvec(pose.rotvec)
    for d in deltas:
        rot = Rotation.from_rotvec(d[3:]) * rot
    assert_allclose(p.position, pose.position + deltas[:, :3].sum(axis=0), atol=1e-9)
    assert_allclose(Rotation.from_rotvec(p.rotvec).as_matrix(), rot.as_matrix(), atol=1e-9)


def test_virtual_state_ignores_drifting_reads():
    state = VirtualMotorState(np.array([500.0]))
    c1, state = resolve_hand(frame(10), state, hardware_read=[495.0])
    c2, state = resolve_hand(frame(10), state, hardware_read=[490.0])
    assert (c1[0], c2[0]) == (510.0, 520.0)


def test_virtual_init_from_first_read():
    with pytest.raises(UninitializedVirtualState):
        resolve_hand(frame(10), VirtualMotorState())
    c, state = resolve_hand(frame(10), VirtualMotorState(), hardware_read=[500.0])
    assert c[0] == 510.0
    c, state = resolve_hand(frame(10), state, hardware_read=[0.0])
    assert c[0] == 520.0


def test_absolute_and_clamp():
    c, state = resolve_hand(frame(700, ABSOLUTE), VirtualMotorState(np.array([5.0])))
    assert c[0] == 700.0 and state.values[0] == 700.0
    c, _ = resolve_hand(frame(400), state)
    assert c[0] == 1000.0
    c, _ = resolve_hand(frame(-2000, ABSOLUTE), state)
    assert c[0] == 0.0


def test_hardware_mode_uses_reads():
    c, _ = resolve_hand(frame(10), VirtualMotorState(np.array([500.0])), [490.0], HARDWARE)
    assert c[0] == 500.0
    with pytest.raises(ValidationError):
        resolve_hand(frame(10), VirtualMotorState(np.array([500.0])), None, HARDWARE)
    with pytest.raises(LengthMismatch):
        resolve_hand(frame([1, 2]), VirtualMotorState(np.array([500.0])))


def _steps(rng, n, dofs, drift):
    out = []
    level = np.full(dofs, 400.0)
    for k in range(n):
        acts = np.hstack([rng.normal(0, 1, (16, 6)), rng.normal(0, 5, (16, dofs))])
        reads = []
        for i in range(8):
            reads.append((level - drift * rng.uniform(0, 10, dofs)).tolist())
            level = level + acts[i, 6:]
        out.append({"actions": acts.tolist(), "hardware_reads": reads})
    return out


def test_replay_virtual_independent_of_reads():
    rng = np.random.default_rng(3)
    prof = HAND_PROFILES["xhand_like"]
    steps = _steps(rng, 5, prof.dofs, drift=1.0)
    other = [dict(s, hardware_reads=(np.asarray(s["hardware_reads"]) - 37.0).tolist()) for s in steps]
    other[0]["hardware_reads"] = steps[0]["hardware_reads"]  # same initialization read
    a = replay(steps, prof, VIRTUAL)
    b = replay(other, prof, VIRTUAL)
    assert_array_equal(np.array(a.hand), np.array(b.hand))
    # with drift, hardware mode lags behind the virtual commands
    hw = replay(steps, prof, HARDWARE)
    assert not np.array_equal(np.array(hw.hand), np.array(a.hand))


def test_mode_equivalence_without_drift():
    rng = np.random.default_rng(4)
    prof = HAND_PROFILES["inspire_like"]
    steps = _steps(rng, 4, prof.dofs, drift=0.0)
    v = np.array(replay(steps, prof, VIRTUAL).hand)
    h = np.array(replay(steps, prof, HARDWARE).hand)
    assert_array_equal(v, h)
    # and relative accumulation equals the absolute trajectory
    start = np.array(steps[0]["hardware_reads"][0])
    deltas = np.vstack([np.asarray(s["actions"])[:8, 6:] for s in steps])
    assert_allclose(v, np.clip(start + np.cumsum(deltas, axis=0), 0, 1000), atol=1e-9)


def test_window():
    pred = list(range(16))
    assert window_actions(pred) == list(range(8))
    assert window_actions(pred, HorizonPolicy(16, 16)) == pred
    with pytest.raises(LengthMismatch):
        window_actions(pred[:15])
    for n in range(1, 9):
        for e in range(1, n + 1):
            p = list(range(n))
            assert window_actions(p, HorizonPolicy(n, e)) == p[:e]
    with pytest.raises(ValidationError):
        HorizonPolicy(8, 9)


def test_interpolate_identity_and_sixty():
    c = np.array([[0.0], [100.0], [50.0]])
    v, t = interpolate_commands(c, 10, 10)
    assert_array_equal(v, c)
    assert_allclose(t, [0, 0.1, 0.2])
    v, t = interpolate_commands([[0.0], [100.0]], 10, 60)
    assert_allclose(v[:, 0], [0, 16.67, 33.33, 50, 66.67, 83.33, 100], atol=0.01)
    assert v[0, 0] == 0.0 and v[-1, 0] == 100.0
    with pytest.raises(ValidationError):
        interpolate_commands(c, 10, 5)


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**32 - 1), st.sampled_from([60.0, 125.0, 37.0]))
def test_interpolate_hull_knots_continuity(seed, rate):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(2, 12))
    c = rng.normal(0, 300, (n, 3))
    v, t = interpolate_commands(c, 10.0, rate)
    assert_array_equal(v[0], c[0])
    assert_array_equal(v[-1], c[-1])
    # knots exact wherever a tick lands on a command time
    for i in range(n):
        hit = np.flatnonzero(np.isclose(t, i / 10.0, rtol=0, atol=1e-12))
        for k in hit:
            assert_array_equal(v[k], c[i])
    # hull of bracketing commands
    j = np.minimum(np.floor(t * 10 + 1e-9).astype(int), n - 2)
    lo = np.minimum(c[j], c[j + 1])
    hi = np.maximum(c[j], c[j + 1])
    assert np.all((v >= lo) & (v <= hi))
    # continuity: per-tick change bounded by the bracket's slope over one tick
    step = np.abs(np.diff(v, axis=0))
    bound = np.abs(np.diff(c, axis=0)).max(axis=0) * (10.0 / rate) + 1e-9
    assert np.all(step <= bound)
