"""Policy action execution semantics.

Wrist actions are always relative and chain against the commanded pose.
Hand actions are absolute motor targets or relative deltas. Relative
deltas are added either to a fresh hardware read or to a virtual motor
state that is initialized from hardware once and afterwards only
advanced by executed actions.
"""
from __future__ import annotations

from dataclasses import dataclass, replace
from fractions import Fraction

import numpy as np
from scipy.spatial.transform import Rotation

from .errors import LengthMismatch, UninitializedVirtualState, ValidationError

ABSOLUTE = "absolute"
RELATIVE = "relative"
VIRTUAL = "virtual"
HARDWARE = "hardware"


@dataclass(frozen=True)
class HandProfile:
    name: str
    dofs: int
    motor_range: tuple
    command_rate_hz: float


# Motor ranges are placeholders in Inspire-style 0..1000 units for both hands.
HAND_PROFILES = {
    "inspire_like": HandProfile("inspire_like", 6, (0.0, 1000.0), 10.0),
    "xhand_like": HandProfile("xhand_like", 12, (0.0, 1000.0), 60.0),
}
ARM_RATE_HZ = 125.0


@dataclass(frozen=True)
class HorizonPolicy:
    predict: int = 16
    execute: int = 8
    policy_rate_hz: float = 10.0
    arm_rate_hz: float = ARM_RATE_HZ
    hand_rate_hz: float = 10.0

    def __post_init__(self):
        if not 0 < self.execute <= self.predict:
            raise ValidationError("execute", "need 0 < execute <= predict")
        if min(self.policy_rate_hz, self.arm_rate_hz, self.hand_rate_hz) <= 0:
            raise ValidationError("rate", "rates must be > 0")


@dataclass(frozen=True, eq=False)
class ActionFrame:
    ee_delta: np.ndarray  # (6,) translation mm + rotation vector rad
    hand: np.ndarray  # (N,) motor units
    hand_mode: str = RELATIVE

    def __post_init__(self):
        ee = np.asarray(self.ee_delta, dtype=float).reshape(-1)
        if ee.shape != (6,):
            raise ValidationError("ee_delta", "expected 6 values")
        if self.hand_mode not in (ABSOLUTE, RELATIVE):
            raise ValidationError("hand_mode", f"unknown hand mode {self.hand_mode!r}")
        object.__setattr__(self, "ee_delta", ee)
        object.__setattr__(self, "hand", np.asarray(self.hand, dtype=float).reshape(-1))

    @classmethod
    def from_vector(cls, v, hand_mode=RELATIVE):
        v = np.asarray(v, dtype=float)
        return cls(v[:6], v[6:], hand_mode)


@dataclass(frozen=True, eq=False)
class WristPose:
    position: np.ndarray  # mm, base frame
    rotvec: np.ndarray  # rad

    def __post_init__(self):
        object.__setattr__(self, "position", np.asarray(self.position, dtype=float).reshape(3))
        object.__setattr__(self, "rotvec", np.asarray(self.rotvec, dtype=float).reshape(3))

    @property
    def rotation(self) -> Rotation:
        return Rotation.from_rotvec(self.rotvec)


@dataclass(frozen=True, eq=False)
class VirtualMotorState:
    values: np.ndarray | None = None
    motor_range: tuple = (0.0, 1000.0)

    @property
    def initialized(self) -> bool:
        return self.values is not None

    def clamp(self, v) -> np.ndarray:
        return np.clip(np.asarray(v, dtype=float), *self.motor_range)


def resolve_wrist(current: WristPose, ee_delta) -> WristPose:
    """Add a base-frame translation and left-compose the rotation-vector delta."""
    d = np.asarray(ee_delta, dtype=float).reshape(6)
    if not np.all(np.isfinite(d)):
        raise ValidationError("ee_delta", "non-finite delta")
    if not np.any(d[3:]):
        return WristPose(current.position + d[:3], current.rotvec.copy())
    rot = Rotation.from_rotvec(d[3:]) * current.rotation
    return WristPose(current.position + d[:3], rot.as_rotvec())


def resolve_hand(frame: ActionFrame, vstate: VirtualMotorState, hardware_read=None, mode: str = VIRTUAL):
    """Return ``(command, new_state)`` for one executed hand action."""
    if mode not in (VIRTUAL, HARDWARE):
        raise ValidationError("mode", f"unknown execution mode {mode!r}")
    if frame.hand_mode == ABSOLUTE:
        cmd = vstate.clamp(frame.hand)
        return cmd, replace(vstate, values=cmd)
    if mode == HARDWARE:
        if hardware_read is None:
            raise ValidationError("hardware_read", "hardware mode needs a motor read for relative actions")
        base = np.asarray(hardware_read, dtype=float)
    else:
        if not vstate.initialized:
            if hardware_read is None:
                raise UninitializedVirtualState("virtual motor state needs an initial hardware read")
            vstate = replace(vstate, values=vstate.clamp(hardware_read))
        base = vstate.values
    if base.shape != frame.hand.shape:
        raise LengthMismatch(f"hand action has {frame.hand.size} DoFs, state has {base.size}")
    cmd = vstate.clamp(base + frame.hand)
    return cmd, replace(vstate, values=cmd)


def window_actions(predicted, policy: HorizonPolicy = HorizonPolicy()):
    """Keep the first ``execute`` of ``predict`` predicted frames."""
    if len(predicted) != policy.predict:
        raise LengthMismatch(f"expected {policy.predict} predicted frames, got {len(predicted)}")
    return predicted[:policy.execute]


def interpolate_commands(commands, policy_rate_hz: float = 10.0, target_rate_hz: float = 10.0):
    """Resample commands from the policy rate to a hardware rate.

    Ticks fall at multiples of ``1/target_rate``; commands sit at multiples
    of ``1/policy_rate``. Positions are computed with exact rationals so
    ticks that coincide with a command reproduce it exactly. The last
    command is appended when it does not land on a tick.
    """
    cmds = np.asarray(commands, dtype=float)
    if cmds.ndim == 1:
        cmds = cmds[:, None]
    policy = Fraction(policy_rate_hz).limit_denominator(10 ** 6)
    target = Fraction(target_rate_hz).limit_denominator(10 ** 6)
    if target < policy:
        raise ValidationError("target_rate_hz", "target rate must be >= policy rate")
    if cmds.shape[0] == 1:
        return cmds.copy(), np.zeros(1)
    ratio = policy / target  # command-index advance per tick
    last = cmds.shape[0] - 1
    n_ticks = int(last / ratio)  # floor
    out, times = [], []
    for k in range(n_ticks + 1):
        u = k * ratio
        j = min(int(u), last - 1) if u < last else last
        if j == last:
            out.append(cmds[last].copy())
        else:
            w = u - j
            if w == 0:
                out.append(cmds[j].copy())
            else:
                a, b = cmds[j], cmds[j + 1]
                v = a + float(w) * (b - a)
                out.append(np.clip(v, np.minimum(a, b), np.maximum(a, b)))
        times.append(float(k / target))
    if n_ticks * ratio != last:
        out.append(cmds[last].copy())
        times.append(float(last / policy))
    return np.array(out), np.array(times)


@dataclass
class ExecutionLog:
    wrist: list
    hand: list


def replay(steps, profile: HandProfile, mode: str = VIRTUAL, policy: HorizonPolicy = HorizonPolicy(),
           init_pose: WristPose | None = None, init_hand=None):
    """Run a sequence of policy inferences through the execution rules.

    ``steps`` is an iterable of dicts with ``actions`` (``predict`` rows of
    6 + N values), optional ``hand_mode`` and optional ``hardware_reads``
    (one row per executed step, simulating what the hand reports).
    Returns the per-policy-tick wrist poses and hand commands.
    """
    pose = init_pose or WristPose(np.zeros(3), np.zeros(3))
    state = VirtualMotorState(None if init_hand is None else np.asarray(init_hand, dtype=float),
                              profile.motor_range)
    wrist, hand = [], []
    for step in steps:
        actions = window_actions(list(step["actions"]), policy)
        reads = step.get("hardware_reads")
        mode_h = step.get("hand_mode", RELATIVE)
        for i, row in enumerate(actions):
            frame = ActionFrame.from_vector(row, mode_h)
            if frame.hand.size != profile.dofs:
                raise LengthMismatch(f"{profile.name} expects {profile.dofs} hand values, got {frame.hand.size}")
            read = None if reads is None else reads[i]
            if read is None and mode == HARDWARE and frame.hand_mode == RELATIVE:
                read = state.values
            pose = resolve_wrist(pose, frame.ee_delta)
            cmd, state = resolve_hand(frame, state, read, mode)
            wrist.append(np.concatenate([pose.position, pose.rotvec]))
            hand.append(cmd)
    return ExecutionLog(wrist, hand)
