"""Finger mechanism types and forward kinematics.

Lengths are millimeters and angles radians everywhere inside the library.
Hand description files carry degrees; conversion happens in the loader.

Every FK routine has a batched form operating on an ``(M, dof)`` array of
configurations. The single-configuration functions call the batched code
with one row, so both paths are bit-identical.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from functools import cached_property
from importlib import resources
from pathlib import Path

import numpy as np
from scipy.spatial.transform import Rotation

from .errors import (BranchDiscontinuity, JointLimitViolation, LoopClosureFailure,
                     ParseError, ValidationError)

SERIAL = "serial"
FOURBAR = "fourbar"
SERIAL_WITH_FOURBAR = "serial_with_fourbar"
KINDS = (SERIAL, FOURBAR, SERIAL_WITH_FOURBAR)

CLOSURE_EPS = 1e-6  # mm, margin kept from the tangent-circle singularity
UNIT_TOL = 1e-9

BUNDLED_HANDS = ("toy2f", "inspire_like", "xhand_like")


def _vec3(v, name):
    arr = np.asarray(v, dtype=float).reshape(-1)
    if arr.shape != (3,):
        raise ValidationError(name, f"expected 3 values, got {arr.shape[0]}")
    if not np.all(np.isfinite(arr)):
        raise ValidationError(name, "non-finite value")
    return arr


def _frozen(arr):
    arr = np.array(arr, dtype=float)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class Transform:
    """Rigid transform: translation (mm) plus roll/pitch/yaw (rad, fixed-axis xyz)."""

    translation: tuple = (0.0, 0.0, 0.0)
    rpy: tuple = (0.0, 0.0, 0.0)

    def __post_init__(self):
        object.__setattr__(self, "translation", tuple(float(x) for x in _vec3(self.translation, "translation")))
        object.__setattr__(self, "rpy", tuple(float(x) for x in _vec3(self.rpy, "rpy")))

    @cached_property
    def rotation(self) -> np.ndarray:
        if self.rpy == (0.0, 0.0, 0.0):
            return _frozen(np.eye(3))
        return _frozen(Rotation.from_euler("xyz", self.rpy).as_matrix())

    @cached_property
    def matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.rotation
        m[:3, 3] = self.translation
        return _frozen(m)

    @classmethod
    def from_matrix(cls, m) -> "Transform":
        m = np.asarray(m, dtype=float)
        rpy = Rotation.from_matrix(m[:3, :3]).as_euler("xyz")
        return cls(tuple(m[:3, 3]), tuple(rpy))

    def compose(self, other: "Transform") -> "Transform":
        """Return ``self * other`` (apply ``other`` first, then ``self``)."""
        return Transform.from_matrix(self.matrix @ other.matrix)

    def apply_point(self, p) -> np.ndarray:
        return np.asarray(p, dtype=float) @ self.rotation.T + np.asarray(self.translation)

    def apply_vector(self, v) -> np.ndarray:
        return np.asarray(v, dtype=float) @ self.rotation.T


IDENTITY = Transform()


@dataclass(frozen=True, eq=False)
class Pose:
    """Fingertip position (mm) and unit distal-axis direction."""

    position: np.ndarray
    direction: np.ndarray

    def __post_init__(self):
        p = _frozen(_vec3(self.position, "position"))
        d = _frozen(_vec3(self.direction, "direction"))
        if abs(np.linalg.norm(d) - 1.0) > UNIT_TOL:
            raise ValidationError("direction", f"not unit length (|d|={np.linalg.norm(d)!r})")
        object.__setattr__(self, "position", p)
        object.__setattr__(self, "direction", d)

    def __eq__(self, other):
        if not isinstance(other, Pose):
            return NotImplemented
        return bool(np.array_equal(self.position, other.position)
                    and np.array_equal(self.direction, other.direction))

    def transformed(self, t: Transform) -> "Pose":
        return Pose(t.apply_point(self.position), t.apply_vector(self.direction))


@dataclass(frozen=True)
class RevoluteJoint:
    origin: Transform = IDENTITY
    axis: tuple = (0.0, 0.0, 1.0)
    limits: tuple = (-math.pi, math.pi)

    def __post_init__(self):
        axis = _vec3(self.axis, "axis")
        if abs(np.linalg.norm(axis) - 1.0) > UNIT_TOL:
            raise ValidationError("axis", "not unit length")
        lo, hi = (float(x) for x in self.limits)
        if not (math.isfinite(lo) and math.isfinite(hi)):
            raise ValidationError("limits", "must be finite")
        if not lo < hi:
            raise ValidationError("limits", f"theta_min {lo} must be < theta_max {hi}")
        object.__setattr__(self, "axis", tuple(float(x) for x in axis))
        object.__setattr__(self, "limits", (lo, hi))


@dataclass(frozen=True)
class SerialChain:
    joints: tuple
    tip_offset: Transform = IDENTITY

    def __post_init__(self):
        joints = tuple(self.joints)
        if not joints:
            raise ValidationError("joints", "serial chain needs at least one joint")
        object.__setattr__(self, "joints", joints)


@dataclass(frozen=True)
class FourBarLinkage:
    """Planar crank-rocker style loop in the x-y plane of ``base_pose``.

    The crank pivots at the base origin, the rocker at ``(ground, 0)``.
    The crank angle is measured from the ground line. ``branch`` = +1 puts
    the coupler joint on the left of the ray from crank tip to rocker pivot,
    -1 on the right. The fingertip rides on the coupler at ``coupler_point``
    ``(e, f)``: ``e`` along the coupler, ``f`` perpendicular to it.
    """

    ground: float
    crank: float
    coupler: float
    rocker: float
    base_pose: Transform = IDENTITY
    coupler_point: tuple = (0.0, 0.0)
    input_limits: tuple = (0.0, math.pi / 2)
    branch: int = 1

    def __post_init__(self):
        for name in ("ground", "crank", "coupler", "rocker"):
            v = float(getattr(self, name))
            if not (math.isfinite(v) and v > 0):
                raise ValidationError(name, f"length must be > 0, got {v}")
            object.__setattr__(self, name, v)
        e, f = (float(x) for x in self.coupler_point)
        object.__setattr__(self, "coupler_point", (e, f))
        lo, hi = (float(x) for x in self.input_limits)
        if not (math.isfinite(lo) and math.isfinite(hi) and lo < hi):
            raise ValidationError("input_limits", f"need finite theta_min < theta_max, got {(lo, hi)}")
        object.__setattr__(self, "input_limits", (lo, hi))
        if self.branch not in (1, -1):
            raise ValidationError("branch", "must be +1 or -1")

    def pivot_distance_range(self) -> tuple:
        """Exact min and max crank-tip to rocker-pivot distance over the input range."""
        lo, hi = self.input_limits
        a, g = self.crank, self.ground
        cands = [lo, hi]
        k0 = math.ceil(lo / math.pi)
        k = k0
        while k * math.pi <= hi:
            cands.append(k * math.pi)
            k += 1
        d = [math.sqrt(max(a * a + g * g - 2 * a * g * math.cos(t), 0.0)) for t in cands]
        return min(d), max(d)

    def is_closable(self) -> bool:
        dmin, dmax = self.pivot_distance_range()
        b, c = self.coupler, self.rocker
        return dmin >= abs(b - c) + CLOSURE_EPS and dmax <= b + c - CLOSURE_EPS

    def check_continuity(self, n: int = 257) -> None:
        """Raise unless the selected branch exists over the whole input range.

        ``BranchDiscontinuity`` when the loop opens somewhere strictly inside
        the range and closes again, ``LoopClosureFailure`` otherwise.
        """
        if self.is_closable():
            return
        theta = np.linspace(*self.input_limits, n)
        ok = fourbar_joints(self, theta)[3]
        bad = np.flatnonzero(~ok)
        good = np.flatnonzero(ok)
        if good.size and bad.size and good[0] < bad[0] < good[-1]:
            raise BranchDiscontinuity(
                f"branch {self.branch} vanishes near input angle {theta[bad[0]]:.6g} rad "
                "and reappears later in the range")
        if bad.size:
            raise LoopClosureFailure(float(theta[bad[0]]))
        # sampling missed a narrow failure band found analytically
        raise LoopClosureFailure(self.input_limits)


@dataclass(frozen=True)
class FingerMechanism:
    name: str
    kind: str
    chain: SerialChain | None = None
    fourbar: FourBarLinkage | None = None
    swing: RevoluteJoint | None = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValidationError("kind", f"unknown finger kind {self.kind!r}")
        need = {SERIAL: ("chain",), FOURBAR: ("fourbar",),
                SERIAL_WITH_FOURBAR: ("fourbar", "swing")}[self.kind]
        for attr in ("chain", "fourbar", "swing"):
            present = getattr(self, attr) is not None
            if present != (attr in need):
                raise ValidationError(attr, f"{'missing' if not present else 'unexpected'} for kind {self.kind}")

    @property
    def actuated_dofs(self) -> int:
        if self.kind == SERIAL:
            return len(self.chain.joints)
        return 1 if self.kind == FOURBAR else 2

    @property
    def limits(self) -> np.ndarray:
        """``(dof, 2)`` array of configuration limits in input order."""
        if self.kind == SERIAL:
            rows = [j.limits for j in self.chain.joints]
        elif self.kind == FOURBAR:
            rows = [self.fourbar.input_limits]
        else:
            rows = [self.swing.limits, self.fourbar.input_limits]
        return np.array(rows, dtype=float)

    def rebased(self, t: Transform) -> "FingerMechanism":
        """Same mechanism with ``t`` applied in front of its base frame."""
        if self.kind == SERIAL:
            joints = list(self.chain.joints)
            joints[0] = replace(joints[0], origin=t.compose(joints[0].origin))
            return replace(self, chain=replace(self.chain, joints=tuple(joints)))
        if self.kind == FOURBAR:
            return replace(self, fourbar=replace(self.fourbar, base_pose=t.compose(self.fourbar.base_pose)))
        return replace(self, swing=replace(self.swing, origin=t.compose(self.swing.origin)))


@dataclass(frozen=True)
class HandModel:
    name: str
    fingers: tuple = field(default_factory=tuple)

    def __post_init__(self):
        fingers = tuple(self.fingers)
        names = [f.name for f in fingers]
        if len(set(names)) != len(names):
            raise ValidationError("fingers", "finger names must be unique")
        object.__setattr__(self, "fingers", fingers)

    def finger(self, name: str) -> FingerMechanism:
        for f in self.fingers:
            if f.name == name:
                return f
        raise KeyError(name)


# --- batched kinematics -----------------------------------------------------

def _axis_rotations(axis, theta):
    """Rodrigues rotation matrices, shape ``(M, 3, 3)``."""
    k = np.asarray(axis, dtype=float)
    kx = np.array([[0.0, -k[2], k[1]], [k[2], 0.0, -k[0]], [-k[1], k[0], 0.0]])
    s = np.sin(theta)[:, None, None]
    c = (1.0 - np.cos(theta))[:, None, None]
    return np.eye(3) + s * kx + c * (kx @ kx)


def _check_limits(limits, theta):
    lo, hi = limits[:, 0], limits[:, 1]
    bad = (theta < lo) | (theta > hi) | ~np.isfinite(theta)
    if np.any(bad):
        row, col = np.argwhere(bad)[0]
        raise JointLimitViolation(int(col), float(theta[row, col]), tuple(limits[col]))


def _serial_batch(chain: SerialChain, theta):
    m = theta.shape[0]
    rot = np.broadcast_to(np.eye(3), (m, 3, 3))
    trans = np.zeros((m, 3))
    for i, joint in enumerate(chain.joints):
        o = joint.origin
        trans = trans + rot @ np.asarray(o.translation)
        rot = rot @ o.rotation @ _axis_rotations(joint.axis, theta[:, i])
    tip = chain.tip_offset
    trans = trans + rot @ np.asarray(tip.translation)
    rot = rot @ tip.rotation
    return trans, rot[:, :, 0].copy()


def fourbar_joints(linkage: FourBarLinkage, theta):
    """Planar loop solution for each input angle.

    Returns ``(A, O2, B, ok)``: crank tip, rocker pivot, coupler joint (all
    ``(M, 2)`` in the linkage plane) and the loop-closure mask. Rows that
    fail to close hold NaN.
    """
    theta = np.asarray(theta, dtype=float).reshape(-1)
    g, a, b, c = linkage.ground, linkage.crank, linkage.coupler, linkage.rocker
    pa = np.stack([a * np.cos(theta), a * np.sin(theta)], axis=1)
    o2 = np.array([g, 0.0])
    diff = o2 - pa
    d = np.hypot(diff[:, 0], diff[:, 1])
    ok = (d >= abs(b - c) + CLOSURE_EPS) & (d <= b + c - CLOSURE_EPS)
    with np.errstate(invalid="ignore", divide="ignore"):
        u = diff / d[:, None]
        x = (b * b - c * c + d * d) / (2.0 * d)
        h = np.sqrt(np.maximum(b * b - x * x, 0.0))
    perp = np.stack([-u[:, 1], u[:, 0]], axis=1)
    pb = pa + x[:, None] * u + (linkage.branch * h)[:, None] * perp
    pb[~ok] = np.nan
    return pa, np.broadcast_to(o2, pa.shape), pb, ok


def _fourbar_batch(linkage: FourBarLinkage, theta):
    pa, _, pb, ok = fourbar_joints(linkage, theta)
    ux = pb - pa
    ux = ux / np.hypot(ux[:, 0], ux[:, 1])[:, None]
    uy = np.stack([-ux[:, 1], ux[:, 0]], axis=1)
    e, f = linkage.coupler_point
    p = pa + e * ux + f * uy
    zeros = np.zeros((p.shape[0], 1))
    base = linkage.base_pose
    pos = np.hstack([p, zeros]) @ base.rotation.T + np.asarray(base.translation)
    direction = np.hstack([ux, zeros]) @ base.rotation.T
    return pos, direction, ok


def fk_batch(mech: FingerMechanism, theta, check_limits: bool = True):
    """Fingertip poses for many configurations.

    Parameters
    ----------
    mech : FingerMechanism
    theta : array_like, shape (M, dof)
    check_limits : bool
        Raise ``JointLimitViolation`` for any out-of-range entry.

    Returns
    -------
    positions : (M, 3) ndarray
    directions : (M, 3) ndarray
    ok : (M,) bool ndarray
        False where a four-bar loop failed to close; those rows are NaN.
    """
    theta = np.atleast_2d(np.asarray(theta, dtype=float))
    if theta.shape[1] != mech.actuated_dofs:
        raise ValidationError("theta", f"expected {mech.actuated_dofs} values per configuration, got {theta.shape[1]}")
    if check_limits:
        _check_limits(mech.limits, theta)
    if mech.kind == SERIAL:
        pos, direction = _serial_batch(mech.chain, theta)
        return pos, direction, np.ones(theta.shape[0], dtype=bool)
    if mech.kind == FOURBAR:
        return _fourbar_batch(mech.fourbar, theta[:, 0])
    pos, direction, ok = _fourbar_batch(mech.fourbar, theta[:, 1])
    swing = mech.swing
    rot = swing.origin.rotation @ _axis_rotations(swing.axis, theta[:, 0])
    pos = np.einsum("mij,mj->mi", rot, pos) + np.asarray(swing.origin.translation)
    direction = np.einsum("mij,mj->mi", rot, direction)
    return pos, direction, ok


def fk_serial(chain: SerialChain, theta) -> Pose:
    theta = np.asarray(theta, dtype=float).reshape(1, -1)
    if theta.shape[1] != len(chain.joints):
        raise ValidationError("theta", f"expected {len(chain.joints)} joint values")
    _check_limits(np.array([j.limits for j in chain.joints]), theta)
    pos, direction = _serial_batch(chain, theta)
    return Pose(pos[0], direction[0])


def fk_fourbar(linkage: FourBarLinkage, theta_in: float) -> Pose:
    _check_limits(np.array([linkage.input_limits]), np.array([[float(theta_in)]]))
    pos, direction, ok = _fourbar_batch(linkage, np.array([float(theta_in)]))
    if not ok[0]:
        raise LoopClosureFailure(float(theta_in))
    return Pose(pos[0], direction[0])


def fk_finger(mech: FingerMechanism, theta) -> Pose:
    theta = np.asarray(theta, dtype=float).reshape(1, -1)
    pos, direction, ok = fk_batch(mech, theta)
    if not ok[0]:
        raise LoopClosureFailure(float(theta[0, -1]))
    return Pose(pos[0], direction[0])


# --- hand description files -------------------------------------------------

def _deg(x) -> float:
    return round(math.degrees(float(x)), 12)


def _get(d, key, path):
    try:
        return d[key]
    except (KeyError, TypeError):
        raise ValidationError(f"{path}.{key}", "missing") from None


def _limits_from_deg(raw, path):
    try:
        lo, hi = (float(v) for v in raw)
    except (TypeError, ValueError):
        raise ValidationError(path, "expected [min_deg, max_deg]") from None
    if not lo < hi:
        raise ValidationError(path, f"theta_min {lo} deg must be < theta_max {hi} deg")
    return math.radians(lo), math.radians(hi)


def _transform_from(d, pos_key, rpy_key, path):
    xyz = _vec3(d.get(pos_key, (0.0, 0.0, 0.0)), f"{path}.{pos_key}")
    rpy = _vec3(d.get(rpy_key, (0.0, 0.0, 0.0)), f"{path}.{rpy_key}")
    return Transform(tuple(xyz), tuple(math.radians(v) for v in rpy))


def _joint_from(d, path):
    return RevoluteJoint(
        origin=_transform_from(d, "origin_mm", "origin_rpy_deg", path),
        axis=tuple(_vec3(d.get("axis", (0.0, 0.0, 1.0)), f"{path}.axis")),
        limits=_limits_from_deg(_get(d, "limits_deg", path), f"{path}.limits_deg"),
    )


def _fourbar_from(d, limits_deg, path):
    fb = _get(d, "fourbar", path)
    p = f"{path}.fourbar"
    try:
        return FourBarLinkage(
            ground=float(_get(fb, "ground_mm", p)),
            crank=float(_get(fb, "crank_mm", p)),
            coupler=float(_get(fb, "coupler_mm", p)),
            rocker=float(_get(fb, "rocker_mm", p)),
            base_pose=_transform_from(fb, "base_mm", "base_rpy_deg", p),
            coupler_point=tuple(float(v) for v in fb.get("coupler_point_mm", (0.0, 0.0))),
            input_limits=_limits_from_deg(limits_deg, f"{path}.limits_deg"),
            branch=int(fb.get("branch", 1)),
        )
    except ValidationError as exc:
        raise ValidationError(f"{p}.{exc.field}", str(exc)) from None


def finger_from_dict(d, path="finger") -> FingerMechanism:
    name = str(_get(d, "name", path))
    path = f"fingers[{name}]"
    kind = _get(d, "kind", path)
    if kind == SERIAL:
        joints = tuple(_joint_from(j, f"{path}.joints[{i}]") for i, j in enumerate(_get(d, "joints", path)))
        tip = _transform_from(d, "tip_offset_mm", "tip_rpy_deg", path)
        return FingerMechanism(name, kind, chain=SerialChain(joints, tip))
    if kind == FOURBAR:
        linkage = _fourbar_from(d, _get(d, "limits_deg", path), path)
        return FingerMechanism(name, kind, fourbar=linkage)
    if kind == SERIAL_WITH_FOURBAR:
        swing = _joint_from(_get(d, "swing", path), f"{path}.swing")
        linkage = _fourbar_from(d, _get(d, "limits_deg", path), path)
        return FingerMechanism(name, kind, fourbar=linkage, swing=swing)
    raise ValidationError(f"{path}.kind", f"unknown finger kind {kind!r}")


def _joint_to_dict(j: RevoluteJoint):
    return {
        "origin_mm": list(j.origin.translation),
        "origin_rpy_deg": [_deg(v) for v in j.origin.rpy],
        "axis": list(j.axis),
        "limits_deg": [_deg(v) for v in j.limits],
    }


def _fourbar_to_dict(fb: FourBarLinkage):
    return {
        "ground_mm": fb.ground, "crank_mm": fb.crank,
        "coupler_mm": fb.coupler, "rocker_mm": fb.rocker,
        "base_mm": list(fb.base_pose.translation),
        "base_rpy_deg": [_deg(v) for v in fb.base_pose.rpy],
        "coupler_point_mm": list(fb.coupler_point),
        "branch": fb.branch,
    }


def finger_to_dict(f: FingerMechanism) -> dict:
    out = {"name": f.name, "kind": f.kind}
    if f.kind == SERIAL:
        out["joints"] = [_joint_to_dict(j) for j in f.chain.joints]
        out["tip_offset_mm"] = list(f.chain.tip_offset.translation)
        out["tip_rpy_deg"] = [_deg(v) for v in f.chain.tip_offset.rpy]
        return out
    if f.kind == SERIAL_WITH_FOURBAR:
        out["swing"] = _joint_to_dict(f.swing)
    out["fourbar"] = _fourbar_to_dict(f.fourbar)
    out["limits_deg"] = [_deg(v) for v in f.fourbar.input_limits]
    return out


def hand_model_to_dict(model: HandModel) -> dict:
    return {"name": model.name, "fingers": [finger_to_dict(f) for f in model.fingers]}


def hand_model_from_dict(d, strict_closure: bool = True) -> HandModel:
    model = HandModel(str(_get(d, "name", "hand")),
                      tuple(finger_from_dict(f) for f in _get(d, "fingers", "hand")))
    if strict_closure:
        for f in model.fingers:
            if f.fourbar is not None:
                try:
                    f.fourbar.check_continuity()
                except (LoopClosureFailure, BranchDiscontinuity) as exc:
                    raise ValidationError(f"fingers[{f.name}].fourbar", str(exc)) from None
    return model


def read_hand_json(path) -> dict:
    text = Path(path).read_text()
    try:
        return json.loads(text)
    except json.JSONDecodeError as exc:
        raise ParseError(exc.lineno, exc.msg) from None


def load_hand_model(path) -> HandModel:
    """Load and validate a ``.hand`` description (JSON, degrees and mm)."""
    return hand_model_from_dict(read_hand_json(path))


def save_hand_model(model: HandModel, path) -> None:
    Path(path).write_text(json.dumps(hand_model_to_dict(model), indent=2) + "\n")


def bundled_hand_path(name: str) -> Path:
    if name not in BUNDLED_HANDS:
        raise KeyError(f"no bundled hand {name!r}; choose from {BUNDLED_HANDS}")
    return Path(str(resources.files("exoforge") / "data" / f"{name}.hand"))


def resolve_hand_path(name_or_path) -> Path:
    """Accept either a bundled hand name or a filesystem path."""
    p = Path(name_or_path)
    if p.exists():
        return p
    return bundled_hand_path(str(name_or_path))
