"""Encoder-angle to motor-value calibration with direction-dependent tables."""
from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field

import numpy as np
from numpy.polynomial import polynomial as P
from scipy.optimize import lsq_linear

from .errors import DegenerateAbscissa, InsufficientData, ValidationError

CLOSING = "closing"
OPENING = "opening"
UNSPECIFIED = "unspecified"
SHARED = "shared"
DIRECTIONS = (CLOSING, OPENING, UNSPECIFIED)

POLYNOMIAL = "polynomial"
MONOTONE_PWL = "monotone_pwl"

DEFAULT_DEADBAND_DEG = 0.5


@dataclass(frozen=True)
class CalibPair:
    encoder_angle: float  # rad
    motor_value: float
    direction: str = UNSPECIFIED

    def __post_init__(self):
        if self.direction not in DIRECTIONS:
            raise ValidationError("direction", f"unknown direction {self.direction!r}")


@dataclass(frozen=True)
class JointModel:
    """One fitted curve. Polynomial coefficients are lowest order first."""

    kind: str
    coefficients: tuple = ()
    knots: tuple = ()
    values: tuple = ()
    rms: float = 0.0
    count: int = 0

    def evaluate(self, angle):
        x = np.asarray(angle, dtype=float)
        if self.kind == POLYNOMIAL:
            return P.polyval(x, np.asarray(self.coefficients))
        kx = np.asarray(self.knots)
        ky = np.asarray(self.values)
        y = np.interp(x, kx, ky)
        # linear continuation past the end knots keeps strict monotonicity
        lo_slope = (ky[1] - ky[0]) / (kx[1] - kx[0])
        hi_slope = (ky[-1] - ky[-2]) / (kx[-1] - kx[-2])
        y = np.where(x < kx[0], ky[0] + lo_slope * (x - kx[0]), y)
        y = np.where(x > kx[-1], ky[-1] + hi_slope * (x - kx[-1]), y)
        return y

    def to_dict(self):
        d = {"kind": self.kind, "rms": self.rms, "count": self.count}
        if self.kind == POLYNOMIAL:
            d["coefficients"] = list(self.coefficients)
        else:
            d["knots"] = list(self.knots)
            d["values"] = list(self.values)
        return d

    @classmethod
    def from_dict(cls, d):
        return cls(d["kind"], tuple(d.get("coefficients", ())), tuple(d.get("knots", ())),
                   tuple(d.get("values", ())), float(d.get("rms", 0.0)), int(d.get("count", 0)))


@dataclass
class ClampStats:
    evaluations: int = 0
    clamped: int = 0


@dataclass(frozen=True)
class CalibrationTable:
    """Per-joint mapping; ``models`` is keyed by direction plus ``"shared"``."""

    joint: str
    kind: str
    models: dict = field(default_factory=dict)
    motor_range: tuple = (0.0, 1000.0)

    def model_for(self, direction: str = UNSPECIFIED) -> JointModel:
        if direction in (CLOSING, OPENING) and direction in self.models:
            return self.models[direction]
        return self.models[SHARED]

    @property
    def residuals(self) -> dict:
        return {k: m.rms for k, m in self.models.items()}

    def to_dict(self):
        return {"joint": self.joint, "kind": self.kind, "motor_range": list(self.motor_range),
                "models": {k: m.to_dict() for k, m in self.models.items()}}

    @classmethod
    def from_dict(cls, d):
        return cls(d["joint"], d["kind"], {k: JointModel.from_dict(m) for k, m in d["models"].items()},
                   tuple(d["motor_range"]))


def _fit_polynomial(x, y, degree):
    coef = P.polyfit(x, y, degree)
    resid = y - P.polyval(x, coef)
    return JointModel(POLYNOMIAL, tuple(float(c) for c in coef),
                      rms=float(np.sqrt(np.mean(resid ** 2))), count=int(x.size))


def _fit_monotone(x, y, knots):
    """Least-squares piecewise-linear fit with strictly monotone knot values.

    Knot values are parameterized as a free start plus per-segment steps
    bounded away from zero (sign set by the overall trend).
    """
    if np.isscalar(knots):
        n = int(knots)
        kx = np.unique(np.quantile(x, np.linspace(0.0, 1.0, n)))
    else:
        kx = np.unique(np.asarray(knots, dtype=float))
    if kx.size < 2:
        raise DegenerateAbscissa("need at least two distinct knots")
    # hat-function basis: value at x is a convex mix of its two bracketing knots
    j = np.clip(np.searchsorted(kx, x, side="right") - 1, 0, kx.size - 2)
    w = (x - kx[j]) / (kx[j + 1] - kx[j])
    basis = np.zeros((x.size, kx.size))
    basis[np.arange(x.size), j] = 1.0 - w
    basis[np.arange(x.size), j + 1] += w
    sign = 1.0 if np.polyfit(x, y, 1)[0] >= 0 else -1.0
    cum = np.tril(np.ones((kx.size, kx.size)))  # values = cum @ [v0, step1, step2, ...]
    a = basis @ cum
    a[:, 1:] *= sign
    span = max(float(np.ptp(y)), 1.0)
    min_step = 1e-9 * span
    lower = np.full(kx.size, min_step)
    lower[0] = -np.inf
    sol = lsq_linear(a, y, bounds=(lower, np.full(kx.size, np.inf)), method="bvls")
    u = sol.x.copy()
    u[1:] *= sign
    ky = cum @ u
    resid = y - basis @ ky
    return JointModel(MONOTONE_PWL, knots=tuple(float(v) for v in kx), values=tuple(float(v) for v in ky),
                      rms=float(np.sqrt(np.mean(resid ** 2))), count=int(x.size))


def _fit_group(x, y, kind, degree, knots, label):
    need = degree + 1 if kind == POLYNOMIAL else 2
    if x.size < need:
        raise InsufficientData(f"{label}: {x.size} pairs, need at least {need}")
    if np.ptp(x) == 0:
        raise DegenerateAbscissa(f"{label}: all encoder angles identical")
    if kind == POLYNOMIAL:
        return _fit_polynomial(x, y, degree)
    if kind == MONOTONE_PWL:
        return _fit_monotone(x, y, knots)
    raise ValidationError("kind", f"unknown model kind {kind!r}")


def fit_calibration(pairs, kind: str = POLYNOMIAL, degree: int = 3, knots=8,
                    joint: str = "joint", motor_range=(0.0, 1000.0)) -> CalibrationTable:
    """Fit one joint's encoder-to-motor table.

    A shared model is always fitted on every pair. Closing and opening
    pairs additionally get their own models, used when the motion
    direction is known.
    """
    pairs = list(pairs)
    lo, hi = (float(v) for v in motor_range)
    for p in pairs:
        if not lo <= p.motor_value <= hi:
            raise ValidationError("motor_value", f"{p.motor_value} outside motor range {motor_range}")
    x = np.array([p.encoder_angle for p in pairs], dtype=float)
    y = np.array([p.motor_value for p in pairs], dtype=float)
    dirs = np.array([p.direction for p in pairs])
    models = {SHARED: _fit_group(x, y, kind, degree, knots, f"{joint}/shared")}
    for d in (CLOSING, OPENING):
        sel = dirs == d
        if sel.any():
            models[d] = _fit_group(x[sel], y[sel], kind, degree, knots, f"{joint}/{d}")
    return CalibrationTable(joint, kind, models, (lo, hi))


def encoder_to_motor(table: CalibrationTable, angle, direction: str = UNSPECIFIED,
                     stats: ClampStats | None = None):
    """Motor command for an encoder angle, clamped to the table's motor range."""
    raw = table.model_for(direction).evaluate(angle)
    lo, hi = table.motor_range
    out = np.clip(raw, lo, hi)
    if stats is not None:
        raw_arr = np.atleast_1d(raw)
        stats.evaluations += raw_arr.size
        stats.clamped += int(np.count_nonzero((raw_arr < lo) | (raw_arr > hi)))
    return float(out) if np.ndim(out) == 0 else out


def infer_directions(angles, deadband_deg: float = DEFAULT_DEADBAND_DEG):
    """Direction label per frame from the sign of the angle change.

    Increasing angle is closing. Changes inside the deadband keep the
    previous label; frames before the first decisive move are unspecified.
    """
    angles = np.asarray(angles, dtype=float)
    band = math.radians(deadband_deg)
    out = [UNSPECIFIED] * angles.size
    current = UNSPECIFIED
    for i in range(1, angles.size):
        delta = angles[i] - angles[i - 1]
        if delta > band:
            current = CLOSING
        elif delta < -band:
            current = OPENING
        out[i] = current
    return out


def read_calibration_csv(path) -> dict:
    """Group CSV rows (joint, encoder_angle_rad, motor_value, direction) by joint."""
    groups: dict = {}
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            direction = (row.get("direction") or UNSPECIFIED).strip().lower() or UNSPECIFIED
            groups.setdefault(row["joint"], []).append(
                CalibPair(float(row["encoder_angle_rad"]), float(row["motor_value"]), direction))
    return groups


def write_tables(tables, path) -> None:
    with open(path, "w") as fh:
        json.dump({t.joint: t.to_dict() for t in tables}, fh, indent=2)
        fh.write("\n")


def read_tables(path) -> dict:
    with open(path) as fh:
        return {k: CalibrationTable.from_dict(v) for k, v in json.load(fh).items()}
