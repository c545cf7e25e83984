"""Exoskeleton design search and post-optimization adjustments.

The outer search is a seeded differential evolution (best/1/bin) over the
design vector: joint anchor positions followed by link lengths. Candidates
are clipped into their bounds before every evaluation. Each candidate's
workspace is re-sampled from its own mechanism; the robot workspace is
fixed and its index is built once.
"""
from __future__ import annotations

import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import NamedTuple

import numpy as np

from .errors import (EmptyWorkspace, LimitCollapse, OptimizationDiverged,
                     TemplateInstantiationError, ValidationError)
from .kinemodel import (SERIAL, FingerMechanism, RevoluteJoint, Transform,
                        finger_from_dict, read_hand_json)
from .workspace import (FingertipPoseSet, PoseMetricParams, RefineParams, SimilarityReport,
                        combine_reports, grid_configs, sample_configs, sample_workspace, similarity,
                        _per_dof_counts)

ANCHOR_AXES = ("x", "y", "z")
FOURBAR_LENGTHS = ("ground", "crank", "coupler", "rocker")


@dataclass(frozen=True, eq=False)
class DesignParams:
    """Design vector: ``n`` joint anchors (mm, flange frame) then ``m`` lengths (mm)."""

    joint_anchors: np.ndarray
    lengths: np.ndarray
    lower: np.ndarray
    upper: np.ndarray
    names: tuple = ()

    def __post_init__(self):
        anchors = np.asarray(self.joint_anchors, dtype=float).reshape(-1, 3)
        lengths = np.asarray(self.lengths, dtype=float).reshape(-1)
        size = anchors.size + lengths.size
        lower = np.asarray(self.lower, dtype=float).reshape(-1)
        upper = np.asarray(self.upper, dtype=float).reshape(-1)
        if lower.shape != (size,) or upper.shape != (size,):
            raise ValidationError("bounds", f"expected {size} lower/upper bounds")
        if np.any(lower > upper):
            raise ValidationError("bounds", "lower bound above upper bound")
        names = tuple(self.names) or tuple(f"p{i}" for i in range(size))
        if len(names) != size:
            raise ValidationError("names", "one name per scalar required")
        for attr, val in (("joint_anchors", anchors), ("lengths", lengths), ("lower", lower), ("upper", upper)):
            val = val.copy()
            val.setflags(write=False)
            object.__setattr__(self, attr, val)
        object.__setattr__(self, "names", names)

    @property
    def size(self) -> int:
        return self.joint_anchors.size + self.lengths.size

    def vector(self) -> np.ndarray:
        return np.concatenate([self.joint_anchors.reshape(-1), self.lengths])

    def with_vector(self, v) -> "DesignParams":
        v = np.asarray(v, dtype=float).reshape(-1)
        n = self.joint_anchors.size
        return replace(self, joint_anchors=v[:n].reshape(-1, 3), lengths=v[n:])

    def projected(self) -> "DesignParams":
        return self.with_vector(np.clip(self.vector(), self.lower, self.upper))

    def to_dict(self) -> dict:
        return {
            "names": list(self.names),
            "values": [float(v) for v in self.vector()],
            "lower": [float(v) for v in self.lower],
            "upper": [float(v) for v in self.upper],
            "n_anchors": int(self.joint_anchors.shape[0]),
        }

    @classmethod
    def from_dict(cls, d) -> "DesignParams":
        v = np.asarray(d["values"], dtype=float)
        n = 3 * int(d["n_anchors"])
        return cls(v[:n].reshape(-1, 3), v[n:], d["lower"], d["upper"], tuple(d["names"]))


@dataclass(frozen=True)
class AdjustmentSpec:
    tip_extension: float = 3.0  # mm
    limit_tightening: float = 5.0  # degrees

    def __post_init__(self):
        if self.tip_extension < 0 or self.limit_tightening < 0:
            raise ValidationError("adjustment", "tip_extension and limit_tightening must be >= 0")


@dataclass(frozen=True)
class OptimizerConfig:
    population: int = 32
    generations: int = 200
    mutation: float = 0.7
    crossover: float = 0.9
    seed: int = 0
    exo_samples: object = 2048
    robot_samples: object = 512
    scheme: str = "grid"
    lam: float = 10.0
    refine_iterations: int = 0
    refine_candidates: int = 8
    tol: float = 0.0
    s_floor: float | None = None
    workers: int = 1

    def __post_init__(self):
        if self.population < 4:
            raise ValidationError("population", "must be >= 4")
        if not 0 < self.crossover <= 1:
            raise ValidationError("crossover", "must lie in (0, 1]")
        if not 0 < self.mutation < 2:
            raise ValidationError("mutation", "must lie in (0, 2)")
        if self.generations < 0:
            raise ValidationError("generations", "must be >= 0")

    @property
    def metric(self) -> PoseMetricParams:
        return PoseMetricParams(self.lam)

    @property
    def refine(self) -> RefineParams:
        return RefineParams(self.refine_iterations, self.refine_candidates)

    @classmethod
    def from_dict(cls, d) -> "OptimizerConfig":
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ValidationError("config", f"unknown keys {sorted(unknown)}")
        return cls(**d)


def thread_count(requested: int | None = None) -> int:
    cap = os.environ.get("EXOFORGE_THREADS")
    n = requested if requested else 1
    if cap:
        n = min(n, max(1, int(cap)))
    return max(1, n)


# --- templates ----------------------------------------------------------------

def _scaled(translation, length):
    t = np.asarray(translation, dtype=float)
    norm = np.linalg.norm(t)
    unit = t / norm if norm > 0 else np.array([1.0, 0.0, 0.0])
    return tuple(unit * length)


def _chain_index(target, prefix):
    try:
        return int(target[len(prefix):])
    except ValueError:
        raise TemplateInstantiationError(f"bad target {target!r}") from None


@dataclass(frozen=True)
class DesignTemplate:
    """Maps design-vector entries onto a base mechanism.

    Anchor targets: ``chain.joint0``, ``swing``, ``fourbar.base``.
    Length targets: ``chain.link<i>`` (i >= 1), ``chain.tip``,
    ``fourbar.ground|crank|coupler|rocker``, ``fourbar.point_e``.
    """

    mechanism: FingerMechanism
    anchor_targets: tuple = ()
    length_targets: tuple = ()

    def __post_init__(self):
        targets = list(self.anchor_targets) + list(self.length_targets)
        if len(set(targets)) != len(targets):
            raise TemplateInstantiationError("each design scalar must feed exactly one target")
        object.__setattr__(self, "anchor_targets", tuple(self.anchor_targets))
        object.__setattr__(self, "length_targets", tuple(self.length_targets))
        self.read(self.mechanism)  # validates target names against the mechanism

    def scalar_names(self) -> tuple:
        names = [f"{t}.{ax}" for t in self.anchor_targets for ax in ANCHOR_AXES]
        return tuple(names + list(self.length_targets))

    def read(self, mech: FingerMechanism):
        """Current anchor and length values of ``mech`` for this template."""
        anchors = [self._get_anchor(mech, t) for t in self.anchor_targets]
        lengths = [self._get_length(mech, t) for t in self.length_targets]
        return np.array(anchors, dtype=float).reshape(-1, 3), np.array(lengths, dtype=float)

    def params(self, lower, upper, mech: FingerMechanism | None = None) -> DesignParams:
        anchors, lengths = self.read(mech or self.mechanism)
        return DesignParams(anchors, lengths, lower, upper, self.scalar_names())

    def _get_anchor(self, mech, t):
        if t == "swing" and mech.swing is not None:
            return mech.swing.origin.translation
        if t == "fourbar.base" and mech.fourbar is not None:
            return mech.fourbar.base_pose.translation
        if t.startswith("chain.joint") and mech.chain is not None:
            i = _chain_index(t, "chain.joint")
            if 0 <= i < len(mech.chain.joints):
                return mech.chain.joints[i].origin.translation
        raise TemplateInstantiationError(f"anchor target {t!r} does not exist on {mech.kind} finger")

    def _get_length(self, mech, t):
        fb, chain = mech.fourbar, mech.chain
        if fb is not None and t.startswith("fourbar."):
            key = t.split(".", 1)[1]
            if key in FOURBAR_LENGTHS:
                return getattr(fb, key)
            if key == "point_e":
                return fb.coupler_point[0]
        if chain is not None:
            if t == "chain.tip":
                return float(np.linalg.norm(chain.tip_offset.translation))
            if t.startswith("chain.link"):
                i = _chain_index(t, "chain.link")
                if 1 <= i < len(chain.joints):
                    return float(np.linalg.norm(chain.joints[i].origin.translation))
        raise TemplateInstantiationError(f"length target {t!r} does not exist on {mech.kind} finger")

    def instantiate(self, p: DesignParams) -> FingerMechanism:
        if p.joint_anchors.shape[0] != len(self.anchor_targets) or p.lengths.size != len(self.length_targets):
            raise TemplateInstantiationError("design vector shape does not match template")
        if np.any(p.lengths <= 0):
            raise TemplateInstantiationError("all lengths must be > 0")
        mech = self.mechanism
        chain_joints = list(mech.chain.joints) if mech.chain is not None else None
        tip = mech.chain.tip_offset if mech.chain is not None else None
        fb_fields = {}
        swing = mech.swing
        fb = mech.fourbar
        for t, a in zip(self.anchor_targets, p.joint_anchors):
            a = tuple(float(x) for x in a)
            if t == "swing":
                swing = replace(swing, origin=Transform(a, swing.origin.rpy))
            elif t == "fourbar.base":
                fb_fields["base_pose"] = Transform(a, fb.base_pose.rpy)
            else:
                i = _chain_index(t, "chain.joint")
                j = chain_joints[i]
                chain_joints[i] = replace(j, origin=Transform(a, j.origin.rpy))
        for t, length in zip(self.length_targets, p.lengths):
            length = float(length)
            if t.startswith("fourbar."):
                key = t.split(".", 1)[1]
                if key == "point_e":
                    fb_fields["coupler_point"] = (length, fb.coupler_point[1])
                else:
                    fb_fields[key] = length
            elif t == "chain.tip":
                tip = Transform(_scaled(tip.translation, length), tip.rpy)
            else:
                i = _chain_index(t, "chain.link")
                j = chain_joints[i]
                chain_joints[i] = replace(j, origin=Transform(_scaled(j.origin.translation, length), j.origin.rpy))
        try:
            kw = {}
            if chain_joints is not None:
                kw["chain"] = replace(mech.chain, joints=tuple(chain_joints), tip_offset=tip)
            if fb is not None:
                kw["fourbar"] = replace(fb, **fb_fields)
            if swing is not None:
                kw["swing"] = swing
            return replace(mech, **kw)
        except ValidationError as exc:
            raise TemplateInstantiationError(str(exc)) from None


def design_from_dict(mech: FingerMechanism, design: dict):
    """Build ``(template, p0)`` from a finger's ``design`` section (mm)."""
    anchors = design.get("anchors", [])
    lengths = design.get("lengths", [])
    template = DesignTemplate(mech, tuple(a["target"] for a in anchors), tuple(l["target"] for l in lengths))
    lower = [v for a in anchors for v in a["lo_mm"]] + [l["lo_mm"] for l in lengths]
    upper = [v for a in anchors for v in a["hi_mm"]] + [l["hi_mm"] for l in lengths]
    p0 = template.params(lower, upper)
    if "values" in design:
        p0 = p0.with_vector(design["values"])
    return template, p0


def load_design_template(path, finger: str | None = None):
    """Read the design section of one finger from a ``.hand`` file."""
    data = read_hand_json(path)
    fingers = [f for f in data.get("fingers", []) if "design" in f]
    if finger is not None:
        fingers = [f for f in fingers if f.get("name") == finger]
    if not fingers:
        raise ValidationError("design", f"{path}: no finger with a design section" + (f" named {finger!r}" if finger else ""))
    spec = fingers[0]
    return design_from_dict(finger_from_dict(spec), spec["design"])


# --- constraints and adjustments -------------------------------------------

def constraint_check(p: DesignParams) -> list:
    v = p.vector()
    out = []
    for i, (name, x, lo, hi) in enumerate(zip(p.names, v, p.lower, p.upper)):
        if x < lo:
            out.append({"index": i, "name": name, "value": float(x), "bound": "lower", "limit": float(lo)})
        elif x > hi:
            out.append({"index": i, "name": name, "value": float(x), "bound": "upper", "limit": float(hi)})
    return out


def _tighten(joint_name, limits, t_deg):
    lo, hi = limits
    lo_deg = round(math.degrees(lo), 12) + t_deg
    hi_deg = round(math.degrees(hi), 12) - t_deg
    if not lo_deg < hi_deg:
        raise LimitCollapse(joint_name)
    return math.radians(lo_deg), math.radians(hi_deg)


def apply_adjustments(mech: FingerMechanism, adj: AdjustmentSpec) -> FingerMechanism:
    """Extend the distal link and pull every joint limit inward.

    The distal link is the tip offset of a serial chain or the coupler-point
    arm of a four-bar; it grows along its own direction. Limits shrink by
    ``adj.limit_tightening`` degrees at both ends.
    """
    if adj.tip_extension == 0 and adj.limit_tightening == 0:
        return mech
    t = adj.limit_tightening
    kw = {}
    if mech.chain is not None:
        tip = mech.chain.tip_offset
        length = float(np.linalg.norm(tip.translation)) + adj.tip_extension
        joints = tuple(replace(j, limits=_tighten(f"{mech.name}.joint{i}", j.limits, t)) if t else j
                       for i, j in enumerate(mech.chain.joints))
        kw["chain"] = replace(mech.chain, joints=joints,
                              tip_offset=Transform(_scaled(tip.translation, length), tip.rpy))
    if mech.fourbar is not None:
        fb = mech.fourbar
        e, f = fb.coupler_point
        r = math.hypot(e, f)
        point = ((e + adj.tip_extension, f) if r == 0
                 else (e * (r + adj.tip_extension) / r, f * (r + adj.tip_extension) / r))
        limits = _tighten(f"{mech.name}.input", fb.input_limits, t) if t else fb.input_limits
        kw["fourbar"] = replace(fb, coupler_point=point, input_limits=limits)
    if mech.swing is not None and t:
        kw["swing"] = replace(mech.swing, limits=_tighten(f"{mech.name}.swing", mech.swing.limits, t))
    return replace(mech, **kw)


def adjust_design(template: DesignTemplate, p: DesignParams, adj: AdjustmentSpec) -> FingerMechanism:
    return apply_adjustments(template.instantiate(p), adj)


# --- optimizer ------------------------------------------------------------------

class OptimizationResult(NamedTuple):
    params: DesignParams
    report: SimilarityReport
    history: list  # (generation, best_S, coverage, subset)


def _differential_evolution(evaluate, x0, lo, hi, cfg: OptimizerConfig):
    """Maximize ``evaluate(x)[0]`` inside the box ``[lo, hi]``.

    Fixed dimensions (lo == hi) never move. Per-generation generators are
    spawned from one SeedSequence so results do not depend on ``workers``.
    """
    x0 = np.clip(np.asarray(x0, dtype=float), lo, hi)
    free = hi > lo
    workers = thread_count(cfg.workers)
    pool = ThreadPoolExecutor(workers) if workers > 1 else None

    def run(batch):
        if pool is None:
            return [evaluate(x) for x in batch]
        return list(pool.map(evaluate, batch))

    def row(gen, payload):
        if payload is None:
            return (gen, -math.inf, math.inf, math.inf)
        return (gen, payload.S, payload.coverage_term, payload.subset_term)

    try:
        if not free.any():
            s, payload = evaluate(x0)
            return x0, s, payload, [row(0, payload) if payload else (0, s, math.inf, math.inf)]
        seeds = np.random.SeedSequence(cfg.seed).spawn(cfg.generations + 1)
        rng = np.random.default_rng(seeds[0])
        npop, dim = cfg.population, x0.size
        pop = lo + rng.random((npop, dim)) * (hi - lo)
        pop[0] = x0
        pop[:, ~free] = x0[~free]
        results = run(list(pop))
        fit = np.array([r[0] for r in results], dtype=float)
        payloads = [r[1] for r in results]
        best = int(np.argmax(fit))
        history = [row(0, payloads[best]) if payloads[best] is not None else (0, fit[best], math.inf, math.inf)]
        for gen in range(1, cfg.generations + 1):
            rng = np.random.default_rng(seeds[gen])
            best = int(np.argmax(fit))
            trials = np.empty_like(pop)
            for i in range(npop):
                choices = [j for j in range(npop) if j != i]
                r1, r2 = rng.choice(choices, size=2, replace=False)
                mutant = pop[best] + cfg.mutation * (pop[r1] - pop[r2])
                cross = rng.random(dim) < cfg.crossover
                cross[rng.integers(dim)] = True
                trial = np.where(cross, mutant, pop[i])
                trial = np.clip(trial, lo, hi)
                trial[~free] = x0[~free]
                trials[i] = trial
            results = run(list(trials))
            for i, (s, payload) in enumerate(results):
                if s >= fit[i]:
                    pop[i], fit[i], payloads[i] = trials[i], s, payload
            best = int(np.argmax(fit))
            history.append(row(gen, payloads[best]) if payloads[best] is not None
                           else (gen, fit[best], math.inf, math.inf))
            finite = fit[np.isfinite(fit)]
            if finite.size == npop and cfg.tol > 0 and finite.max() - finite.min() <= cfg.tol:
                break
        best = int(np.argmax(fit))
        return pop[best], fit[best], payloads[best], history
    finally:
        if pool is not None:
            pool.shutdown()


def _run(template: DesignTemplate, p0: DesignParams, score, cfg: OptimizerConfig, callback=None):
    if constraint_check(p0):
        raise ValidationError("p0", f"initial design out of bounds: {constraint_check(p0)}")

    def evaluate(x):
        p = p0.with_vector(x)
        if callback is not None:
            callback(p)
        try:
            mech = template.instantiate(p)
        except TemplateInstantiationError:
            return -math.inf, None
        report = score(mech)
        return (report.S, report) if report is not None else (-math.inf, None)

    x, s, report, history = _differential_evolution(evaluate, p0.vector(), p0.lower, p0.upper, cfg)
    if report is None:
        raise OptimizationDiverged(s, cfg.s_floor)
    if cfg.s_floor is not None and s < cfg.s_floor:
        raise OptimizationDiverged(s, cfg.s_floor)
    return OptimizationResult(p0.with_vector(x), report, history)


def optimize_design(template: DesignTemplate, p0: DesignParams, robot_ws: FingertipPoseSet,
                    cfg: OptimizerConfig = OptimizerConfig(), callback=None) -> OptimizationResult:
    """Search design parameters maximizing workspace similarity to ``robot_ws``.

    Candidates whose four-bar loop fails anywhere on the sampled input
    range are infeasible (scored -inf) rather than evaluated on the
    surviving samples, which would otherwise shrink the subset term.
    """
    if len(robot_ws) == 0:
        raise EmptyWorkspace("robot workspace is empty")
    metric, refine = cfg.metric, cfg.refine
    robot_ws.index(metric.lam)

    def score(mech):
        exo = sample_workspace(mech, cfg.exo_samples, cfg.scheme, cfg.seed)
        if exo.skipped or len(exo) == 0:
            return None
        return similarity(exo, robot_ws, metric, refine)

    return _run(template, p0, score, cfg, callback)


def optimize_grouped(template: DesignTemplate, p0: DesignParams, groups, cfg: OptimizerConfig,
                     metric: PoseMetricParams | None = None, callback=None) -> OptimizationResult:
    """Like ``optimize_design`` but sums the objective over swing groups.

    ``groups`` holds ``(swing_angle or None, target_set)`` pairs. With a
    swing angle the exoskeleton workspace is sampled over the four-bar
    input only, with the swing joint held at that angle.
    """
    metric = metric or cfg.metric
    refine = cfg.refine
    for _, g in groups:
        if len(g) == 0:
            raise EmptyWorkspace("empty target group")
        g.index(metric.lam)

    def score(mech):
        reports = []
        for swing, target in groups:
            if swing is None:
                exo = sample_workspace(mech, cfg.exo_samples, cfg.scheme, cfg.seed)
            else:
                lo, hi = mech.fourbar.input_limits
                n = _per_dof_counts(cfg.exo_samples, 1)[0] if np.isscalar(cfg.exo_samples) else int(cfg.exo_samples[-1])
                bend = grid_configs([[lo, hi]], [n])[:, 0]
                configs = np.column_stack([np.full(n, swing), bend])
                exo = sample_configs(mech, configs, spacing=np.array([0.0, (hi - lo) / (n - 1)]))
            if exo.skipped or len(exo) == 0:
                return None
            reports.append(similarity(exo, target, metric, refine))
        return combine_reports(reports)

    return _run(template, p0, score, cfg, callback)
