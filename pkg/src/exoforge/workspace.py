"""Fingertip workspaces and the bidirectional workspace-similarity objective.

A workspace is a cloud of sampled fingertip poses. Two clouds are compared
with a sum of squared nearest-pose distances in both directions: every
robot sample looks for its closest exoskeleton pose (coverage) and every
exoskeleton sample looks for its closest robot pose (subset). The
similarity is the negated total, so larger is better and 0 is a perfect
match.

The pose distance is ``|dp|^2 + lam^2 |dd|^2``. That is the squared
Euclidean distance between 6-vectors ``(p, lam * d)``, so an ordinary k-d
tree over that embedding gives exact nearest neighbours.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.spatial import cKDTree
from scipy.stats import qmc

from .errors import EmptyWorkspace, ValidationError
from .kinemodel import FingerMechanism, Pose, Transform, fk_batch

NN_CANDIDATES = 8
WORST_COUNT = 10


@dataclass(frozen=True)
class PoseMetricParams:
    lam: float = 10.0  # mm per unit of direction difference

    def __post_init__(self):
        if not (self.lam >= 0 and math.isfinite(self.lam)):
            raise ValidationError("lam", "direction weight must be finite and >= 0")


@dataclass(frozen=True)
class RefineParams:
    """Local coordinate-descent polish of nearest-neighbour matches.

    ``iterations`` = 0 disables refinement. ``initial_step`` is in radians
    per DoF; None means half the source set's sampling spacing.
    """

    iterations: int = 0
    candidates: int = NN_CANDIDATES
    initial_step: float | None = None

    def __post_init__(self):
        if self.iterations < 0 or self.candidates < 1:
            raise ValidationError("refine", "iterations >= 0 and candidates >= 1 required")


def pose_distance_sq(p1: Pose, p2: Pose, m: PoseMetricParams = PoseMetricParams()) -> float:
    dp = p1.position - p2.position
    dd = p1.direction - p2.direction
    return float(dp @ dp + m.lam * m.lam * (dd @ dd))


def _pairwise_sq(pos_a, dir_a, pos_b, dir_b, lam):
    dp = pos_a - pos_b
    dd = dir_a - dir_b
    return np.einsum("...i,...i->...", dp, dp) + lam * lam * np.einsum("...i,...i->...", dd, dd)


class PoseIndex:
    """Exact nearest-pose lookup; ties resolve to the lowest sample index."""

    def __init__(self, positions, directions, lam: float, workers: int = 1):
        self.positions = np.asarray(positions, dtype=float)
        self.directions = np.asarray(directions, dtype=float)
        self.lam = float(lam)
        self.workers = workers
        self._tree = cKDTree(np.hstack([self.positions, self.lam * self.directions]))

    def __len__(self):
        return self.positions.shape[0]

    def query(self, positions, directions, k: int = 1):
        """Return ``(dist_sq, index)``, each shaped ``(Q, k)``, sorted ascending."""
        positions = np.atleast_2d(positions)
        directions = np.atleast_2d(directions)
        n = len(self)
        k = min(k, n)
        kc = min(n, max(k, NN_CANDIDATES))
        _, idx = self._tree.query(np.hstack([positions, self.lam * directions]), k=kc, workers=self.workers)
        idx = idx.reshape(positions.shape[0], kc)
        d2 = _pairwise_sq(positions[:, None, :], directions[:, None, :],
                          self.positions[idx], self.directions[idx], self.lam)
        order = np.lexsort((idx, d2), axis=1)[:, :k]
        return np.take_along_axis(d2, order, 1), np.take_along_axis(idx, order, 1)


class FingertipPoseSet:
    """Sampled fingertip poses with the configurations that produced them.

    ``mechanism`` (optional) enables continuous refinement during
    similarity evaluation. ``spacing`` is the per-DoF sampling step used to
    seed that refinement.
    """

    def __init__(self, configs, positions, directions, source="", skipped=0,
                 mechanism: FingerMechanism | None = None, spacing=None):
        self.configs = np.atleast_2d(np.asarray(configs, dtype=float))
        self.positions = np.asarray(positions, dtype=float).reshape(-1, 3)
        self.directions = np.asarray(directions, dtype=float).reshape(-1, 3)
        if not (self.configs.shape[0] == self.positions.shape[0] == self.directions.shape[0]):
            raise ValidationError("samples", "configs, positions and directions differ in length")
        self.source = source
        self.skipped = int(skipped)
        self.mechanism = mechanism
        self.spacing = None if spacing is None else np.asarray(spacing, dtype=float)
        self._indexes = {}

    def __len__(self):
        return self.positions.shape[0]

    def pose(self, i) -> Pose:
        return Pose(self.positions[i], self.directions[i])

    def index(self, lam: float, workers: int = 1) -> PoseIndex:
        key = float(lam)
        if key not in self._indexes:
            self._indexes[key] = PoseIndex(self.positions, self.directions, key, workers)
        return self._indexes[key]

    def subset(self, rows) -> "FingertipPoseSet":
        rows = np.asarray(rows)
        return FingertipPoseSet(self.configs[rows], self.positions[rows], self.directions[rows],
                                self.source, 0, self.mechanism, self.spacing)

    def transformed(self, t: Transform) -> "FingertipPoseSet":
        mech = self.mechanism.rebased(t) if self.mechanism is not None else None
        return FingertipPoseSet(self.configs, t.apply_point(self.positions), t.apply_vector(self.directions),
                                self.source, self.skipped, mech, self.spacing)

    def to_csv(self, path) -> None:
        dof = self.configs.shape[1]
        header = [f"q{i}" for i in range(dof)] + ["px", "py", "pz", "dx", "dy", "dz"]
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(header)
            for row in np.hstack([self.configs, self.positions, self.directions]):
                w.writerow([repr(float(v)) for v in row])

    @classmethod
    def from_csv(cls, path, source=None, mechanism=None) -> "FingertipPoseSet":
        with open(path, newline="") as fh:
            rows = list(csv.reader(fh))
        if not rows:
            raise EmptyWorkspace(f"{path}: no header")
        header = rows[0]
        if header[-6:] != ["px", "py", "pz", "dx", "dy", "dz"]:
            raise ValidationError("header", f"{path}: expected trailing columns px,py,pz,dx,dy,dz")
        data = np.array([[float(v) for v in r] for r in rows[1:] if r], dtype=float)
        if data.size == 0:
            raise EmptyWorkspace(f"{path}: no samples")
        dof = len(header) - 6
        directions = data[:, dof + 3:].copy()
        # mocap-derived rows may be slightly off unit length; exported rows pass through untouched
        norm = np.linalg.norm(directions, axis=1)
        off = np.abs(norm - 1.0) > 1e-12
        directions[off] /= norm[off, None]
        return cls(data[:, :dof], data[:, dof:dof + 3], directions,
                   source or Path(path).stem, 0, mechanism)


def concat_sets(sets, source="") -> FingertipPoseSet:
    sets = list(sets)
    return FingertipPoseSet(np.vstack([s.configs for s in sets]),
                            np.vstack([s.positions for s in sets]),
                            np.vstack([s.directions for s in sets]),
                            source, sum(s.skipped for s in sets),
                            sets[0].mechanism, sets[0].spacing)


def grid_configs(limits, counts) -> np.ndarray:
    """Full tensor grid over the joint box, endpoints included."""
    limits = np.asarray(limits, dtype=float)
    axes = [np.linspace(lo, hi, int(n)) for (lo, hi), n in zip(limits, counts)]
    mesh = np.meshgrid(*axes, indexing="ij")
    return np.stack([m.reshape(-1) for m in mesh], axis=1)


def _per_dof_counts(counts, dof):
    if np.isscalar(counts):
        n = int(counts)
        per = max(2, int(round(n ** (1.0 / dof))))
        return [per] * dof
    counts = [int(c) for c in counts]
    if len(counts) != dof:
        raise ValidationError("counts", f"need {dof} per-DoF counts, got {len(counts)}")
    return counts


def sample_configs(mech: FingerMechanism, configs, source=None, spacing=None) -> FingertipPoseSet:
    """Evaluate FK on given configurations, skipping (and counting) loop failures."""
    configs = np.atleast_2d(np.asarray(configs, dtype=float))
    pos, direction, ok = fk_batch(mech, configs)
    return FingertipPoseSet(configs[ok], pos[ok], direction[ok],
                            source if source is not None else mech.name,
                            int(np.count_nonzero(~ok)), mech, spacing)


def sample_workspace(mech: FingerMechanism, counts, scheme: str = "grid", seed: int = 0) -> FingertipPoseSet:
    """Sample a mechanism's fingertip workspace.

    ``counts`` is either one total sample count or a per-DoF list. The grid
    scheme includes both ends of every joint range; the low-discrepancy
    scheme draws a scrambled Halton sequence seeded by ``seed``.
    """
    limits = mech.limits
    dof = limits.shape[0]
    if not np.all(np.isfinite(limits)):
        raise ValidationError("limits", "joint limits must be finite to sample")
    if scheme == "grid":
        per = _per_dof_counts(counts, dof)
        if min(per) < 2:
            raise ValidationError("counts", "grid needs at least 2 samples per DoF")
        configs = grid_configs(limits, per)
        spacing = (limits[:, 1] - limits[:, 0]) / (np.array(per) - 1)
    elif scheme in ("low-discrepancy", "halton"):
        total = int(counts) if np.isscalar(counts) else int(np.prod(counts))
        if total < 2:
            raise ValidationError("counts", "need at least 2 samples")
        unit = qmc.Halton(d=dof, scramble=True, seed=seed).random(total)
        configs = limits[:, 0] + unit * (limits[:, 1] - limits[:, 0])
        spacing = (limits[:, 1] - limits[:, 0]) / total ** (1.0 / dof)
    else:
        raise ValidationError("scheme", f"unknown sampling scheme {scheme!r}")
    return sample_configs(mech, configs, spacing=spacing)


@dataclass
class SimilarityReport:
    coverage_term: float
    subset_term: float
    S: float
    K: int  # robot samples
    N: int  # exoskeleton samples
    worst: list = field(default_factory=list)
    exo_skipped: int = 0
    robot_skipped: int = 0

    @property
    def coverage_per_sample(self) -> float:
        return self.coverage_term / self.K

    @property
    def subset_per_sample(self) -> float:
        return self.subset_term / self.N

    def to_dict(self) -> dict:
        return {
            "coverage_term": self.coverage_term, "subset_term": self.subset_term, "S": self.S,
            "K": self.K, "N": self.N,
            "coverage_per_sample": self.coverage_per_sample,
            "subset_per_sample": self.subset_per_sample,
            "exo_skipped": self.exo_skipped, "robot_skipped": self.robot_skipped,
            "worst": self.worst,
        }


def combine_reports(reports) -> SimilarityReport:
    reports = list(reports)
    cov = float(sum(r.coverage_term for r in reports))
    sub = float(sum(r.subset_term for r in reports))
    worst = sorted((w for r in reports for w in r.worst), key=lambda w: -w["dist_sq"])[:WORST_COUNT]
    return SimilarityReport(cov, sub, -(cov + sub), sum(r.K for r in reports), sum(r.N for r in reports),
                            worst, sum(r.exo_skipped for r in reports), sum(r.robot_skipped for r in reports))


def _refine(pool: FingertipPoseSet, seeds, target_pos, target_dir, start_d2, lam, params: RefineParams):
    """Coordinate descent over ``pool.mechanism`` configs toward each target pose."""
    mech = pool.mechanism
    limits = mech.limits
    lo, hi = limits[:, 0], limits[:, 1]
    theta = seeds.copy()
    best = start_d2.copy()
    dof = theta.shape[1]
    if params.initial_step is not None:
        step0 = np.full(dof, float(params.initial_step))
    elif pool.spacing is not None:
        step0 = 0.5 * pool.spacing
    else:
        step0 = 0.5 * (hi - lo) / max(len(pool), 2) ** (1.0 / dof)
    step = np.tile(step0, (theta.shape[0], 1))
    for _ in range(params.iterations):
        for j in range(dof):
            moved = np.zeros(theta.shape[0], dtype=bool)
            for sign in (1.0, -1.0):
                trial = theta.copy()
                trial[:, j] = np.clip(theta[:, j] + sign * step[:, j], lo[j], hi[j])
                pos, direction, ok = fk_batch(mech, trial, check_limits=False)
                d2 = _pairwise_sq(pos, direction, target_pos, target_dir, lam)
                better = ok & (d2 < best)
                theta[better] = trial[better]
                best[better] = d2[better]
                moved |= better
            step[~moved, j] *= 0.5
    return best


def _directed_min(queries: FingertipPoseSet, pool: FingertipPoseSet, lam, refine: RefineParams, workers):
    """Per-query minimum squared distance to ``pool`` plus matched pool index."""
    k = refine.candidates if (refine.iterations > 0 and pool.mechanism is not None) else 1
    d2, idx = pool.index(lam, workers).query(queries.positions, queries.directions, k=k)
    nearest_d2 = d2[:, 0].copy()
    nearest_idx = idx[:, 0].copy()
    if k == 1 and not (refine.iterations > 0 and pool.mechanism is not None):
        return nearest_d2, nearest_idx
    kk = d2.shape[1]
    q = queries.positions.shape[0]
    seeds = pool.configs[idx.reshape(-1)]
    tpos = np.repeat(queries.positions, kk, axis=0)
    tdir = np.repeat(queries.directions, kk, axis=0)
    refined = _refine(pool, seeds, tpos, tdir, d2.reshape(-1), lam, refine).reshape(q, kk)
    return np.minimum(refined.min(axis=1), nearest_d2), nearest_idx


def similarity(exo: FingertipPoseSet, robot: FingertipPoseSet,
               m: PoseMetricParams = PoseMetricParams(), refine: RefineParams = RefineParams(),
               workers: int = 1) -> SimilarityReport:
    """Bidirectional workspace similarity ``S = -(coverage + subset)`` in mm^2."""
    if len(exo) == 0 or len(robot) == 0:
        raise EmptyWorkspace(f"empty workspace (exo={len(exo)}, robot={len(robot)})")
    cov_d2, cov_idx = _directed_min(robot, exo, m.lam, refine, workers)
    sub_d2, sub_idx = _directed_min(exo, robot, m.lam, refine, workers)
    coverage = float(np.sum(cov_d2))
    subset = float(np.sum(sub_d2))
    worst = [{"term": "coverage", "sample": int(i), "match": int(cov_idx[i]), "dist_sq": float(cov_d2[i])}
             for i in range(len(robot))]
    worst += [{"term": "subset", "sample": int(i), "match": int(sub_idx[i]), "dist_sq": float(sub_d2[i])}
              for i in range(len(exo))]
    worst.sort(key=lambda w: (-w["dist_sq"], w["term"], w["sample"]))
    return SimilarityReport(coverage, subset, -(coverage + subset), len(robot), len(exo),
                            worst[:WORST_COUNT], exo.skipped, robot.skipped)


@dataclass
class LinkageFit:
    mechanism: FingerMechanism
    params: object
    report: SimilarityReport
    history: list

    @property
    def linkage(self):
        return self.mechanism.fourbar

    @property
    def residual(self) -> float:
        return -self.report.S


def group_by_swing(target: FingertipPoseSet, swing_values, tol=1e-9):
    """Split a thumb target set by its swing angle (config column 0)."""
    groups = []
    assigned = np.zeros(len(target), dtype=bool)
    for s in swing_values:
        rows = np.flatnonzero(np.abs(target.configs[:, 0] - s) <= tol)
        if rows.size == 0:
            raise ValidationError("swing_values", f"no target samples at swing {s!r} rad")
        assigned[rows] = True
        groups.append((float(s), target.subset(rows)))
    if not assigned.all():
        raise ValidationError("swing_values", f"{np.count_nonzero(~assigned)} target samples match no swing value")
    return groups


def fit_equivalent_linkage(target: FingertipPoseSet, template, p0, cfg=None, swing_values=None,
                           metric: PoseMetricParams = PoseMetricParams()) -> LinkageFit:
    """Fit four-bar geometry so its fingertip workspace matches ``target``.

    For a two-DoF thumb template (swing + four-bar) pass ``swing_values``
    (radians); the loss is summed over all swing settings with one shared
    linkage geometry.
    """
    from . import designopt

    if len(target) == 0:
        raise EmptyWorkspace("empty target set")
    if template.mechanism.fourbar is None:
        raise ValidationError("template", "linkage fitting needs a four-bar template")
    cfg = cfg or designopt.OptimizerConfig()
    if swing_values is None:
        groups = [(None, target)]
    else:
        if template.mechanism.swing is None:
            raise ValidationError("template", "swing_values given but template has no swing joint")
        groups = group_by_swing(target, swing_values)
    result = designopt.optimize_grouped(template, p0, groups, cfg, metric)
    mech = template.instantiate(result.params)
    return LinkageFit(mech, result.params, result.report, result.history)
