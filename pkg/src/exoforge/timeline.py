"""Latency compensation and camera-synchronous episode assembly.

Timestamps are integer nanoseconds on one monotonic clock. Interpolation
works on int64 offsets from the first camera capture time, so shifting
every input by the same amount shifts the output by exactly that amount.
"""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.spatial.transform import Rotation, Slerp

from .errors import MissingLatency, NegativeLatency, ValidationError

CAMERA = "camera"
ENCODER = "encoder"
TACTILE = "tactile"
WRIST = "wrist"
CHANNELS = (CAMERA, ENCODER, TACTILE, WRIST)


@dataclass(frozen=True, eq=False)
class ChannelSeries:
    """One sensor stream: strictly increasing times and a value row per sample.

    For the wrist channel the values are ``x, y, z, qx, qy, qz, qw``.
    Camera rows carry the frame reference (an integer id).
    """

    channel: str
    t: np.ndarray
    values: np.ndarray
    captured: bool = False  # True once latency has been removed

    def __post_init__(self):
        t = np.asarray(self.t, dtype=np.int64).reshape(-1)
        values = np.asarray(self.values)
        if values.ndim == 1:
            values = values.reshape(-1, 1)
        if values.shape[0] != t.size:
            raise ValidationError(self.channel, "timestamp and value counts differ")
        if t.size > 1 and np.any(np.diff(t) <= 0):
            raise ValidationError(self.channel, "timestamps must be strictly increasing")
        object.__setattr__(self, "t", t)
        object.__setattr__(self, "values", values)

    def __len__(self):
        return self.t.size

    def shifted(self, delta_ns: int) -> "ChannelSeries":
        return replace(self, t=self.t + np.int64(delta_ns))


@dataclass(frozen=True)
class LatencyConfig:
    sensor_ns: dict = field(default_factory=dict)
    display_ns: int = 0

    def __post_init__(self):
        if self.display_ns < 0 or any(v < 0 for v in self.sensor_ns.values()):
            raise ValidationError("latency", "latencies must be >= 0")

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        display = int(d.pop("display", 0))
        return cls({k: int(v) for k, v in d.items()}, display)


def correct_capture_times(series, cfg: LatencyConfig):
    """``t_capture = t_receive - l_sensor`` for every channel."""
    out = []
    for s in series:
        if s.channel not in cfg.sensor_ns:
            raise MissingLatency(s.channel)
        out.append(replace(s.shifted(-int(cfg.sensor_ns[s.channel])), captured=True))
    return out


def camera_latency_from_qr(t_receive, t_display, l_display):
    """Camera latency from a rolling-QR record: receive - display - display latency."""
    lat = t_receive - t_display - l_display
    if lat < 0:
        raise NegativeLatency(f"t_receive {t_receive} precedes t_display + l_display")
    return lat


def camera_latency_batch(records):
    """Per-record latencies and their median from ``(t_receive, t_display, l_display)`` rows."""
    values = [camera_latency_from_qr(*r) for r in records]
    return values, float(np.median(values))


def interp_linear(x, xp, fp):
    """Piecewise-linear interpolation, exact at knots and bounded by each bracket.

    ``x`` must lie inside ``[xp[0], xp[-1]]``; ``fp`` may be 2-D (one column
    per scalar).
    """
    x = np.asarray(x)
    xp = np.asarray(xp)
    fp = np.asarray(fp, dtype=float)
    j = np.clip(np.searchsorted(xp, x, side="right") - 1, 0, max(xp.size - 2, 0))
    if xp.size == 1:
        return np.repeat(fp[:1], x.size, axis=0)
    x0, x1 = xp[j], xp[j + 1]
    w = ((x - x0) / (x1 - x0)).astype(float)
    a, b = fp[j], fp[j + 1]
    if fp.ndim == 2:
        w = w[:, None]
    v = a + w * (b - a)
    return np.clip(v, np.minimum(a, b), np.maximum(a, b))


@dataclass(frozen=True, eq=False)
class Episode:
    t_capture: np.ndarray
    image_refs: np.ndarray
    joint_angles: np.ndarray | None = None
    tactile: np.ndarray | None = None
    wrist_pose: np.ndarray | None = None
    fps: float | None = None
    downsample_factor: int = 1
    dropped: int = 0

    def __len__(self):
        return self.t_capture.size

    def select(self, rows) -> "Episode":
        pick = lambda a: None if a is None else a[rows]
        return replace(self, t_capture=self.t_capture[rows], image_refs=self.image_refs[rows],
                       joint_angles=pick(self.joint_angles), tactile=pick(self.tactile),
                       wrist_pose=pick(self.wrist_pose))

    def records(self):
        for i in range(len(self)):
            rec = {"t_capture_ns": int(self.t_capture[i]), "image_ref": int(self.image_refs[i])}
            if self.wrist_pose is not None:
                rec["wrist_pose"] = [float(v) for v in self.wrist_pose[i]]
            if self.joint_angles is not None:
                rec["joint_angles_deg"] = [float(v) for v in self.joint_angles[i]]
            if self.tactile is not None:
                rec["tactile"] = [float(v) for v in self.tactile[i]]
            yield rec

    def summary(self) -> dict:
        return {"frames": len(self), "dropped_frames": self.dropped, "fps": self.fps,
                "downsample_factor": self.downsample_factor}


def _interp_wrist(tq, series: ChannelSeries):
    pos = interp_linear(tq, series.t, series.values[:, :3])
    if len(series) == 1:
        quat = np.repeat(series.values[:1, 3:7], tq.size, axis=0)
        return np.hstack([pos, quat])
    rots = Rotation.from_quat(series.values[:, 3:7])
    quat = Slerp(series.t.astype(float), rots)(tq.astype(float)).as_quat()
    # exact at knots
    k = np.searchsorted(series.t, tq)
    hit = (k < len(series)) & (series.t[np.minimum(k, len(series) - 1)] == tq)
    quat[hit] = rots[k[hit]].as_quat()
    return np.hstack([pos, quat])


def align_to_camera(camera: ChannelSeries, channels, fps: float | None = None) -> Episode:
    """Resample every channel at the camera capture times.

    Camera frames not bracketed by every other channel are dropped (never
    extrapolated) and counted in ``Episode.dropped``.
    """
    channels = {s.channel: s for s in channels}
    origin = camera.t[0] if len(camera) else np.int64(0)
    tc = camera.t - origin
    keep = np.ones(tc.size, dtype=bool)
    for s in channels.values():
        if len(s) == 0:
            keep[:] = False
            continue
        keep &= (camera.t >= s.t[0]) & (camera.t <= s.t[-1])
    tq = tc[keep]
    fields = {}
    for name, s in channels.items():
        ts = s.t - origin
        if name == WRIST:
            fields["wrist_pose"] = _interp_wrist(tq, replace(s, t=ts)) if tq.size else np.empty((0, 7))
        else:
            key = "joint_angles" if name == ENCODER else name
            fields[key] = interp_linear(tq, ts, s.values) if tq.size else np.empty((0, s.values.shape[1]))
    unknown = set(fields) - {"joint_angles", "tactile", "wrist_pose"}
    if unknown:
        raise ValidationError("channels", f"unsupported channels {sorted(unknown)}")
    return Episode(camera.t[keep], camera.values[keep, 0].astype(np.int64), fps=fps,
                   dropped=int(np.count_nonzero(~keep)), **fields)


def downsample(episode: Episode, factor: int) -> Episode:
    """Keep frames 0, factor, 2*factor, ..."""
    factor = int(factor)
    if factor < 1:
        raise ValidationError("factor", "must be >= 1")
    if factor == 1:
        return episode
    out = episode.select(np.arange(0, len(episode), factor))
    fps = None if episode.fps is None else episode.fps / factor
    return replace(out, fps=fps, downsample_factor=episode.downsample_factor * factor)


def estimate_lag_ns(t_a, a, t_b, b, max_lag_ns: int, step_ns: int) -> int:
    """Lag of signal ``b`` relative to ``a`` maximizing their correlation.

    Diagnostic only: both signals are resampled on a common grid and the
    lag search is brute force over ``[-max_lag_ns, max_lag_ns]``.
    """
    t_a = np.asarray(t_a, dtype=np.int64)
    t_b = np.asarray(t_b, dtype=np.int64)
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    lo = max(t_a[0], t_b[0]) + max_lag_ns
    hi = min(t_a[-1], t_b[-1]) - max_lag_ns
    if hi <= lo:
        raise ValidationError("lag", "signals overlap too little for the requested lag range")
    grid = np.arange(lo, hi, step_ns, dtype=np.int64)
    ra = np.interp(grid, t_a, a)
    ra = ra - ra.mean()
    best, best_score = 0, -np.inf
    for lag in range(-max_lag_ns, max_lag_ns + 1, step_ns):
        rb = np.interp(grid + lag, t_b, b)
        rb = rb - rb.mean()
        denom = np.linalg.norm(ra) * np.linalg.norm(rb)
        score = float(ra @ rb / denom) if denom > 0 else -np.inf
        if score > best_score:
            best, best_score = lag, score
    return best


# --- file formats ---------------------------------------------------------------

def read_jsonl(path):
    with open(path) as fh:
        return [json.loads(line) for line in fh if line.strip()]


def series_from_jsonl(path, channel: str) -> ChannelSeries:
    rows = read_jsonl(path)
    t = [r["t_receive_ns"] for r in rows]
    if channel == CAMERA:
        values = [[r.get("frame", i)] for i, r in enumerate(rows)]
        return ChannelSeries(channel, t, np.array(values, dtype=np.int64).reshape(-1, 1))
    if channel == ENCODER:
        values = [r["joint_angles_deg"] for r in rows]
    elif channel == TACTILE:
        values = [r["values"] if "values" in r else r["tactile"] for r in rows]
    else:
        raise ValidationError("channel", f"no JSONL reader for {channel!r}")
    return ChannelSeries(channel, t, np.array(values, dtype=float).reshape(len(rows), -1))


def series_from_wrist_csv(path) -> ChannelSeries:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    t = [int(r["t_receive_ns"]) for r in rows]
    vals = [[float(r[k]) for k in ("x", "y", "z", "qx", "qy", "qz", "qw")] for r in rows]
    return ChannelSeries(WRIST, t, np.array(vals, dtype=float).reshape(-1, 7))
