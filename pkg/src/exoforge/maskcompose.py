"""Occlusion-aware compositing of robot-hand pixels over inpainted frames.

A pixel takes the robot image value only where both the exoskeleton mask
and the robot mask are set; everywhere else the inpainted background is
kept untouched. Masks are binarized at 128. No feathering.
"""
from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import DimensionMismatch

THRESHOLD = 128
FRAME_PATTERN = "{:06d}.png"
LAYERS = ("bg", "robot", "exo_mask", "robot_mask")


def binarize(mask) -> np.ndarray:
    m = np.asarray(mask)
    if m.ndim == 3:
        m = m[..., 0]
    return m >= THRESHOLD


def visible_mask(exo_mask, robot_mask) -> np.ndarray:
    """Binarized intersection as an 8-bit mask (0 or 255)."""
    exo = binarize(exo_mask)
    robot = binarize(robot_mask)
    if exo.shape != robot.shape:
        raise DimensionMismatch(f"mask shapes differ: {exo.shape} vs {robot.shape}")
    return np.where(exo & robot, 255, 0).astype(np.uint8)


@dataclass(frozen=True, eq=False)
class ComposeInputs:
    background: np.ndarray
    robot_img: np.ndarray
    exo_mask: np.ndarray
    robot_mask: np.ndarray

    def __post_init__(self):
        hw = {np.asarray(a).shape[:2] for a in (self.background, self.robot_img, self.exo_mask, self.robot_mask)}
        if len(hw) != 1:
            raise DimensionMismatch(f"inputs disagree on size: {sorted(hw)}")
        if np.asarray(self.background).shape != np.asarray(self.robot_img).shape:
            raise DimensionMismatch("background and robot image differ in shape")


def compose(inputs: ComposeInputs) -> np.ndarray:
    vis = visible_mask(inputs.exo_mask, inputs.robot_mask).astype(bool)
    bg = np.asarray(inputs.background)
    if bg.ndim == 3:
        vis = vis[..., None]
    return np.where(vis, np.asarray(inputs.robot_img), bg)


def _load(path, mask=False):
    with Image.open(path) as im:
        return np.array(im.convert("L") if mask else im.convert("RGB"))


def frame_paths(dirs: dict, index: int) -> dict:
    return {k: Path(dirs[k]) / FRAME_PATTERN.format(index) for k in LAYERS}


@dataclass
class ComposeReport:
    written: list = field(default_factory=list)
    missing: list = field(default_factory=list)  # (frame, layer)
    mismatched: list = field(default_factory=list)  # (frame, message)

    def to_dict(self):
        return {"written": self.written, "missing": [list(m) for m in self.missing],
                "mismatched": [list(m) for m in self.mismatched]}


def discover_frames(dirs: dict) -> list:
    """Frame indices present in any of the layer directories."""
    found = set()
    for k in LAYERS:
        for p in Path(dirs[k]).glob("*.png"):
            if p.stem.isdigit():
                found.add(int(p.stem))
    return sorted(found)


def compose_episode(dirs: dict, out_dir, frames=None, workers: int = 1) -> ComposeReport:
    """Compose every frame whose four layers exist; collect per-frame problems.

    ``dirs`` maps ``bg``, ``robot``, ``exo_mask`` and ``robot_mask`` to
    directories of ``%06d.png`` files.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    frames = discover_frames(dirs) if frames is None else list(frames)
    report = ComposeReport()

    def work(i):
        paths = frame_paths(dirs, i)
        missing = [k for k, p in paths.items() if not p.exists()]
        if missing:
            return i, "missing", missing
        try:
            inputs = ComposeInputs(_load(paths["bg"]), _load(paths["robot"]),
                                   _load(paths["exo_mask"], True), _load(paths["robot_mask"], True))
        except DimensionMismatch as exc:
            return i, "mismatch", str(exc)
        Image.fromarray(compose(inputs)).save(out_dir / FRAME_PATTERN.format(i))
        return i, "ok", None

    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            results = list(pool.map(work, frames))
    else:
        results = [work(i) for i in frames]
    for i, status, info in results:
        if status == "ok":
            report.written.append(i)
        elif status == "missing":
            report.missing.extend((i, k) for k in info)
        else:
            report.mismatched.append((i, info))
    return report
