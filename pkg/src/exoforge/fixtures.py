"""Synthetic inputs for every pipeline stage, deterministic given a seed."""
from __future__ import annotations

import csv
import json
import math
import shutil
from pathlib import Path

import numpy as np
from PIL import Image

from . import calibmap, sensorstream
from .designopt import load_design_template
from .kinemodel import bundled_hand_path, load_hand_model, read_hand_json
from .workspace import FingertipPoseSet, concat_sets, sample_configs, sample_workspace

SWING_MOTOR_VALUES = (0, 200, 400, 600, 800, 1000)
BEND_MOTOR_SAMPLES = 16
SELF_RECOVERY_SAMPLES = 1024


def motor_to_angle(motor, limits, motor_range=(0.0, 1000.0)):
    lo, hi = limits
    m0, m1 = motor_range
    return lo + (np.asarray(motor, dtype=float) - m0) / (m1 - m0) * (hi - lo)


def perturbed_start(p, rng, fraction=1.0):
    """Random in-bounds design; ``fraction`` scales how far from ``p`` it may go."""
    v = p.vector()
    lo = v + fraction * (p.lower - v)
    hi = v + fraction * (p.upper - v)
    return p.with_vector(rng.uniform(lo, hi))


def self_recovery_problem(seed=0, samples=SELF_RECOVERY_SAMPLES):
    """Template, true design, perturbed start and robot workspace for toy2f/index."""
    template, p_true = load_design_template(bundled_hand_path("toy2f"), "index")
    robot = sample_workspace(template.instantiate(p_true), samples)
    p0 = perturbed_start(p_true, np.random.default_rng(seed))
    return template, p_true, p0, robot


def thumb_target(hand="inspire_like", bend_samples=BEND_MOTOR_SAMPLES):
    """Thumb fingertip poses at the six swing settings, bend swept uniformly in motor units."""
    thumb = load_hand_model(bundled_hand_path(hand)).finger("thumb")
    swing = motor_to_angle(SWING_MOTOR_VALUES, thumb.swing.limits)
    bend = motor_to_angle(np.linspace(0, 1000, bend_samples), thumb.fourbar.input_limits)
    sets = []
    for s in swing:
        configs = np.column_stack([np.full(bend.size, s), bend])
        sets.append(sample_configs(thumb, configs))
    return thumb, swing, concat_sets(sets, "thumb_target")


def gen_packets(rng, n, channels=6, adc_bits=12):
    """Random packets with realistic ADC ranges (supply near full scale)."""
    full = (1 << adc_bits) - 1
    out = []
    for _ in range(n):
        supply = int(rng.integers(int(0.9 * full), full + 1))
        ch = tuple(int(v) for v in rng.integers(0, supply + 1, size=channels))
        out.append(sensorstream.EncoderPacket(ch, supply))
    return out


def garbage(rng, n):
    """Line noise that never contains the 0xAA sync byte."""
    b = rng.integers(0, 255, size=n, dtype=np.int64)
    b[b >= 0xAA] += 1
    return bytes(b.astype(np.uint8).tolist())


def mangle_stream(rng, packets, corrupt_prob=0.1, garbage_prob=0.3, max_garbage=24, truncate_tail=True):
    """Build a noisy byte stream from packets.

    Returns ``(stream, expected)`` where ``expected`` lists the packets left
    intact. Corruption flips one channel or supply byte; the final packet
    may be cut short, as at the end of a log.
    """
    parts, expected = [], []
    if rng.random() < 0.5:
        parts.append(garbage(rng, int(rng.integers(1, max_garbage + 1))))
    for i, p in enumerate(packets):
        raw = bytearray(p.encode())
        last = i == len(packets) - 1
        if truncate_tail and last and rng.random() < 0.3:
            parts.append(bytes(raw[:int(rng.integers(1, len(raw)))]))
            continue
        if rng.random() < corrupt_prob:
            pos = int(rng.integers(3, len(raw) - 1))
            raw[pos] ^= int(rng.integers(1, 256))
        else:
            expected.append(p)
        parts.append(bytes(raw))
        if rng.random() < garbage_prob:
            parts.append(garbage(rng, int(rng.integers(1, max_garbage + 1))))
    return b"".join(parts), expected


def random_chunks(rng, data: bytes):
    i = 0
    while i < len(data):
        n = int(rng.integers(1, 64))
        yield data[i:i + n]
        i += n


def _write_jsonl(path, rows):
    with open(path, "w") as fh:
        for r in rows:
            fh.write(json.dumps(r, sort_keys=True) + "\n")


def write_fixtures(out, seed=0):
    """Write a complete offline fixture tree under ``out``; returns the paths."""
    out = Path(out)
    rng = np.random.default_rng(seed)
    paths = {}

    # design optimization: template with a perturbed start, robot workspace at the true design
    d = out / "design"
    d.mkdir(parents=True, exist_ok=True)
    template, p_true, p0, robot = self_recovery_problem(seed)
    hand = read_hand_json(bundled_hand_path("toy2f"))
    for f in hand["fingers"]:
        if f["name"] == "index":
            f["design"]["values"] = [float(v) for v in p0.vector()]
    (d / "toy2f_start.hand").write_text(json.dumps(hand, indent=2) + "\n")
    robot.to_csv(d / "robot_ws.csv")
    (d / "opt.json").write_text(json.dumps({
        "population": 32, "generations": 200, "seed": seed,
        "exo_samples": SELF_RECOVERY_SAMPLES, "lam": 10.0}, indent=2) + "\n")
    paths.update(template=d / "toy2f_start.hand", robot_ws=d / "robot_ws.csv", opt_config=d / "opt.json")

    # thumb linkage fit target
    f = out / "fit"
    f.mkdir(exist_ok=True)
    shutil.copy(bundled_hand_path("inspire_like"), f / "inspire_like.hand")
    _, swing, target = thumb_target()
    target.to_csv(f / "thumb_target.csv")
    (f / "swing_values_deg.json").write_text(json.dumps([math.degrees(s) for s in swing]) + "\n")
    # exo sampling matched to the target's bend samples per swing
    (f / "fit.json").write_text(json.dumps({
        "population": 32, "generations": 60, "seed": seed, "exo_samples": BEND_MOTOR_SAMPLES}, indent=2) + "\n")
    paths.update(fit_hand=f / "inspire_like.hand", fit_target=f / "thumb_target.csv",
                 fit_config=f / "fit.json", swing_values=f / "swing_values_deg.json")

    # calibration pairs with a hysteresis loop
    c = out / "calib"
    c.mkdir(exist_ok=True)
    motors = np.linspace(0, 1000, 16)
    with open(c / "pairs.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["joint", "encoder_angle_rad", "motor_value", "direction"])
        for joint, gain in (("index", 1.0), ("thumb_bend", 0.8)):
            base = gain * (0.2 + 1.2 * motors / 1000 + 0.15 * np.sin(motors / 1000 * math.pi))
            for direction, offset in (("closing", -0.02), ("opening", 0.02)):
                angles = base + offset + rng.normal(0, 0.002, motors.size)
                for a, m in zip(angles, motors):
                    w.writerow([joint, repr(float(a)), repr(float(m)), direction])
    paths["calib_pairs"] = c / "pairs.csv"

    # encoder byte stream and ground truth
    s = out / "stream"
    s.mkdir(exist_ok=True)
    packets = gen_packets(rng, 200)
    stream, expected = mangle_stream(rng, packets, truncate_tail=False)
    (s / "encoder.bin").write_bytes(stream)
    _write_jsonl(s / "truth.jsonl", sensorstream.packets_to_records(expected, 0, 22_222_222))
    paths.update(stream=s / "encoder.bin", stream_truth=s / "truth.jsonl")

    # timeline logs: camera at 45 Hz, encoder at 90 Hz, tactile at 45 Hz
    t = out / "timeline"
    t.mkdir(exist_ok=True)
    lat = {"camera": 30_000_000, "encoder": 5_000_000, "tactile": 8_000_000, "wrist": 40_000_000, "display": 16_000_000}
    (t / "latency.json").write_text(json.dumps(lat, indent=2) + "\n")
    cam_t = 1_000_000_000 + np.arange(90) * 22_222_222
    _write_jsonl(t / "camera.jsonl", ({"t_receive_ns": int(v), "frame": i} for i, v in enumerate(cam_t)))
    enc_t = 900_000_000 + np.arange(200) * 11_111_111
    _write_jsonl(t / "encoder.jsonl", ({"t_receive_ns": int(v),
                                        "joint_angles_deg": [30 + 20 * math.sin(i / 20), 45 + 10 * math.cos(i / 15)]}
                                       for i, v in enumerate(enc_t)))
    tac_t = 950_000_000 + np.arange(100) * 22_222_222
    _write_jsonl(t / "tactile.jsonl", ({"t_receive_ns": int(v), "values": [abs(math.sin(i / 9)), 0.1 * i]}
                                       for i, v in enumerate(tac_t)))
    wr_t = 900_000_000 + np.arange(120) * 16_666_667
    with open(t / "wrist.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["t_receive_ns", "x", "y", "z", "qx", "qy", "qz", "qw"])
        for i, v in enumerate(wr_t):
            ang = 0.01 * i
            w.writerow([int(v), 0.5 * i, 0.0, 100.0, 0.0, 0.0, math.sin(ang / 2), math.cos(ang / 2)])
    paths.update(latency=t / "latency.json", camera=t / "camera.jsonl", encoder=t / "encoder.jsonl",
                 tactile=t / "tactile.jsonl", wrist=t / "wrist.csv")

    # compositing frames
    m = out / "masks"
    for layer in ("bg", "robot", "exo_mask", "robot_mask"):
        (m / layer).mkdir(parents=True, exist_ok=True)
    for i in range(3):
        h, wdt = 24, 32
        Image.fromarray(rng.integers(0, 256, (h, wdt, 3), dtype=np.uint8)).save(m / "bg" / f"{i:06d}.png")
        Image.fromarray(rng.integers(0, 256, (h, wdt, 3), dtype=np.uint8)).save(m / "robot" / f"{i:06d}.png")
        Image.fromarray(rng.integers(0, 256, (h, wdt), dtype=np.uint8)).save(m / "exo_mask" / f"{i:06d}.png")
        Image.fromarray(rng.integers(0, 256, (h, wdt), dtype=np.uint8)).save(m / "robot_mask" / f"{i:06d}.png")
    paths["masks"] = m

    # action log for the 12-DoF hand
    a = out / "actions"
    a.mkdir(exist_ok=True)
    steps = []
    for k in range(4):
        actions = np.hstack([rng.normal(0, 1, (16, 3)), rng.normal(0, 0.01, (16, 3)), rng.normal(5, 2, (16, 12))])
        reads = (500 + 10 * k - rng.uniform(0, 5, (8, 12))).tolist()
        steps.append({"actions": actions.tolist(), "hand_mode": "relative", "hardware_reads": reads})
    _write_jsonl(a / "actions.jsonl", steps)
    paths["actions"] = a / "actions.jsonl"
    return paths
