"""``exoforge`` command-line entry point."""
from __future__ import annotations

import argparse
import csv
import hashlib
import json
import math
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__, actionexec, calibmap, designopt, fixtures, maskcompose, sensorstream, timeline
from .errors import ExoforgeError
from .kinemodel import finger_to_dict, resolve_hand_path
from .workspace import FingertipPoseSet, fit_equivalent_linkage


def _digest(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def write_manifest(target, command, args, inputs, started):
    """Write ``<target>.manifest.json`` (or ``<dir>/manifest.json``)."""
    target = Path(target)
    path = target / "manifest.json" if target.is_dir() else target.with_name(target.name + ".manifest.json")
    config = {k: (str(v) if isinstance(v, Path) else v) for k, v in sorted(vars(args).items()) if k != "func"}
    manifest = {
        "command": command,
        "config_hash": hashlib.sha256(json.dumps(config, sort_keys=True, default=str).encode()).hexdigest(),
        "seed": getattr(args, "seed", None),
        "inputs": {str(p): _digest(p) for p in inputs if p and Path(p).is_file()},
        "tool_version": __version__,
        "wall_time_s": round(time.monotonic() - started, 3),
    }
    path.write_text(json.dumps(manifest, indent=2) + "\n")
    return path


def _write_json(path, obj):
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True, allow_nan=True) + "\n")


def _write_jsonl(path, rows):
    with open(path, "w") as fh:
        for r in rows:
            fh.write(json.dumps(r, sort_keys=True) + "\n")


def _write_history(path, history):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["generation", "best_S", "coverage", "subset"])
        for row in history:
            w.writerow([row[0]] + [repr(float(v)) for v in row[1:]])


def _optimizer_config(args):
    data = json.loads(Path(args.config).read_text()) if args.config else {}
    if args.seed is not None:
        data["seed"] = args.seed
    if args.threads:
        data["workers"] = args.threads
    for key in ("exo_samples", "robot_samples"):
        if isinstance(data.get(key), list):
            data[key] = tuple(data[key])
    return designopt.OptimizerConfig.from_dict(data)


def cmd_optimize(args):
    started = time.monotonic()
    cfg = _optimizer_config(args)
    template, p0 = designopt.load_design_template(resolve_hand_path(args.template), args.finger)
    robot = FingertipPoseSet.from_csv(args.robot_ws)
    result = designopt.optimize_design(template, p0, robot, cfg)
    mech = template.instantiate(result.params)
    adj = designopt.AdjustmentSpec(args.tip_extension, args.limit_tightening)
    _write_json(args.out, {
        "finger": mech.name,
        "params": result.params.to_dict(),
        "report": result.report.to_dict(),
        "mechanism": finger_to_dict(mech),
        "adjustments": {"tip_extension_mm": adj.tip_extension, "limit_tightening_deg": adj.limit_tightening},
        "adjusted_mechanism": finger_to_dict(designopt.apply_adjustments(mech, adj)),
        "generations_run": len(result.history) - 1,
    })
    if args.history:
        _write_history(args.history, result.history)
    write_manifest(args.out, "optimize", args, [args.template, args.robot_ws, args.config], started)


def cmd_fit_linkage(args):
    started = time.monotonic()
    cfg = _optimizer_config(args)
    template, p0 = designopt.load_design_template(resolve_hand_path(args.template), args.finger)
    target = FingertipPoseSet.from_csv(args.target)
    swing_deg = args.swing_values_deg
    if args.swing_file:
        swing_deg = json.loads(Path(args.swing_file).read_text())
    swing = [math.radians(v) for v in swing_deg] if swing_deg else None
    fit = fit_equivalent_linkage(target, template, p0, cfg, swing, cfg.metric)
    _write_json(args.out, {
        "finger": fit.mechanism.name,
        "params": fit.params.to_dict(),
        "report": fit.report.to_dict(),
        "mechanism": finger_to_dict(fit.mechanism),
        "residual": fit.residual,
    })
    if args.history:
        _write_history(args.history, fit.history)
    write_manifest(args.out, "fit-linkage", args, [args.template, args.target, args.config, args.swing_file],
                   started)


def cmd_calibrate(args):
    started = time.monotonic()
    groups = calibmap.read_calibration_csv(args.pairs)
    tables = [calibmap.fit_calibration(pairs, args.kind, args.degree, args.knots, joint, tuple(args.motor_range))
              for joint, pairs in sorted(groups.items())]
    calibmap.write_tables(tables, args.out)
    write_manifest(args.out, "calibrate", args, [args.pairs], started)


def cmd_gen_stream(args):
    started = time.monotonic()
    rng = np.random.default_rng(args.seed)
    packets = fixtures.gen_packets(rng, args.packets, args.channels)
    if args.clean:
        stream, expected = b"".join(p.encode() for p in packets), packets
    else:
        stream, expected = fixtures.mangle_stream(rng, packets, truncate_tail=False)
    Path(args.out).write_bytes(stream)
    if args.truth:
        period = int(round(1e9 / args.rate_hz))
        _write_jsonl(args.truth, sensorstream.packets_to_records(expected, args.t0_ns, period))
    write_manifest(args.out, "gen-stream", args, [], started)


def cmd_decode(args):
    started = time.monotonic()
    data = Path(args.stream).read_bytes()
    dec = sensorstream.StreamDecoder()
    packets = []
    step = args.chunk_size or len(data) or 1
    for i in range(0, len(data), step):
        packets.extend(dec.feed(data[i:i + step]))
    dec.finish()
    period = int(round(1e9 / args.rate_hz))
    _write_jsonl(args.out, sensorstream.packets_to_records(packets, args.t0_ns, period))
    _write_json(str(args.out) + ".diagnostics.json", {"packets": len(packets), **dec.diagnostics.to_dict()})
    write_manifest(args.out, "decode", args, [args.stream], started)


def cmd_align(args):
    started = time.monotonic()
    lat = timeline.LatencyConfig.from_dict(json.loads(Path(args.latency).read_text()))
    camera = timeline.series_from_jsonl(args.camera, timeline.CAMERA)
    series = [timeline.series_from_jsonl(args.encoder, timeline.ENCODER)]
    if args.tactile:
        series.append(timeline.series_from_jsonl(args.tactile, timeline.TACTILE))
    if args.wrist:
        series.append(timeline.series_from_wrist_csv(args.wrist))
    camera, *series = timeline.correct_capture_times([camera] + series, lat)
    episode = timeline.align_to_camera(camera, series, fps=args.fps)
    episode = timeline.downsample(episode, args.downsample)
    _write_jsonl(args.out, episode.records())
    _write_json(str(args.out) + ".summary.json", episode.summary())
    write_manifest(args.out, "align", args,
                   [args.latency, args.camera, args.encoder, args.tactile, args.wrist], started)


def cmd_compose(args):
    started = time.monotonic()
    dirs = {"bg": args.bg, "robot": args.robot, "exo_mask": args.exo_mask, "robot_mask": args.robot_mask}
    frames = None
    if args.frames:
        a, b = (int(v) for v in args.frames.split(":"))
        frames = range(a, b)
    report = maskcompose.compose_episode(dirs, args.out, frames, designopt.thread_count(args.threads))
    _write_json(Path(args.out) / "report.json", report.to_dict())
    write_manifest(args.out, "compose", args, [], started)


def cmd_exec_sim(args):
    started = time.monotonic()
    profile = actionexec.HAND_PROFILES[args.hand]
    policy = actionexec.HorizonPolicy(hand_rate_hz=profile.command_rate_hz)
    steps = timeline.read_jsonl(args.actions)
    log = actionexec.replay(steps, profile, args.mode, policy, init_hand=args.init_hand)
    wrist, wt = actionexec.interpolate_commands(np.array(log.wrist), policy.policy_rate_hz, policy.arm_rate_hz)
    hand, ht = actionexec.interpolate_commands(np.array(log.hand), policy.policy_rate_hz, policy.hand_rate_hz)
    rows = [{"device": "arm", "t_s": float(t), "command": [float(v) for v in c]} for t, c in zip(wt, wrist)]
    rows += [{"device": "hand", "t_s": float(t), "command": [float(v) for v in c]} for t, c in zip(ht, hand)]
    _write_jsonl(args.out, rows)
    write_manifest(args.out, "exec-sim", args, [args.actions], started)


def cmd_gen_fixtures(args):
    started = time.monotonic()
    paths = fixtures.write_fixtures(args.out, args.seed)
    _write_json(Path(args.out) / "index.json", {k: str(v) for k, v in sorted(paths.items())})
    write_manifest(args.out, "gen-fixtures", args, [], started)


def cmd_report(args):
    started = time.monotonic()
    out = {}
    if args.history:
        with open(args.history, newline="") as fh:
            rows = list(csv.DictReader(fh))
        out["similarity_history"] = {k: [float(r[k]) for r in rows] for k in ("generation", "best_S", "coverage", "subset")}
    if args.design:
        d = json.loads(Path(args.design).read_text())
        out["design"] = {k: d["report"][k] for k in ("S", "coverage_term", "subset_term",
                                                      "coverage_per_sample", "subset_per_sample")}
    if args.calibration:
        tables = calibmap.read_tables(args.calibration)
        out["calibration_residuals"] = {j: t.residuals for j, t in tables.items()}
    if args.episode_summary:
        out["episode"] = json.loads(Path(args.episode_summary).read_text())
    if args.decode_diagnostics:
        diag = json.loads(Path(args.decode_diagnostics).read_text())
        out["decode"] = {k: diag[k] for k in ("packets", "checksum_mismatch", "truncated", "invalid")}
    _write_json(args.out, out)
    write_manifest(args.out, "report", args,
                   [args.history, args.design, args.calibration, args.episode_summary, args.decode_diagnostics], started)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="exoforge", description="Exoskeleton design and data-pipeline tools.")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, func, help_):
        p = sub.add_parser(name, help=help_)
        p.set_defaults(func=func)
        p.add_argument("--seed", type=int, default=0)
        return p

    for name, func, help_ in (("optimize", cmd_optimize, "optimize exoskeleton design parameters"),
                              ("fit-linkage", cmd_fit_linkage, "fit an equivalent four-bar to a target workspace")):
        p = add(name, func, help_)
        p.add_argument("--template", required=True, help="hand file with a design section (or bundled name)")
        p.add_argument("--finger", help="finger to optimize (default: first with a design section)")
        p.add_argument("--config", help="optimizer config JSON")
        p.add_argument("--out", required=True)
        p.add_argument("--history", help="per-generation CSV")
        p.add_argument("--threads", type=int, default=0)
        if name == "optimize":
            p.add_argument("--robot-ws", required=True, help="robot fingertip workspace CSV")
            p.add_argument("--tip-extension", type=float, default=3.0, help="mm")
            p.add_argument("--limit-tightening", type=float, default=5.0, help="degrees")
        else:
            p.add_argument("--target", required=True, help="target fingertip pose CSV")
            p.add_argument("--swing-values-deg", type=float, nargs="+")
            p.add_argument("--swing-file", help="JSON list of swing angles in degrees")

    p = add("calibrate", cmd_calibrate, "fit encoder-to-motor tables")
    p.add_argument("--pairs", required=True)
    p.add_argument("--kind", choices=(calibmap.POLYNOMIAL, calibmap.MONOTONE_PWL), default=calibmap.POLYNOMIAL)
    p.add_argument("--degree", type=int, default=3)
    p.add_argument("--knots", type=int, default=8)
    p.add_argument("--motor-range", type=float, nargs=2, default=(0.0, 1000.0))
    p.add_argument("--out", required=True)

    p = add("gen-stream", cmd_gen_stream, "write a synthetic encoder byte stream")
    p.add_argument("--out", required=True)
    p.add_argument("--truth", help="JSONL of packets expected to decode")
    p.add_argument("--packets", type=int, default=100)
    p.add_argument("--channels", type=int, default=6)
    p.add_argument("--clean", action="store_true", help="no garbage or corruption")
    p.add_argument("--rate-hz", type=float, default=45.0)
    p.add_argument("--t0-ns", type=int, default=0)

    p = add("decode", cmd_decode, "decode an encoder byte stream to JSONL")
    p.add_argument("--stream", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--rate-hz", type=float, default=45.0, help="packet rate used to synthesize receive times")
    p.add_argument("--t0-ns", type=int, default=0)
    p.add_argument("--chunk-size", type=int, default=0)

    p = add("align", cmd_align, "latency-correct, align and downsample an episode")
    p.add_argument("--latency", required=True)
    p.add_argument("--camera", required=True)
    p.add_argument("--encoder", required=True)
    p.add_argument("--tactile")
    p.add_argument("--wrist")
    p.add_argument("--downsample", type=int, default=3)
    p.add_argument("--fps", type=float, default=45.0)
    p.add_argument("--out", required=True)

    p = add("compose", cmd_compose, "occlusion-aware compositing of frame directories")
    p.add_argument("--bg", required=True)
    p.add_argument("--robot", required=True)
    p.add_argument("--exo-mask", required=True)
    p.add_argument("--robot-mask", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--frames", help="half-open range a:b")
    p.add_argument("--threads", type=int, default=0)

    p = add("exec-sim", cmd_exec_sim, "replay an action log into dense command streams")
    p.add_argument("--actions", required=True)
    p.add_argument("--mode", choices=(actionexec.VIRTUAL, actionexec.HARDWARE), default=actionexec.VIRTUAL)
    p.add_argument("--hand", choices=sorted(actionexec.HAND_PROFILES), default="xhand_like")
    p.add_argument("--init-hand", type=float, nargs="+")
    p.add_argument("--out", required=True)

    p = add("gen-fixtures", cmd_gen_fixtures, "write synthetic inputs for every command")
    p.add_argument("--out", required=True)

    p = add("report", cmd_report, "collect plottable series from earlier outputs")
    p.add_argument("--history")
    p.add_argument("--design")
    p.add_argument("--calibration")
    p.add_argument("--episode-summary")
    p.add_argument("--decode-diagnostics")
    p.add_argument("--out", required=True)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        args.func(args)
    except (ExoforgeError, OSError, ValueError, KeyError) as exc:
        err = {"error": type(exc).__name__, "message": str(exc), "command": args.command}
        print(json.dumps(err), file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
