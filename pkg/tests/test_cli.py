import json

import numpy as np
import pytest

from exoforge.cli import main


@pytest.fixture(scope="module")
def fx(tmp_path_factory):
    root = tmp_path_factory.mktemp("fx")
    assert main(["gen-fixtures", "--out", str(root)]) == 0
    index = json.loads((root / "index.json").read_text())
    return root, index


def run(*argv):
    assert main([str(a) for a in argv]) == 0


def test_fixture_tree(fx):
    root, index = fx
    assert (root / "manifest.json").exists()
    for path in index.values():
        assert (root / path).exists()
    manifest = json.loads((root / "manifest.json").read_text())
    assert manifest["command"] == "gen-fixtures" and manifest["seed"] == 0


def test_decode_matches_truth(fx, tmp_path):
    root, ix = fx
    out = tmp_path / "decoded.jsonl"
    run("decode", "--stream", ix["stream"], "--out", out, "--rate-hz", 45)
    assert out.read_bytes() == open(ix["stream_truth"], "rb").read()
    diag = json.loads((tmp_path / "decoded.jsonl.diagnostics.json").read_text())
    assert diag["packets"] == len(out.read_text().splitlines())
    # chunked decoding writes the same bytes
    out2 = tmp_path / "chunked.jsonl"
    run("decode", "--stream", ix["stream"], "--out", out2, "--chunk-size", 7)
    assert out2.read_bytes() == out.read_bytes()
    m = json.loads((tmp_path / "decoded.jsonl.manifest.json").read_text())
    assert set(m) >= {"command", "config_hash", "seed", "inputs", "tool_version", "wall_time_s"}


def test_align_and_report(fx, tmp_path):
    _, ix = fx
    out = tmp_path / "episode.jsonl"
    run("align", "--latency", ix["latency"], "--camera", ix["camera"], "--encoder", ix["encoder"],
        "--tactile", ix["tactile"], "--wrist", ix["wrist"], "--out", out)
    rows = [json.loads(line) for line in out.read_text().splitlines()]
    t = [r["t_capture_ns"] for r in rows]
    assert len(rows) > 0 and all(a < b for a, b in zip(t, t[1:]))
    summary = json.loads((tmp_path / "episode.jsonl.summary.json").read_text())
    assert summary["fps"] == 15.0
    run("report", "--episode-summary", tmp_path / "episode.jsonl.summary.json", "--out", tmp_path / "r.json")
    assert json.loads((tmp_path / "r.json").read_text())["episode"] == summary


def test_calibrate(fx, tmp_path):
    _, ix = fx
    out = tmp_path / "calib.json"
    run("calibrate", "--pairs", ix["calib_pairs"], "--out", out)
    run("report", "--calibration", out, "--out", tmp_path / "r.json")
    res = json.loads((tmp_path / "r.json").read_text())["calibration_residuals"]
    assert res


def test_compose(fx, tmp_path):
    root, ix = fx
    m = root / "masks"
    out = tmp_path / "composed"
    run("compose", "--bg", m / "bg", "--robot", m / "robot", "--exo-mask", m / "exo_mask",
        "--robot-mask", m / "robot_mask", "--out", out, "--frames", "0:2")
    report = json.loads((out / "report.json").read_text())
    assert report["written"] == [0, 1]
    assert (out / "manifest.json").exists()


def test_exec_sim_modes(fx, tmp_path):
    _, ix = fx
    for mode in ("virtual", "hardware"):
        run("exec-sim", "--actions", ix["actions"], "--mode", mode, "--out", tmp_path / f"{mode}.jsonl")
    rows = [json.loads(line) for line in (tmp_path / "virtual.jsonl").read_text().splitlines()]
    assert {r["device"] for r in rows} == {"arm", "hand"}
    hand = np.array([r["command"] for r in rows if r["device"] == "hand"])
    assert np.all((hand >= 0) & (hand <= 1000))


def test_optimize_short_run(fx, tmp_path):
    _, ix = fx
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"population": 8, "generations": 3, "exo_samples": 64}))
    out = tmp_path / "design.json"
    run("optimize", "--template", ix["template"], "--robot-ws", ix["robot_ws"], "--config", cfg,
        "--out", out, "--history", tmp_path / "h.csv")
    d = json.loads(out.read_text())
    assert d["generations_run"] == 3
    assert d["adjustments"] == {"tip_extension_mm": 3.0, "limit_tightening_deg": 5.0}
    run("report", "--history", tmp_path / "h.csv", "--design", out, "--out", tmp_path / "r.json")
    hist = json.loads((tmp_path / "r.json").read_text())["similarity_history"]["best_S"]
    assert all(b >= a for a, b in zip(hist, hist[1:]))
    # same seed, same bytes
    out2 = tmp_path / "design2.json"
    run("optimize", "--template", ix["template"], "--robot-ws", ix["robot_ws"], "--config", cfg, "--out", out2)
    assert out2.read_bytes() == out.read_bytes()


def test_gen_stream_round_trip(tmp_path):
    run("gen-stream", "--out", tmp_path / "s.bin", "--truth", tmp_path / "t.jsonl", "--packets", 50, "--seed", 3)
    run("decode", "--stream", tmp_path / "s.bin", "--out", tmp_path / "d.jsonl")
    assert (tmp_path / "d.jsonl").read_bytes() == (tmp_path / "t.jsonl").read_bytes()


def test_rerun_is_byte_identical(tmp_path):
    a = tmp_path / "a"
    run("gen-fixtures", "--out", a)
    first = {p.relative_to(a): p.read_bytes() for p in a.rglob("*") if p.is_file()}
    m1 = json.loads((a / "manifest.json").read_text())
    run("gen-fixtures", "--out", a)
    second = {p.relative_to(a): p.read_bytes() for p in a.rglob("*") if p.is_file()}
    m2 = json.loads((a / "manifest.json").read_text())
    assert sorted(first) == sorted(second)
    for rel in first:
        if rel.name != "manifest.json":
            assert first[rel] == second[rel], rel
    m1.pop("wall_time_s"), m2.pop("wall_time_s")
    assert m1 == m2


def test_errors(tmp_path, capsys):
    with pytest.raises(SystemExit) as exc:
        main(["decode", "--bogus"])
    assert exc.value.code == 2
    capsys.readouterr()
    assert main(["decode", "--stream", str(tmp_path / "missing.bin"), "--out", str(tmp_path / "x")]) == 1
    err = json.loads(capsys.readouterr().err)
    assert err["command"] == "decode" and err["error"]
    bad = tmp_path / "bad.hand"
    bad.write_text("{")
    assert main(["optimize", "--template", str(bad), "--robot-ws", str(bad), "--out", str(tmp_path / "o")]) == 1
    assert json.loads(capsys.readouterr().err)["command"] == "optimize"


def test_fit_linkage_swing_file(fx, tmp_path):
    _, ix = fx
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"population": 8, "generations": 2, "exo_samples": 16}))
    out = tmp_path / "fit.json"
    run("fit-linkage", "--template", ix["fit_hand"], "--finger", "thumb", "--target", ix["fit_target"],
        "--config", cfg, "--swing-file", ix["swing_values"], "--out", out)
    report = json.loads(out.read_text())["report"]
    # one shared linkage scored over all six swing settings
    assert report["K"] == report["N"] == 96
