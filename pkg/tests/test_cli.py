import filecmp
import json

import pytest

from lstm_pm.cli import main
from lstm_pm.experiments import OVERFIT_CHECKPOINT, OVERFIT_MANIFEST

SMALL_RUN = ["--model.inputSize", "32", "--model.featureChannels", "8", "--model.memoryChannels", "8",
             "--model.generatorChannels", "8", "--model.T", "3", "--synth.imageSize", "32",
             "--synth.figureHeight", "14", "--synth.jointRadius", "1.5", "--synth.limbWidth", "1",
             "--synth.centerJitter", "2", "--train.totalIterations", "4", "--train.batchSize", "2",
             "--train.logEvery", "2"]


def run(argv, capsys):
    code = main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


def trees_equal(a, b):
    cmp = filecmp.dircmp(a, b)
    if cmp.left_only or cmp.right_only or cmp.funny_files:
        return False
    _, mismatch, errors = filecmp.cmpfiles(a, b, cmp.common_files, shallow=False)
    return not mismatch and not errors and all(trees_equal(a / d, b / d) for d in cmp.common_dirs)


def test_synth_is_reproducible(tmp_path, capsys):
    for name in ("a", "b"):
        code, out, _ = run(["synth", "--seed", 7, "--count", 3, "--out", tmp_path / name], capsys)
        assert code == 0
    assert trees_equal(tmp_path / "a", tmp_path / "b")
    first = json.loads(out.splitlines()[0])
    assert first["seed"] == 7 and first["command"] == "synth"
    assert first["config"]["model"]["memoryChannels"] == 48


def test_config_file_and_overrides(tmp_path, capsys):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"train": {"learningRate": 0.01}, "synth": {"occlusionProb": 1.0}}))
    code, out, _ = run(["synth", "--config", cfg, "--count", 1, "--out", tmp_path / "s",
                        "--train.learningRate=5e-4"], capsys)
    assert code == 0
    resolved = json.loads(out.splitlines()[0])["config"]
    assert resolved["train"]["learningRate"] == 5e-4
    assert resolved["synth"]["occlusionProb"] == 1.0


@pytest.mark.parametrize("argv, code, kind", [
    (["synth", "--out", "x", "--bogus", "1"], 2, "usage"),
    (["synth", "--out", "x", "--train.nope", "1"], 1, "config"),
    (["synth", "--out", "x", "--config", "/does/not/exist.json"], 1, "config"),
    (["frobnicate"], 2, "usage"),
    (["synth"], 2, "usage"),
])
def test_errors_are_one_line(argv, code, kind, capsys):
    got, _, err = run(argv, capsys)
    assert got == code
    lines = err.strip().splitlines()
    assert len(lines) == 1 and lines[0].startswith(f"error: {kind}:")


def test_bad_json_config(tmp_path, capsys):
    cfg = tmp_path / "bad.json"
    cfg.write_text("{oops")
    code, _, err = run(["synth", "--config", cfg, "--out", tmp_path / "o"], capsys)
    assert code == 1 and "not valid JSON" in err


def test_eval_shipped_overfit_checkpoint(tmp_path, capsys):
    code, out, _ = run(["eval", "--checkpoint", OVERFIT_CHECKPOINT, "--data", OVERFIT_MANIFEST,
                        "--out", tmp_path], capsys)
    assert code == 0
    report = json.loads((tmp_path / "report.json").read_text())
    assert report["mean"] == 100.0
    assert "100.00" in out.splitlines()[-1]


def test_checkpoint_mismatch(tmp_path, capsys):
    code, _, err = run(["eval", "--checkpoint", OVERFIT_CHECKPOINT, "--out", tmp_path, "--model.P", 13], capsys)
    assert code == 1 and "P=7" in err and "P=13" in err


def test_infer_writes_json_lines(tmp_path, capsys):
    code, _, _ = run(["infer", "--checkpoint", OVERFIT_CHECKPOINT, "--data", OVERFIT_MANIFEST,
                      "--out", tmp_path, "--overlay"], capsys)
    assert code == 0
    rows = [json.loads(l) for l in (tmp_path / "predictions.jsonl").read_text().splitlines()]
    assert [r["frame"] for r in rows] == list(range(5))
    assert all(len(r["joints"]) == 7 and len(r["joints"][0]) == 3 for r in rows)
    assert len(list((tmp_path / "overlays").rglob("*.png"))) == 5
    frames_dir = OVERFIT_MANIFEST.parent / "frames"
    clip_dir = next(frames_dir.iterdir())
    code, _, _ = run(["infer", "--checkpoint", OVERFIT_CHECKPOINT, "--data", clip_dir, "--out", tmp_path / "d"],
                     capsys)
    assert code == 0
    assert (tmp_path / "d" / "predictions.jsonl").read_text().count("\n") == 5


def test_bench_reports_both_modes(tmp_path, capsys):
    code, out, _ = run(["bench", "--out", tmp_path, "--frames", 6, "--repeats", 2, "--warmup", 1], capsys)
    assert code == 0
    rows = json.loads((tmp_path / "bench.json").read_text())
    assert {r["mode"] for r in rows} == {"recurrent", "multistage"}
    assert set(rows[0]) == {"mode", "S", "nFrames", "perFrameMs", "macCount", "ratioVsBaseline"}
    assert rows[0]["ratioVsBaseline"] > 1
    assert "speedup" in out


def test_viz_exports_pngs(tmp_path, capsys):
    code, out, _ = run(["viz", "--checkpoint", OVERFIT_CHECKPOINT, "--data", OVERFIT_MANIFEST,
                        "--channels", "0,7", "--out", tmp_path], capsys)
    assert code == 0
    assert len(list(tmp_path.glob("*.png"))) == 2 * (2 + 4 * 4)
    code, _, err = run(["viz", "--checkpoint", OVERFIT_CHECKPOINT, "--channels", "99", "--out", tmp_path], capsys)
    assert code == 1 and err.startswith("error:")


def test_train_then_eval_is_deterministic(tmp_path, capsys):
    for name in ("a", "b"):
        code, _, _ = run(["train", "--count", 3, "--out", tmp_path / name, *SMALL_RUN], capsys)
        assert code == 0
        code, _, _ = run(["eval", "--checkpoint", tmp_path / name / "checkpoint.lpm", "--count", 2,
                          "--out", tmp_path / f"eval_{name}", *SMALL_RUN], capsys)
        assert code == 0
    assert (tmp_path / "a" / "checkpoint.lpm").read_bytes() == (tmp_path / "b" / "checkpoint.lpm").read_bytes()
    assert (tmp_path / "a" / "metrics.jsonl").read_text() == (tmp_path / "b" / "metrics.jsonl").read_text()
    assert (tmp_path / "eval_a" / "report.json").read_text() == (tmp_path / "eval_b" / "report.json").read_text()
