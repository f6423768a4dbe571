import numpy as np
import pytest
from PIL import Image

import lstm_pm.conv_lstm as conv_lstm_mod
import lstm_pm.model as model_mod
from lstm_pm.bench import (
    MEMORY_PHASES,
    BenchError,
    bench_inference,
    capture_memory_phases,
    count_macs,
    export_memory_images,
    mac_breakdown,
    normalize_channel,
    parse_mode,
)
from lstm_pm.config import ModelConfig
from lstm_pm.model import ModelParams, forward_cpm_baseline, forward_sequence, init_params, run_lstm_sequence
from lstm_pm.tensor import Tensor, conv2d

TINY = ModelConfig()


@pytest.fixture(scope="module")
def params():
    return init_params(TINY, seed=2)


def clip(n, seed=0):
    rng = np.random.default_rng(seed)
    return [Tensor(rng.random((3, 64, 64)).astype(np.float32)) for _ in range(n)]


class MacCounter:
    def __init__(self, monkeypatch):
        self.total = 0

        def counting(x, w, b=None, stride=1, pad=0):
            out = conv2d(x, w, b, stride, pad)
            n = x.shape[0] if x.ndim == 4 else 1
            cout, cin, kh, kw = w.shape
            self.total += n * cout * cin * kh * kw * out.shape[-1] * out.shape[-2]
            return out

        monkeypatch.setattr(model_mod, "conv2d", counting)
        monkeypatch.setattr(conv_lstm_mod, "conv2d", counting)


@pytest.mark.parametrize("variant", ["LSTM_PM", "RPM"])
def test_mac_model_matches_executed_convs(monkeypatch, variant):
    cfg = ModelConfig(variant=variant)
    p = init_params(cfg, seed=0)
    counter = MacCounter(monkeypatch)
    forward_sequence(clip(4), p)
    assert counter.total == count_macs(cfg, "recurrent", 4)
    counter.total = 0
    forward_cpm_baseline(clip(1)[0], p, 6)
    assert counter.total == count_macs(cfg, "multistage-6", 1)


def test_mac_values_tiny():
    b = mac_breakdown(TINY)
    assert set(b) == {"F0", "F", "lstm_x", "lstm_h", "G"}
    assert b["lstm_x"] == 4 * 48 * 41 * 9 * 256
    assert b["lstm_h"] == 4 * 48 * 48 * 9 * 256
    rec = count_macs(TINY, "recurrent", 100)
    base = count_macs(TINY, "multistage-6", 100)
    assert base / rec == pytest.approx(5.74, abs=0.01)


def test_multistage_cost_linear_in_stages():
    c = [count_macs(TINY, f"multistage-{s}", 10) for s in range(1, 7)]
    steps = np.diff(c)
    assert np.all(steps == steps[0]) and steps[0] > 0
    assert count_macs(TINY, "multistage-1", 1) == count_macs(TINY, "recurrent", 1)


def test_parse_mode():
    assert parse_mode("recurrent") == ("recurrent", 1)
    assert parse_mode("multistage-6") == ("multistage", 6)
    for bad in ("multistage-0", "cpm", "multistage-x"):
        with pytest.raises(BenchError):
            parse_mode(bad)


def test_bench_report_fields(params):
    rep = bench_inference(params, 3, "multistage-2", repeats=2, warmup=1)
    assert {"mode", "S", "nFrames", "perFrameMs", "macCount"} <= set(rep)
    assert rep["S"] == 2 and rep["nFrames"] == 3 and rep["perFrameMs"] > 0
    with pytest.raises(BenchError):
        bench_inference(params, 1, "recurrent")
    with pytest.raises(BenchError):
        bench_inference(params, 3, "recurrent", repeats=0)


def test_multistage_time_monotone_in_stages(params):
    frames = clip(4)
    times = [bench_inference(params, 4, f"multistage-{s}", repeats=5, warmup=3, frames=frames)["perFrameMs"]
             for s in (1, 3, 6)]
    assert times[0] <= times[1] <= times[2]


def test_capture_phase_identity(params):
    frames = clip(4, seed=1)
    phases = capture_memory_phases(frames, params)
    outs = run_lstm_sequence(frames, params)
    assert [p["stage"] for p in phases] == [1, 2, 3, 4]
    assert "memory_prev" not in phases[0]
    np.testing.assert_array_equal(phases[0]["memory_new"], phases[0]["selected_input"])
    for t in range(1, 4):
        ph, g = phases[t], outs[t].gates
        np.testing.assert_array_equal(ph["memory_prev"], phases[t - 1]["memory_new"])
        np.testing.assert_array_equal(ph["after_forget"], g.f.data * ph["memory_prev"])
        np.testing.assert_array_equal(ph["selected_input"], g.i.data * g.g.data)
        np.testing.assert_array_equal(ph["memory_new"], ph["after_forget"] + ph["selected_input"])
    assert phases[0]["memory_new"].shape[0] == 48


def test_saturated_forget_phase_keeps_memory(params):
    p = ModelParams(TINY, {k: Tensor(v.data.copy()) for k, v in params.items()})
    m = TINY.memory_channels
    p["lstm.wx"].data[:] = 0
    p["lstm.wh"].data[:] = 0
    p["lstm.bias"].data[m:2 * m] = -20
    p["lstm.bias"].data[2 * m:3 * m] = 20
    phases = capture_memory_phases(clip(3, seed=4), p)
    for ph in phases[1:]:
        assert np.max(np.abs(ph["after_forget"] - ph["memory_prev"])) < 1e-6
        assert np.max(np.abs(ph["memory_new"] - ph["memory_prev"])) < 1e-6


def test_capture_rejects_rpm():
    with pytest.raises(BenchError):
        capture_memory_phases(clip(2), init_params(ModelConfig(variant="RPM")))


def test_normalize_constant_channel():
    np.testing.assert_array_equal(normalize_channel(np.full((4, 4), 3.0)), 0.5)
    n = normalize_channel(np.arange(6.0).reshape(2, 3))
    assert n.min() == 0 and n.max() == 1


def test_export_images(params, tmp_path):
    frames = clip(3, seed=2)
    phases = capture_memory_phases(frames, params)
    phases[0]["memory_new"][5] = 1.25
    paths = export_memory_images(phases, [0, 5], tmp_path, frames)
    # stage 1 has only the new memory (== selected input); later stages have all four phases
    assert len(paths) == 2 * (2 + 4 + 4)
    names = {p.name for p in paths}
    assert {f"2_{ph}_0.png" for ph in MEMORY_PHASES} <= names
    for path in paths:
        with Image.open(path) as im:
            im.load()
            assert im.size == (64, 64) and im.mode == "L"
    with Image.open(tmp_path / "1_memory_new_5.png") as im:
        assert np.all(np.asarray(im) == 128)
    again = export_memory_images(phases, [0, 5], tmp_path / "again", frames)
    for a, b in zip(paths, again):
        assert a.read_bytes() == b.read_bytes()


def test_export_overlay_and_errors(params, tmp_path):
    frames = clip(2, seed=3)
    phases = capture_memory_phases(frames, params)
    paths = export_memory_images(phases, [1], tmp_path, frames, overlay=True)
    with Image.open(paths[0]) as im:
        assert im.mode == "RGB" and im.size == (64, 64)
    with pytest.raises(BenchError):
        export_memory_images(phases, [48], tmp_path, frames)
    blocker = tmp_path / "blocker"
    blocker.write_text("")
    with pytest.raises(OSError):
        export_memory_images(phases, [0], blocker / "x", frames)
