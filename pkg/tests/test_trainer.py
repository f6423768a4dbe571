import json

import numpy as np
import pytest

from lstm_pm.config import ModelConfig, SynthConfig, TrainConfig
from lstm_pm.heatmap import encode_labels
from lstm_pm.model import ModelParams, init_params
from lstm_pm.synth import generate_dataset
from lstm_pm.tensor import ShapeError, Tape, Tensor, backward
from lstm_pm.trainer import (
    DivergenceError,
    OptState,
    clip_gradients,
    compute_loss,
    global_norm,
    learning_rate,
    make_example,
    train_loop,
    train_step,
)

SMALL = ModelConfig(input_size=32, feature_channels=8, memory_channels=8, generator_channels=8, seq_len=3)
SMALL_SYNTH = SynthConfig(image_size=32, figure_height=14, joint_radius=1.5, limb_width=1.0, center_jitter=2)


def small_batch(n=2, seed=0):
    seqs = generate_dataset(seed, n, SMALL_SYNTH, 3)
    tc = TrainConfig(augment=False)
    return [make_example(s, SMALL, tc, 0, 0, k) for k, s in enumerate(seqs)]


def test_loss_examples():
    b = [Tensor(np.array([[[3.0]]]))]
    assert float(compute_loss(b, [Tensor(np.array([[[1.0]]]))]).data) == 4.0
    rng = np.random.default_rng(0)
    bs = [Tensor(rng.standard_normal((4, 5, 5))) for _ in range(3)]
    assert float(compute_loss(bs, bs).data) == 0.0
    gs = [Tensor(rng.standard_normal((4, 5, 5))) for _ in range(3)]
    ref = sum(float(np.sum((b.data.astype(np.float64) - g.data) ** 2)) for b, g in zip(bs, gs))
    assert float(compute_loss(bs, gs).data) == pytest.approx(ref, rel=1e-6)
    with pytest.raises(ShapeError):
        compute_loss(bs, gs[:2])


def test_loss_gradient_closed_form():
    rng = np.random.default_rng(1)
    bs = [Tensor(rng.standard_normal((3, 4, 4)), requires_grad=True, dtype=np.float64) for _ in range(2)]
    gs = [Tensor(rng.standard_normal((3, 4, 4)), dtype=np.float64) for _ in range(2)]
    with Tape() as tape:
        loss = compute_loss(bs, gs)
    backward(loss, tape)
    for b, g in zip(bs, gs):
        np.testing.assert_allclose(b.grad, 2 * (b.data - g.data), rtol=1e-14)


def test_zero_lr_is_noop():
    params = init_params(SMALL, seed=1)
    before = params.payload()
    opt = OptState.zeros(params)
    loss, opt = train_step(small_batch(), params, opt, TrainConfig(), lr=0.0)
    assert params.payload() == before
    assert np.isfinite(loss) and loss > 0 and opt.iteration == 1


def test_step_reduces_loss_on_same_batch():
    params = init_params(SMALL, seed=2)
    opt = OptState.zeros(params)
    batch = small_batch()
    first, opt = train_step(batch, params, opt, TrainConfig(learning_rate=1e-3))
    for _ in range(5):
        last, opt = train_step(batch, params, opt, TrainConfig(learning_rate=1e-3))
    assert last < first


def test_clip_to_threshold():
    params = init_params(SMALL, seed=3)
    rng = np.random.default_rng(0)
    for t in params:
        t.grad = rng.standard_normal(t.shape).astype(t.dtype)
    pre = global_norm(params)
    assert pre > 10
    assert clip_gradients(params, 10.0) == pytest.approx(pre)
    assert global_norm(params) == pytest.approx(10.0, rel=1e-5)
    clip_gradients(params, 1e6)
    assert global_norm(params) == pytest.approx(10.0, rel=1e-5)


def test_momentum_update_rule():
    params = init_params(SMALL, seed=4, dtype=np.float64)
    name = "G.2.b"
    theta0 = params[name].data.copy()
    opt = OptState.zeros(params)
    opt.velocity = {k: v.astype(np.float64) for k, v in opt.velocity.items()}
    opt.velocity[name][:] = 0.5
    g = np.linspace(-1, 1, theta0.size)
    for t in params:
        t.grad = np.zeros_like(t.data)
    params[name].grad = g.copy()
    from lstm_pm.trainer import sgd_update
    sgd_update(params, opt, 0.1, TrainConfig(momentum=0.9, weight_decay=5e-4))
    v = 0.9 * 0.5 - 0.1 * (g + 5e-4 * theta0)
    np.testing.assert_allclose(params[name].data, theta0 + v, rtol=1e-12)


def test_lr_schedule():
    cfg = TrainConfig(learning_rate=1e-3, lr_drop_every=2000, lr_drop_factor=0.333)
    assert learning_rate(cfg, 0) == 1e-3
    assert learning_rate(cfg, 1999) == 1e-3
    assert learning_rate(cfg, 4000) == pytest.approx(1e-3 * 0.333 ** 2)


def test_divergence_reports_iteration():
    params = init_params(SMALL, seed=5)
    params["G.2.b"].data[:] = 3e38
    opt = OptState.zeros(params)
    opt.iteration = 17
    with pytest.raises(DivergenceError) as info:
        train_step(small_batch(), params, opt, TrainConfig())
    assert info.value.iteration == 17 and "17" in str(info.value)


def test_targets_match_encoder():
    seqs = generate_dataset(0, 1, SMALL_SYNTH, 3)
    frames, targets = make_example(seqs[0], SMALL, TrainConfig(augment=False), 0, 0, 0)
    for t, js in zip(targets, seqs[0].joints):
        np.testing.assert_array_equal(t.data, encode_labels(js, 8, 4, SMALL.label_sigma).data)


def _loop(tmp, total, data, resume=True):
    tc = TrainConfig(total_iterations=total, batch_size=2, log_every=1, checkpoint_every=2, seed=9)
    return train_loop(data, SMALL, tc, tmp, resume=resume)


def test_resume_matches_uninterrupted(tmp_path):
    data = generate_dataset(1, 3, SMALL_SYNTH, 4)
    full = _loop(tmp_path / "full", 6, data)
    _loop(tmp_path / "split", 3, data)
    resumed = _loop(tmp_path / "split", 6, data)
    assert resumed.iteration == 6 and len(resumed.losses) == 3
    assert resumed.losses == full.losses[3:]
    assert (tmp_path / "full" / "checkpoint.lpm").read_bytes() == (tmp_path / "split" / "checkpoint.lpm").read_bytes()
    assert (tmp_path / "full" / "optstate.lpm").read_bytes() == (tmp_path / "split" / "optstate.lpm").read_bytes()
    assert (tmp_path / "full" / "metrics.jsonl").read_text() == (tmp_path / "split" / "metrics.jsonl").read_text()


def test_metrics_log(tmp_path):
    data = generate_dataset(2, 2, SMALL_SYNTH, 3)
    res = _loop(tmp_path, 4, data, resume=False)
    rows = [json.loads(line) for line in (tmp_path / "metrics.jsonl").read_text().splitlines()]
    assert [r["iteration"] for r in rows] == [1, 2, 3, 4]
    assert all(set(r) == {"iteration", "loss", "lr"} for r in rows)
    assert [r["loss"] for r in rows] == res.losses
    assert ModelParams.load(res.checkpoint).config == SMALL


def test_loop_errors(tmp_path):
    with pytest.raises(ValueError):
        _loop(tmp_path / "x", 1, [])
    blocker = tmp_path / "file"
    blocker.write_text("")
    with pytest.raises(OSError, match="file"):
        _loop(blocker / "sub", 1, generate_dataset(0, 1, SMALL_SYNTH, 3))
