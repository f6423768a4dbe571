"""Standard desk-scale experiments: overfit smoke run and seeded train/eval benchmark.

All datasets are generated from fixed seeds so that every variant sees the
same training sequences, test sequences and augmentation draws.
"""
from __future__ import annotations

import time
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional

import numpy as np

from .config import ModelConfig, SynthConfig, TrainConfig
from .evaluator import evaluate, pck, predict_sequences
from .model import ModelParams, init_params
from .synth import PoseSequence, generate_dataset, generate_sequence
from .trainer import train_loop

ASSETS = Path(__file__).resolve().parent / "assets"
OVERFIT_CHECKPOINT = ASSETS / "overfit_tiny.lpm"
OVERFIT_MANIFEST = ASSETS / "overfit_sequence" / "manifest.jsonl"

OVERFIT_SEED = 7
OVERFIT_STEPS = 300

TRAIN_SEED, TRAIN_COUNT = 1, 200
TEST_SEED, TEST_COUNT = 2, 50
OCCLUSION_SEED, OCCLUSION_COUNT = 3, 50
BENCH_ITERATIONS = 1500
SEQ_FRAMES = 5


def overfit_sequence(seed: int = OVERFIT_SEED, cfg: Optional[SynthConfig] = None) -> PoseSequence:
    return generate_sequence(seed, cfg or SynthConfig(), SEQ_FRAMES)


def overfit_configs(steps: int = OVERFIT_STEPS) -> tuple[ModelConfig, TrainConfig]:
    """Batch of one, no augmentation, no schedule drop: memorize a single clip."""
    tc = TrainConfig(learning_rate=1e-3, batch_size=1, total_iterations=steps, augment=False,
                     log_every=50, checkpoint_every=steps, lr_drop_every=10 * steps)
    return ModelConfig(), tc


@dataclass
class OverfitResult:
    losses: list
    params: ModelParams
    sequence: PoseSequence
    pck_mean: float
    seconds: float


def run_overfit(out_dir, steps: int = OVERFIT_STEPS, seed: int = OVERFIT_SEED) -> OverfitResult:
    seq = overfit_sequence(seed)
    mc, tc = overfit_configs(steps)
    t0 = time.perf_counter()
    res = train_loop([seq], mc, tc, out_dir, resume=False)
    elapsed = time.perf_counter() - t0
    params = ModelParams.load(res.checkpoint)
    preds = predict_sequences(params, [seq])[0]
    score = pck(list(preds), seq.joints, 0.2).mean
    return OverfitResult(res.losses, params, seq, 100.0 * score, elapsed)


@dataclass
class BenchmarkSets:
    train: list = field(default_factory=list)
    test: list = field(default_factory=list)
    occlusion: list = field(default_factory=list)


def benchmark_sets(synth: Optional[SynthConfig] = None) -> BenchmarkSets:
    sc = synth or SynthConfig()
    return BenchmarkSets(
        train=generate_dataset(TRAIN_SEED, TRAIN_COUNT, sc, SEQ_FRAMES),
        test=generate_dataset(TEST_SEED, TEST_COUNT, sc, SEQ_FRAMES),
        occlusion=generate_dataset(OCCLUSION_SEED, OCCLUSION_COUNT, replace(sc, occlusion_prob=1.0), SEQ_FRAMES),
    )


def benchmark_configs(variant: str = "LSTM_PM", seq_len: int = 5,
                      iterations: int = BENCH_ITERATIONS) -> tuple[ModelConfig, TrainConfig]:
    mc = ModelConfig(variant=variant, seq_len=seq_len)
    tc = TrainConfig(total_iterations=iterations, log_every=100, checkpoint_every=iterations)
    return mc, tc


def train_variant(sets: BenchmarkSets, out_dir, variant: str = "LSTM_PM", seq_len: int = 5,
                  iterations: int = BENCH_ITERATIONS) -> ModelParams:
    """Train (or resume a finished run in ``out_dir``) and return the final parameters."""
    mc, tc = benchmark_configs(variant, seq_len, iterations)
    res = train_loop(sets.train, mc, tc, Path(out_dir), resume=True)
    return ModelParams.load(res.checkpoint)


def score(params: ModelParams, sequences) -> float:
    """Mean PCK@0.2 in percent, evaluated with the model's own window length."""
    return evaluate(params, sequences, alpha=0.2)["mean"]


def untrained_score(sets: BenchmarkSets, variant: str = "LSTM_PM", seq_len: int = 5) -> float:
    mc, tc = benchmark_configs(variant, seq_len)
    return score(init_params(mc, seed=tc.seed), sets.test)


def loss_ratio(losses) -> float:
    return float(np.asarray(losses[-1]) / np.asarray(losses[0]))
