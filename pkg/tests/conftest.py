import os
import sys
import time
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from lstm_pm import experiments as X  # noqa: E402

_VERDICTS: dict[int, tuple[bool, str]] = {}


def record_verdict(n: int, ok: bool, detail: str) -> None:
    _VERDICTS[n] = (bool(ok), detail)


def pytest_terminal_summary(terminalreporter):
    if not _VERDICTS:
        return
    terminalreporter.section("acceptance")
    for n in sorted(_VERDICTS):
        ok, detail = _VERDICTS[n]
        terminalreporter.write_line(f"[{'PASS' if ok else 'FAIL'}] criterion {n}: {detail}")


@pytest.fixture(scope="session")
def artifacts(tmp_path_factory):
    """Training output root; set LSTM_PM_TEST_CACHE to keep finished runs between sessions."""
    cache = os.environ.get("LSTM_PM_TEST_CACHE")
    if cache:
        Path(cache).mkdir(parents=True, exist_ok=True)
        return Path(cache)
    return tmp_path_factory.mktemp("artifacts")


@pytest.fixture(scope="session")
def bench_sets():
    return X.benchmark_sets()


class TrainedVariants:
    """Benchmark variants trained on first use; wall time is kept per run."""

    def __init__(self, root, sets):
        self.root, self.sets = root, sets
        self.params, self.seconds = {}, {}

    def get(self, variant="LSTM_PM", seq_len=5):
        key = (variant, seq_len)
        if key not in self.params:
            t0 = time.perf_counter()
            self.params[key] = X.train_variant(self.sets, self.root / f"{variant}_T{seq_len}", variant, seq_len)
            self.seconds[key] = time.perf_counter() - t0
        return self.params[key]


@pytest.fixture(scope="session")
def trained(artifacts, bench_sets):
    return TrainedVariants(artifacts, bench_sets)


@pytest.fixture(scope="session")
def overfit(tmp_path_factory):
    return X.run_overfit(tmp_path_factory.mktemp("overfit"))
