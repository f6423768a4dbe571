"""Regenerate the shipped overfit checkpoint and its training clip.

    python3 scripts/make_overfit_asset.py [work_dir]

Writes src/lstm_pm/assets/overfit_tiny.lpm and
src/lstm_pm/assets/overfit_sequence/ (manifest + PNG frames).
"""
import shutil
import sys
import tempfile
from pathlib import Path

from lstm_pm.experiments import loss_ratio, run_overfit
from lstm_pm.synth import export_manifest

ASSETS = Path(__file__).resolve().parents[1] / "src" / "lstm_pm" / "assets"


def main(work: Path) -> None:
    res = run_overfit(work)
    print(f"steps={len(res.losses)} loss {res.losses[0]:.2f} -> {res.losses[-1]:.4f} "
          f"(ratio {loss_ratio(res.losses):.5f}), PCK@0.2 {res.pck_mean:.2f}%, {res.seconds:.1f}s")
    ASSETS.mkdir(exist_ok=True)
    res.params.save(ASSETS / "overfit_tiny.lpm", {"iteration": len(res.losses)})
    seq_dir = ASSETS / "overfit_sequence"
    if seq_dir.exists():
        shutil.rmtree(seq_dir)
    export_manifest([res.sequence], seq_dir)


if __name__ == "__main__":
    main(Path(sys.argv[1]) if len(sys.argv) > 1 else Path(tempfile.mkdtemp()))
