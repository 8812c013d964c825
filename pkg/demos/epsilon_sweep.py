"""Robust-pretrained against random init across training epsilons, with a plot."""
import sys
import tempfile
from pathlib import Path

from tarot.experiment import ExperimentConfig, emit_plots, sweep

out = Path(sys.argv[1] if len(sys.argv) > 1 else tempfile.mkdtemp())
manifests = []
for robust_pt in (True, False):
    cfg = ExperimentConfig(robust_pt=robust_pt, out_dir=str(out), seeds=(0, 1, 2))
    ms, _ = sweep("epsilon", [2 / 255, 4 / 255, 8 / 255, 16 / 255], cfg,
                  summary_path=out / f"sweep_epsilon_pt{int(robust_pt)}.csv")
    manifests += ms
for path in emit_plots(manifests, out / "plots"):
    print(path)
