"""TAROT against pseudo-labeling and the MDD teacher on rotated two-moons.

Source is two-moons, target is the same rotated by 40 degrees. All models
are evaluated with PGD-20 at the training epsilon on both domains.
"""
import sys
import tempfile

from tarot.evaluation import format_reports
from tarot.experiment import ExperimentConfig, run_experiment
from tarot.training import TarotConfig

out = sys.argv[1] if len(sys.argv) > 1 else tempfile.mkdtemp()
tarot = TarotConfig().with_epsilon(16 / 255)
reports = []
for method in ("mdd", "pl", "tarot"):
    m = run_experiment(ExperimentConfig(method=method, tarot=tarot, out_dir=out, seeds=(0,),
                                        unseen=("two_moons:rot=60,n=400,noise=0.1,seed=5",)))
    for domain in ("target", "source", "unseen"):
        rep = m.report(domain)
        rep.name = method
        reports.append(rep)
print(format_reports(reports))
print(f"runs under {out}")
