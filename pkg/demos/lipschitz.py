"""Adversarial training flattens the scorer: local Lipschitz estimates of an
adversarially trained and a standard-trained model from the same init."""
from tarot.core import make_mlp_scorer
from tarot.evaluation import local_lipschitz_estimate, robust_accuracy, standard_accuracy
from tarot.core import eval_budget
from tarot.synthdata import make_two_moons_shift
from tarot.training import TarotConfig, train_standard_at

eps = 16 / 255
source, _ = make_two_moons_shift(400, 0, 0.1, seed=0)
cfg = TarotConfig().with_epsilon(eps)
init = make_mlp_scorer(2, 2, cfg.hidden, seed=cfg.seed)
for name, e in (("standard", 0.0), ("adversarial", eps)):
    f = train_standard_at(source, cfg, init, epsilon=e).scorer
    lip = local_lipschitz_estimate(f, source.inputs, eps)
    print(f"{name:12s} acc {standard_accuracy(f, source):.3f}  "
          f"pgd20 {robust_accuracy(f, source, eval_budget(eps)):.3f}  lipschitz {lip:.2f}")
