"""Adversarially robust unsupervised domain adaptation with a robust margin
disparity discrepancy objective, plus exact finite-instance checks of its bounds."""
from .core import (ComposedScorer, DomainDataset, LookupScorer, MarginConfig, PerturbationBudget,
                   make_mlp_scorer, predict_class, softmax_scores)

__all__ = ["ComposedScorer", "DomainDataset", "LookupScorer", "MarginConfig",
           "PerturbationBudget", "make_mlp_scorer", "predict_class", "softmax_scores"]
__version__ = "0.1.0"
