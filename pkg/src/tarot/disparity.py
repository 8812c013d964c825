"""Disparity measures between two scorers, the robust margin disparity
discrepancy on finite hypothesis classes, and the auxiliary-head adversarial
term optimised through gradient reversal."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Optional, Sequence

import numpy as np
import torch
import torch.nn as nn

from .core import PerturbationBudget, Scorer, argmax_lowest, as_tensor, scores
from .losses import ConfigurationError, ce_loss, margin, mod_ce_rob_loss, neg_margin_loss, phi_rho


class PairingError(ValueError):
    pass


class _ReverseGrad(torch.autograd.Function):
    @staticmethod
    def forward(ctx, x, coefficient):
        ctx.coefficient = coefficient
        return x.view_as(x)

    @staticmethod
    def backward(ctx, grad_output):
        return grad_output.neg() * ctx.coefficient, None


class GradientReversal(nn.Module):
    """Identity forward; backward multiplies the gradient by ``-coefficient``."""

    def __init__(self, coefficient: float = 1.0):
        super().__init__()
        if coefficient < 0:
            raise ValueError("coefficient must be >= 0")
        self.coefficient = float(coefficient)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return _ReverseGrad.apply(x, self.coefficient)


def grl_coefficient(progress: float, high: float = 1.0, sharpness: float = 10.0) -> float:
    """Ramp 2 / (1 + exp(-sharpness * p)) - 1 from 0 to ``high``."""
    return float(high * (2.0 / (1.0 + math.exp(-sharpness * progress)) - 1.0))


# exact computations on logit tables ------------------------------------------------

def margin_table(Z: np.ndarray) -> np.ndarray:
    """M[j, c] = Z[j, c] - max_{c' != c} Z[j, c'] for every class c."""
    Z = np.asarray(Z, dtype=np.float64)
    srt = np.sort(Z, axis=1)
    top1, top2 = srt[:, -1:], srt[:, -2:-1]
    top_idx = argmax_lowest(Z)
    M = Z - top1
    rows = np.arange(len(Z))
    M[rows, top_idx] = Z[rows, top_idx] - top2[:, 0]
    return M


def _exact_setup(X, world, epsilon, weights):
    if world is None:
        raise ConfigurationError("exact maximizer requires a FiniteWorld")
    eps = world.epsilon if epsilon is None else epsilon
    X = np.asarray(X, dtype=np.float64)
    if X is world.points:
        idx = np.arange(len(world))
    else:
        idx = np.array([world.index_of(x) for x in X], dtype=int)
    w = np.full(len(idx), 1.0 / len(idx)) if weights is None else np.asarray(weights, np.float64)
    return idx, world.ball_matrix(eps)[idx], w


def _exact_robust_01(Zp, Z, idx, B):
    hp = argmax_lowest(Zp[idx])
    hf = argmax_lowest(Z)
    return (B & (hp[:, None] != hf[None, :])).any(axis=1).astype(np.float64)


def _exact_robust_margin(Zp, Z, idx, B, rho):
    hp = argmax_lowest(Zp[idx])
    M = margin_table(Z)[:, hp].T  # (len(idx), n_points): margin of f at x' for label h_{f'}(x)
    worst = np.where(B, M, np.inf).min(axis=1)
    return phi_rho(worst, rho)


# public disparity measures -------------------------------------------------------

def _weights(n, weights):
    return np.full(n, 1.0 / n) if weights is None else np.asarray(weights, dtype=np.float64)


def disparity_01(f_prime: Scorer, f: Scorer, X, weights=None) -> float:
    X = np.asarray(X, dtype=np.float64)
    if len(X) == 0:
        raise ValueError("X must be nonempty")
    diff = argmax_lowest(scores(f_prime, X)) != argmax_lowest(scores(f, X))
    return float(np.dot(_weights(len(X), weights), diff))


def margin_disparity(f_prime: Scorer, f: Scorer, X, rho: float, weights=None) -> float:
    X = np.asarray(X, dtype=np.float64)
    hp = argmax_lowest(scores(f_prime, X))
    m = np.atleast_1d(margin(scores(f, X), hp))
    return float(np.dot(_weights(len(X), weights), phi_rho(m, rho)))


def _pgd_points(f, X, labels, loss, budget, seed):
    from .attacks import pgd

    return pgd(f, loss, X, labels, budget, seed=seed).x_adv


def robust_disparity_01_samples(f_prime, f, X, epsilon=None, maximizer="pgd", world=None,
                                budget: Optional[PerturbationBudget] = None, seed=0) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    if len(X) == 0:
        raise ValueError("X must be nonempty")
    if maximizer == "exact":
        idx, B, _ = _exact_setup(X, world, epsilon, None)
        return _exact_robust_01(scores(f_prime, world.points), scores(f, world.points), idx, B)
    if maximizer != "pgd":
        raise ConfigurationError(f"unknown maximizer {maximizer!r}")
    hp = argmax_lowest(scores(f_prime, X))
    clean = (hp != argmax_lowest(scores(f, X))).astype(np.float64)
    budget = _resolve_budget(budget, epsilon)
    if budget.epsilon == 0:
        return clean
    # indicators have no gradient: push f away from h_{f'}(x) through cross-entropy
    x_adv = _pgd_points(f, X, hp, ce_loss, budget, seed)
    adv = (hp != argmax_lowest(scores(f, x_adv))).astype(np.float64)
    return np.maximum(clean, adv)


def robust_disparity_01(f_prime, f, X, epsilon=None, maximizer="pgd", world=None, budget=None,
                        weights=None, seed=0) -> float:
    """Worst-case disagreement of h_f on the ball with h_{f'} at the clean point.

    With ``maximizer="pgd"`` the value is a lower-bound estimate.
    """
    v = robust_disparity_01_samples(f_prime, f, X, epsilon, maximizer, world, budget, seed)
    return float(np.dot(_weights(len(v), weights), v))


def robust_margin_disparity_samples(f_prime, f, X, rho, epsilon=None, maximizer="pgd",
                                    world=None, budget=None, seed=0) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    if len(X) == 0:
        raise ValueError("X must be nonempty")
    if maximizer == "exact":
        idx, B, _ = _exact_setup(X, world, epsilon, None)
        return _exact_robust_margin(scores(f_prime, world.points), scores(f, world.points),
                                    idx, B, rho)
    if maximizer != "pgd":
        raise ConfigurationError(f"unknown maximizer {maximizer!r}")
    hp = argmax_lowest(scores(f_prime, X))
    clean = phi_rho(np.atleast_1d(margin(scores(f, X), hp)), rho)
    budget = _resolve_budget(budget, epsilon)
    if budget.epsilon == 0:
        return clean
    x_adv = _pgd_points(f, X, hp, neg_margin_loss, budget, seed)
    adv = phi_rho(np.atleast_1d(margin(scores(f, x_adv), hp)), rho)
    return np.maximum(clean, adv)


def robust_margin_disparity(f_prime, f, X, rho, epsilon=None, maximizer="pgd", world=None,
                            budget=None, weights=None, seed=0) -> float:
    """Mean of the worst-case Phi_rho(M_f(x', h_{f'}(x))); pseudo-label taken at the clean x."""
    v = robust_margin_disparity_samples(f_prime, f, X, rho, epsilon, maximizer, world, budget,
                                        seed)
    return float(np.dot(_weights(len(v), weights), v))


def _resolve_budget(budget, epsilon):
    if budget is not None:
        return budget if epsilon is None else budget.with_epsilon(epsilon)
    if epsilon is None:
        raise ConfigurationError("pgd maximizer needs a budget or an epsilon")
    return PerturbationBudget(epsilon, epsilon / 4, 20, True) if epsilon > 0 else PerturbationBudget(0.0)


def robust_mdd_exact(f: Scorer, hypothesis_class: Sequence[Scorer], S_X, T_X, rho: float, world,
                     epsilon: Optional[float] = None, source_weights=None, target_weights=None,
                     return_argmax: bool = False):
    """sup over f' in the class of [robust margin disparity on T - margin disparity on S].

    Signed: the supremum is not clamped at zero.
    """
    if len(hypothesis_class) == 0:
        raise ValueError("hypothesis class must be nonempty")
    idx_t, B_t, w_t = _exact_setup(T_X, world, epsilon, target_weights)
    idx_s, _, w_s = _exact_setup(S_X, world, 0.0, source_weights)
    B_s = np.eye(len(world), dtype=bool)[idx_s]
    Z = scores(f, world.points)
    best, arg = -np.inf, -1
    for k, fp in enumerate(hypothesis_class):
        Zp = scores(fp, world.points)
        val = (np.dot(w_t, _exact_robust_margin(Zp, Z, idx_t, B_t, rho))
               - np.dot(w_s, _exact_robust_margin(Zp, Z, idx_s, B_s, rho)))
        if val > best:
            best, arg = float(val), k
    return (best, arg) if return_argmax else best


@dataclass
class DisparityReport:
    disp_01: float
    disp_rob_01: float
    disp_margin: float
    disp_rob_margin: float
    per_sample: dict = field(default_factory=dict)
    maximizer: str = "pgd"
    epsilon: float = 0.0
    rho: float = 1.0
    note: str = ""

    def to_json(self) -> dict:
        return asdict(self)


def disparity_report(f_prime, f, X, rho, epsilon, maximizer="pgd", world=None, budget=None,
                     seed=0) -> DisparityReport:
    X = np.asarray(X, dtype=np.float64)
    hp = argmax_lowest(scores(f_prime, X))
    s01 = (hp != argmax_lowest(scores(f, X))).astype(np.float64)
    smar = phi_rho(np.atleast_1d(margin(scores(f, X), hp)), rho)
    r01 = robust_disparity_01_samples(f_prime, f, X, epsilon, maximizer, world, budget, seed)
    rmar = robust_margin_disparity_samples(f_prime, f, X, rho, epsilon, maximizer, world, budget,
                                           seed)
    note = "exact" if maximizer == "exact" else "lower-bound estimate (PGD maximizer)"
    return DisparityReport(float(s01.mean()), float(r01.mean()), float(smar.mean()),
                           float(rmar.mean()),
                           {"disp_01": s01.tolist(), "disp_rob_01": r01.tolist(),
                            "disp_margin": smar.tolist(), "disp_rob_margin": rmar.tolist()},
                           maximizer, float(epsilon), float(rho), note)


def mdd_adversarial_term(psi: nn.Module, pi: nn.Module, pi_aux: nn.Module, batch_s, batch_t_adv,
                         batch_t_clean, gamma: float,
                         grl: Optional[GradientReversal] = None) -> torch.Tensor:
    """mean log(1 - softmax_{y_t}(pi_aux(psi(x_t_adv)))) - gamma * mean CE(pi_aux(psi(x_s)), y_s).

    Pseudo-labels y come from ``pi(psi(.))`` at the clean points and carry no
    gradient. Features entering ``pi_aux`` pass through ``grl``, so minimising
    ``-term`` ascends in ``pi_aux`` and descends in ``psi`` (scaled by the
    reversal coefficient).
    """
    xs, xta, xtc = as_tensor(batch_s), as_tensor(batch_t_adv), as_tensor(batch_t_clean)
    if xta.shape != xtc.shape:
        raise PairingError(f"adversarial batch {tuple(xta.shape)} does not pair with clean "
                           f"batch {tuple(xtc.shape)}")
    if len(xs) == 0 or len(xta) == 0:
        raise ValueError("batches must be nonempty")
    grl = grl or GradientReversal(1.0)
    with torch.no_grad():
        y_t = pi(psi(xtc)).argmax(dim=1)
        y_s = pi(psi(xs)).argmax(dim=1)
    target_term = mod_ce_rob_loss(pi_aux(grl(psi(xta))), y_t).mean()
    source_term = ce_loss(pi_aux(grl(psi(xs))), y_s).mean()
    return target_term - gamma * source_term
