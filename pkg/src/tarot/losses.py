"""Margins, the ramp loss Phi_rho, cross-entropy variants and margin risks.

Loss functions take logits of shape (C,) or (n, C). Torch inputs give torch
outputs (differentiable, per sample); anything else gives numpy / float.
"""
from __future__ import annotations

from typing import Optional

import numpy as np
import torch
import torch.nn.functional as F

from .core import DTYPE, DomainDataset, PerturbationBudget, Scorer, scores

MOD_CE_CLAMP = 1.0 - 1e-7


class UndefinedMarginError(ValueError):
    pass


class ConfigurationError(ValueError):
    pass


def _wrap(fn):
    def wrapped(logits, y):
        if isinstance(logits, torch.Tensor):
            return fn(logits, torch.as_tensor(y, device=logits.device))
        z = torch.as_tensor(np.asarray(logits, dtype=np.float64), dtype=DTYPE)
        out = fn(z, torch.as_tensor(np.asarray(y), dtype=torch.long)).detach().numpy()
        return float(out) if out.ndim == 0 else out
    wrapped.__name__ = fn.__name__
    wrapped.__doc__ = fn.__doc__
    return wrapped


def _gather(z: torch.Tensor, y: torch.Tensor) -> torch.Tensor:
    if z.ndim == 1:
        return z[y]
    return z.gather(-1, y.long().view(-1, 1)).squeeze(-1)


@_wrap
def margin(z: torch.Tensor, y: torch.Tensor) -> torch.Tensor:
    """f_y - max_{y' != y} f_{y'}."""
    if z.shape[-1] < 2:
        raise UndefinedMarginError("margin needs at least two classes")
    true = _gather(z, y)
    mask = F.one_hot(y.long(), z.shape[-1]).bool()
    others = z.masked_fill(mask, float("-inf")).amax(dim=-1)
    return true - others


def phi_rho(m, rho: float):
    """Ramp: 1 for m <= 0, 1 - m/rho on [0, rho], 0 for m >= rho."""
    if rho <= 0:
        raise ValueError("rho must be > 0")
    if isinstance(m, torch.Tensor):
        return torch.clamp(1.0 - m / rho, 0.0, 1.0)
    out = np.clip(1.0 - np.asarray(m, dtype=np.float64) / rho, 0.0, 1.0)
    return float(out) if out.ndim == 0 else out


@_wrap
def ce_loss(z: torch.Tensor, y: torch.Tensor) -> torch.Tensor:
    """-log softmax_y, via log-sum-exp."""
    return -_gather(torch.log_softmax(z, dim=-1), y)


@_wrap
def ce_rob_loss(z: torch.Tensor, y: torch.Tensor) -> torch.Tensor:
    """Cross-entropy evaluated at adversarial logits (same formula as ce_loss)."""
    return -_gather(torch.log_softmax(z, dim=-1), y)


@_wrap
def mod_ce_rob_loss(z: torch.Tensor, y: torch.Tensor) -> torch.Tensor:
    """log(1 - softmax_y) at adversarial logits, softmax_y clamped to 1 - 1e-7."""
    p = _gather(torch.softmax(z, dim=-1), y)
    return torch.log1p(-torch.clamp(p, max=MOD_CE_CLAMP))


def neg_margin_loss(z: torch.Tensor, y: torch.Tensor) -> torch.Tensor:
    """-margin; increasing it increases Phi_rho, so PGD can target margin risks."""
    return -margin(z, y)


def margin_risk(f: Scorer, dataset: DomainDataset, rho: float,
                weights: Optional[np.ndarray] = None) -> float:
    y = dataset.require_labels()
    m = margin(scores(f, dataset.inputs), y)
    w = dataset.weights if weights is None else np.asarray(weights, dtype=np.float64)
    return float(np.dot(w, phi_rho(np.atleast_1d(m), rho)))


def robust_margin_risk(f: Scorer, dataset: DomainDataset, rho: float, maximizer: str = "pgd",
                       budget: Optional[PerturbationBudget] = None, world=None,
                       epsilon: Optional[float] = None, weights: Optional[np.ndarray] = None,
                       seed: int = 0) -> float:
    """Mean over samples of the worst-case Phi_rho(margin) in the epsilon-ball.

    ``maximizer="exact"`` needs a FiniteWorld and dataset inputs that are world
    points; ``"pgd"`` needs a torch scorer and gives a lower-bound estimate.
    """
    y = dataset.require_labels()
    w = dataset.weights if weights is None else np.asarray(weights, dtype=np.float64)
    if maximizer == "exact":
        if world is None:
            raise ConfigurationError("exact maximizer requires a FiniteWorld")
        eps = world.epsilon if epsilon is None else epsilon
        Z = scores(f, world.points)
        idx = np.array([world.index_of(x) for x in dataset.inputs])
        vals = np.empty(len(idx))
        for k, (i, yi) in enumerate(zip(idx, y)):
            ball = world.ball(i, eps)
            vals[k] = phi_rho(np.atleast_1d(margin(Z[ball], np.full(len(ball), yi))), rho).max()
        return float(np.dot(w, vals))
    if maximizer != "pgd":
        raise ConfigurationError(f"unknown maximizer {maximizer!r}")
    if budget is None:
        raise ConfigurationError("pgd maximizer requires a PerturbationBudget")
    from .attacks import pgd

    if budget.epsilon == 0:
        return margin_risk(f, dataset, rho, w)
    res = pgd(f, neg_margin_loss, dataset.inputs, y, budget, seed=seed)
    m = margin(scores(f, res.x_adv), y)
    return float(np.dot(w, phi_rho(np.atleast_1d(m), rho)))
