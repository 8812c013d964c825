"""FGSM / PGD against arbitrary differentiable losses, and the exhaustive
ball maximizer used on finite worlds."""
from __future__ import annotations

from dataclasses import dataclass
from fractions import Fraction
from typing import Callable, Optional

import numpy as np
import torch

from .core import DTYPE, PerturbationBudget, as_tensor

LossFn = Callable[[torch.Tensor, torch.Tensor], torch.Tensor]


@dataclass
class AttackResult:
    x_adv: np.ndarray
    loss_clean: np.ndarray | float
    loss_adv: np.ndarray | float
    steps_taken: int
    degenerate: np.ndarray | bool = False


def _box_bounds(box, like: torch.Tensor):
    if box is None:
        return None, None
    lo, hi = box
    return (torch.as_tensor(np.broadcast_to(np.asarray(lo, dtype=np.float64), like.shape[-1:]).copy(),
                            dtype=like.dtype),
            torch.as_tensor(np.broadcast_to(np.asarray(hi, dtype=np.float64), like.shape[-1:]).copy(),
                            dtype=like.dtype))


def _prepare(x, y):
    xt = as_tensor(x)
    single = xt.ndim == 1
    if single:
        xt = xt[None, :]
    yt = torch.as_tensor(np.atleast_1d(np.asarray(y)), dtype=torch.long)
    if yt.numel() == 1 and xt.shape[0] > 1:
        yt = yt.expand(xt.shape[0])
    return xt.detach(), yt, single


def _loss_and_grad(model, loss: LossFn, x: torch.Tensor, y: torch.Tensor):
    x = x.detach().requires_grad_(True)
    per_sample = loss(model(x), y)
    (g,) = torch.autograd.grad(per_sample.sum(), x)
    return per_sample.detach(), g.detach()


def _inside_linf(out, x0, eps):
    # x0 + eps can round one ulp past the ball; step such coordinates back toward x0
    over = (out - x0).abs() > eps
    while over.any():
        out = torch.where(over, torch.nextafter(out, x0), out)
        over = (out - x0).abs() > eps
    return out


def _project(x_new, x0, eps, norm, lo, hi):
    if norm == "inf":
        out = torch.minimum(torch.maximum(x_new, x0 - eps), x0 + eps)
        if lo is not None:
            out = torch.minimum(torch.maximum(out, lo), hi)
        return _inside_linf(out, x0, eps)
    else:
        delta = x_new - x0
        n = delta.norm(dim=1, keepdim=True)
        factor = torch.where(n > eps, eps / n.clamp_min(1e-300), torch.ones_like(n))
        out = x0 + delta * factor
    if lo is not None:
        out = torch.minimum(torch.maximum(out, lo), hi)
    return out


def _random_start(x0, eps, norm, lo, hi, gen):
    if norm == "inf":
        a, b = x0 - eps, x0 + eps
        if lo is not None:
            a, b = torch.maximum(a, lo), torch.minimum(b, hi)
        u = torch.rand(x0.shape, generator=gen, dtype=x0.dtype)
        return _inside_linf(a + u * (b - a), x0, eps)
    d = x0.shape[1]
    direction = torch.randn(x0.shape, generator=gen, dtype=x0.dtype)
    direction = direction / direction.norm(dim=1, keepdim=True).clamp_min(1e-300)
    radius = eps * torch.rand((x0.shape[0], 1), generator=gen, dtype=x0.dtype) ** (1.0 / d)
    return _project(x0 + radius * direction, x0, eps, norm, lo, hi)


def _finish(x_adv, loss_clean, loss_adv, steps, degenerate, single):
    if single:
        return AttackResult(x_adv[0].numpy(), float(loss_clean[0]), float(loss_adv[0]), steps,
                            bool(degenerate[0]))
    return AttackResult(x_adv.numpy(), loss_clean.numpy(), loss_adv.numpy(), steps,
                        degenerate.numpy())


def pgd(model, loss: LossFn, x, y, budget: PerturbationBudget, seed: int = 0) -> AttackResult:
    """Projected gradient ascent on ``loss(model(x'), y)`` within the budget ball.

    Works on a single vector or an (n, d) batch (each row attacked
    independently). Returns the best iterate seen, so with ``random_start``
    off the adversarial loss is never below the clean loss.
    """
    x0, yt, single = _prepare(x, y)
    eps = float(budget.epsilon)
    lo, hi = _box_bounds(budget.box, x0)
    loss_clean, _ = _loss_and_grad(model, loss, x0, yt)
    if eps == 0:
        degenerate = torch.zeros(len(x0), dtype=torch.bool)
        return _finish(x0.clone(), loss_clean, loss_clean.clone(), 0, degenerate, single)

    if budget.random_start:
        gen = torch.Generator().manual_seed(int(seed))
        xk = _random_start(x0, eps, budget.norm, lo, hi, gen)
    else:
        xk = x0.clone()
    best_x = xk.clone()
    best_loss = torch.full((len(x0),), -torch.inf, dtype=x0.dtype)
    degenerate = torch.ones(len(x0), dtype=torch.bool)
    step = float(budget.step_size)

    for _ in range(budget.num_steps):
        lk, g = _loss_and_grad(model, loss, xk, yt)
        better = lk > best_loss
        best_x[better] = xk[better]
        best_loss = torch.where(better, lk, best_loss)
        degenerate &= (g == 0).all(dim=1)
        if budget.norm == "inf":
            direction = torch.sign(g)
        else:
            direction = g / g.norm(dim=1, keepdim=True).clamp_min(1e-300)
        xk = _project(xk + step * direction, x0, eps, budget.norm, lo, hi)

    with torch.no_grad():
        lk = loss(model(xk), yt)
    better = lk > best_loss
    best_x[better] = xk[better]
    best_loss = torch.where(better, lk, best_loss)
    return _finish(best_x.detach(), loss_clean, best_loss, budget.num_steps, degenerate, single)


def fgsm(model, loss: LossFn, x, y, epsilon: float, box=(0.0, 1.0)) -> AttackResult:
    """Single signed-gradient step of size epsilon, clamped to the box."""
    if epsilon < 0:
        raise ValueError("epsilon must be >= 0")
    x0, yt, single = _prepare(x, y)
    lo, hi = _box_bounds(box, x0)
    loss_clean, g = _loss_and_grad(model, loss, x0, yt)
    x_adv = x0 + float(epsilon) * torch.sign(g)
    if lo is not None:
        x_adv = torch.minimum(torch.maximum(x_adv, lo), hi)
    x_adv = _inside_linf(x_adv, x0, float(epsilon))
    with torch.no_grad():
        loss_adv = loss(model(x_adv), yt)
    return _finish(x_adv, loss_clean, loss_adv, 1, (g == 0).all(dim=1), single)


def exact_ball_max(objective, x_index: int, world, epsilon: Optional[float] = None):
    """Exhaustive maximum of ``objective`` over the world points in the ball.

    ``objective`` maps a (k, d) array of points to k values. Ties go to the
    lowest point index.
    """
    ball = world.ball(x_index, epsilon)
    vals = np.asarray(objective(world.points[ball]), dtype=np.float64).reshape(-1)
    k = int(np.argmax(vals))
    return int(ball[k]), float(vals[k])


def snap_to_world(x_adv, x_index: int, world, epsilon: Optional[float] = None) -> int:
    """Index of the ball point closest (L_inf) to ``x_adv``; lowest index on ties."""
    ball = world.ball(x_index, epsilon)
    d = np.abs(world.points[ball] - np.asarray(x_adv, dtype=np.float64)).max(axis=1)
    return int(ball[int(np.argmin(d))])


def parse_attack_spec(text: str, box=(0.0, 1.0)) -> PerturbationBudget:
    """Parse ``pgd:eps=16/255,steps=10,step=auto,rs=1`` or ``fgsm:eps=0.03``.

    Numbers may be decimals or fractions.
    ``step=auto`` means epsilon / 4. FGSM maps to a one-step PGD with step = eps
    and no random start (they coincide for the returned point whenever the
    step does not decrease the loss).
    """
    kind, _, params = text.partition(":")
    kv = dict(item.split("=", 1) for item in filter(None, params.split(",")))
    eps = float(Fraction(kv.pop("eps")))
    if kind == "fgsm":
        if kv:
            raise ValueError(f"unexpected fgsm parameters {sorted(kv)}")
        return PerturbationBudget(eps, eps, 1, False, "inf", box)
    if kind != "pgd":
        raise ValueError(f"unknown attack {kind!r}")
    steps = int(kv.pop("steps", 10))
    step_txt = kv.pop("step", "auto")
    step = eps / 4 if step_txt == "auto" else float(Fraction(step_txt))
    rs = kv.pop("rs", "1") not in ("0", "false", "False")
    norm = kv.pop("norm", "inf")
    if kv:
        raise ValueError(f"unexpected pgd parameters {sorted(kv)}")
    return PerturbationBudget(eps, step, steps, rs, norm, box)


def format_attack_spec(budget: PerturbationBudget) -> str:
    step = "auto" if budget.step_size == budget.epsilon / 4 else repr(budget.step_size)
    return (f"pgd:eps={budget.epsilon!r},steps={budget.num_steps},step={step},"
            f"rs={int(budget.random_start)}")
