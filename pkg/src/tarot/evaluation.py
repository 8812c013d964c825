"""Standard / robust accuracy, empirical local Lipschitz constants, checkpoint selection."""
from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field
from typing import Mapping, Optional, Sequence

import numpy as np
import torch

from .attacks import pgd, snap_to_world
from .core import DomainDataset, PerturbationBudget, Scorer, argmax_lowest, as_tensor, scores
from .losses import ce_loss

log = logging.getLogger(__name__)


class PolicyError(ValueError):
    pass


def standard_accuracy(f: Scorer, dataset: DomainDataset) -> float:
    y = dataset.require_labels()
    if len(dataset) == 0:
        raise ValueError("empty dataset")
    return float(np.mean(argmax_lowest(scores(f, dataset.inputs)) == y))


def robust_accuracy(f: Scorer, dataset: DomainDataset, attack, world=None,
                    epsilon: Optional[float] = None, seed: int = 0, snap: bool = False) -> float:
    """Fraction of samples whose prediction at the attacked point is the true label.

    ``attack`` is a PerturbationBudget (PGD on cross-entropy) or ``"exact"``
    (every world point in the ball must be classified correctly). With
    ``snap=True`` PGD outputs are snapped to the nearest world point in the
    ball, which makes them comparable with the exact search.
    """
    y = dataset.require_labels()
    if len(dataset) == 0:
        raise ValueError("empty dataset")
    if attack == "exact":
        if world is None:
            raise ValueError("exact robust accuracy requires a FiniteWorld")
        eps = world.epsilon if epsilon is None else epsilon
        pred = argmax_lowest(scores(f, world.points))
        B = world.ball_matrix(eps)
        idx = [world.index_of(x) for x in dataset.inputs]
        ok = [bool(np.all(pred[B[i]] == yi)) for i, yi in zip(idx, y)]
        return float(np.mean(ok))
    budget: PerturbationBudget = attack if epsilon is None else attack.with_epsilon(epsilon)
    if budget.epsilon == 0:
        return standard_accuracy(f, dataset)
    x_adv = pgd(f, ce_loss, dataset.inputs, y, budget, seed=seed).x_adv
    if snap:
        if world is None:
            raise ValueError("snapping requires a FiniteWorld")
        idx = [world.index_of(x) for x in dataset.inputs]
        x_adv = world.points[[snap_to_world(xa, i, world, budget.epsilon)
                              for xa, i in zip(x_adv, idx)]]
    return float(np.mean(argmax_lowest(scores(f, x_adv)) == y))


def lipschitz_per_sample(f, X, epsilon: float, steps: int = 50, step_size: Optional[float] = None,
                         restarts: int = 3, seed: int = 0, box=(0.0, 1.0)):
    """Per-sample max of ||f(x) - f(x')||_1 / ||x - x'||_inf over the L_inf ball.

    Signed-gradient ascent from ``restarts`` random starts; the best value seen
    at any iterate (or at the ball vertex in that iterate's orthant) is kept. Returns (values, valid mask); a sample is invalid
    when every iterate collapsed onto x.
    """
    if epsilon <= 0:
        raise ValueError("epsilon must be > 0")
    if steps < 1:
        raise ValueError("steps must be >= 1")
    step = epsilon / 10 if step_size is None else step_size
    x0 = as_tensor(X)
    with torch.no_grad():
        f0 = f(x0)
    lo_b, hi_b = x0 - epsilon, x0 + epsilon
    if box is not None:
        lo_b, hi_b = torch.clamp(lo_b, min=box[0]), torch.clamp(hi_b, max=box[1])
    gen = torch.Generator().manual_seed(int(seed))
    best = torch.full((len(x0),), -torch.inf, dtype=x0.dtype)

    def ratio(xp):
        num = (f(xp) - f0).abs().sum(dim=1)
        den = (xp - x0).abs().amax(dim=1)
        return num / den.clamp_min(1e-12), den

    for _ in range(restarts):
        xp = lo_b + torch.rand(x0.shape, generator=gen, dtype=x0.dtype) * (hi_b - lo_b)
        for k in range(steps + 1):
            xp = xp.detach().requires_grad_(k < steps)
            r, den = ratio(xp)
            valid = den.detach() >= 1e-12
            best = torch.where(valid & (r.detach() > best), r.detach(), best)
            with torch.no_grad():
                # the ratio is scale-free along rays, so also score the ball vertex
                # in the current orthant; signed steps tend to chatter short of it
                vx = torch.minimum(torch.maximum(x0 + epsilon * torch.sign(xp - x0), lo_b), hi_b)
                rv, dv = ratio(vx)
                best = torch.where((dv >= 1e-12) & (rv > best), rv, best)
            if k == steps:
                break
            (g,) = torch.autograd.grad(r.sum(), xp)
            xp = torch.minimum(torch.maximum(xp.detach() + step * torch.sign(g), lo_b), hi_b)
    values = best.numpy()
    return values, np.isfinite(values)


def local_lipschitz_estimate(f, X, epsilon: float, steps: int = 50,
                             step_size: Optional[float] = None, restarts: int = 3, seed: int = 0,
                             box=(0.0, 1.0)) -> float:
    """Mean over samples of the searched local Lipschitz ratio (a lower bound)."""
    values, valid = lipschitz_per_sample(f, X, epsilon, steps, step_size, restarts, seed, box)
    skipped = int((~valid).sum())
    if skipped:
        log.warning("local Lipschitz search skipped %d collapsed samples", skipped)
    if not valid.any():
        return float("nan")
    return float(values[valid].mean())


@dataclass
class EvalReport:
    standard_acc: float
    robust_acc: dict = field(default_factory=dict)
    lipschitz: Optional[float] = None
    domain_tag: str = "target"
    n_samples: int = 0
    name: str = ""
    attack_note: str = "PGD-20 (stand-in for AutoAttack)"

    def to_json(self) -> dict:
        return asdict(self)

    @classmethod
    def from_json(cls, obj: dict) -> "EvalReport":
        return cls(**obj)


def evaluate(f, dataset: DomainDataset, attacks: Mapping[str, PerturbationBudget],
             lipschitz_eps: Optional[float] = None, seed: int = 0) -> EvalReport:
    rob = {name: robust_accuracy(f, dataset, b, seed=seed) for name, b in attacks.items()}
    lip = None
    if lipschitz_eps:
        lip = local_lipschitz_estimate(f, dataset.inputs, lipschitz_eps, seed=seed)
    return EvalReport(standard_accuracy(f, dataset), rob, lip, dataset.domain_tag, len(dataset),
                      dataset.name)


def format_reports(reports: Sequence[EvalReport]) -> str:
    """Aligned table, one row per report, cells as 'standard / robust' in percent."""
    attack_names = sorted({k for r in reports for k in r.robust_acc})
    head = ["domain", "n"] + [f"std / {a}" for a in attack_names] + ["lipschitz"]
    if not attack_names:
        head.insert(2, "std")
    rows = []
    for r in reports:
        cells = [f"{r.domain_tag}:{r.name}", str(r.n_samples)]
        if not attack_names:
            cells.append(f"{100 * r.standard_acc:6.2f}")
        for a in attack_names:
            rob = r.robust_acc.get(a)
            cells.append(f"{100 * r.standard_acc:6.2f} / " +
                         ("  -  " if rob is None else f"{100 * rob:6.2f}"))
        cells.append("-" if r.lipschitz is None else f"{r.lipschitz:.3f}")
        rows.append(cells)
    widths = [max(len(str(x)) for x in col) for col in zip(head, *rows)]
    fmt = lambda cells: "  ".join(str(c).ljust(w) for c, w in zip(cells, widths))
    return "\n".join([fmt(head), fmt(["-" * w for w in widths])] + [fmt(r) for r in rows])


def select_checkpoint(history: Sequence[Mapping], policy: str = "pgd20-target",
                      key: str = "target_robust_acc") -> int:
    """Epoch id to keep. ``pgd20-target`` uses target labels (oracle selection)."""
    if not history:
        raise PolicyError("empty history")
    if policy == "last":
        return int(history[-1]["epoch"])
    if policy != "pgd20-target":
        raise PolicyError(f"unknown policy {policy!r}")
    if any(rec.get(key) is None for rec in history):
        raise PolicyError(f"history lacks {key!r} records required by the pgd20 policy")
    best = max(range(len(history)), key=lambda i: (history[i][key], i))
    return int(history[best]["epoch"])
