"""Shared domain types: scorers, datasets, perturbation budgets, margin config."""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence, Union

import numpy as np
import torch
import torch.nn as nn

DTYPE = torch.float64
DOMAIN_TAGS = ("source", "target", "unseen")


class InputShapeError(ValueError):
    pass


class NumericError(ValueError):
    pass


class MissingLabelsError(ValueError):
    pass


class ComposedScorer(nn.Module):
    """Score function ``pi(psi(x))`` with an optional auxiliary head ``pi_aux``.

    ``pi_aux`` shares the hypothesis space of ``pi`` and is only used by the
    disparity term during training.
    """

    def __init__(self, psi: nn.Module, pi: nn.Module, pi_aux: Optional[nn.Module] = None,
                 n_classes: Optional[int] = None):
        super().__init__()
        self.psi = psi
        self.pi = pi
        self.pi_aux = pi_aux
        self.n_classes = n_classes

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.pi(self.psi(x))

    def features(self, x: torch.Tensor) -> torch.Tensor:
        return self.psi(x)

    def aux(self, x: torch.Tensor) -> torch.Tensor:
        if self.pi_aux is None:
            raise AttributeError("scorer has no auxiliary head")
        return self.pi_aux(self.psi(x))

    @property
    def in_features(self) -> int:
        first = next(m for m in self.psi.modules() if isinstance(m, nn.Linear))
        return first.in_features


class Standardize(nn.Module):
    """Fixed affine map (x - center) * scale, like per-channel image normalisation."""

    def __init__(self, center: float = 0.5, scale: float = 4.0):
        super().__init__()
        self.center = center
        self.scale = scale

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return (x - self.center) * self.scale


def make_mlp_scorer(d: int, n_classes: int, hidden: int = 64, with_aux: bool = True,
                    seed: int = 0, input_scale: float = 4.0) -> ComposedScorer:
    """Two-layer tanh feature extractor plus linear heads, float64.

    Inputs in [0, 1]^d are centred and scaled by ``input_scale`` first.
    Parameter initialisation only depends on ``seed``.
    """
    gen_state = torch.random.get_rng_state()
    torch.manual_seed(seed)
    try:
        psi = nn.Sequential(
            Standardize(0.5, input_scale),
            nn.Linear(d, hidden, dtype=DTYPE), nn.Tanh(),
            nn.Linear(hidden, hidden, dtype=DTYPE), nn.Tanh(),
        )
        pi = nn.Linear(hidden, n_classes, dtype=DTYPE)
        pi_aux = nn.Linear(hidden, n_classes, dtype=DTYPE) if with_aux else None
    finally:
        torch.random.set_rng_state(gen_state)
    return ComposedScorer(psi, pi, pi_aux, n_classes=n_classes)


class LookupScorer:
    """Scorer defined by a table of logits on a finite set of points.

    Calling it on points that are not in the table raises ``KeyError``.
    """

    def __init__(self, points: np.ndarray, table: np.ndarray):
        self.points = np.asarray(points, dtype=np.float64)
        self.table = np.asarray(table, dtype=np.float64)
        if self.points.ndim != 2 or self.table.ndim != 2 or len(self.points) != len(self.table):
            raise InputShapeError("points must be (m, d) and table (m, C)")
        self._index = {tuple(p): i for i, p in enumerate(self.points)}

    @property
    def n_classes(self) -> int:
        return self.table.shape[1]

    def indices(self, X: np.ndarray) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, dtype=np.float64))
        return np.array([self._index[tuple(x)] for x in X], dtype=int)

    def __call__(self, X: np.ndarray) -> np.ndarray:
        X = np.asarray(X, dtype=np.float64)
        if X is self.points:
            return self.table
        return self.table[self.indices(X)]


Scorer = Union[nn.Module, LookupScorer, Callable[[np.ndarray], np.ndarray]]


def scores(f: Scorer, X) -> np.ndarray:
    """Evaluate any supported scorer on an (n, d) batch; returns float64 (n, C)."""
    if isinstance(f, LookupScorer):
        return f(X)
    if isinstance(f, nn.Module):
        with torch.no_grad():
            xt = torch.as_tensor(np.asarray(X, dtype=np.float64), dtype=DTYPE)
            return f(xt).detach().cpu().numpy().astype(np.float64)
    return np.asarray(f(np.asarray(X, dtype=np.float64)), dtype=np.float64)


def argmax_lowest(logits: np.ndarray) -> np.ndarray:
    """Row-wise argmax; ties resolve to the lowest index (numpy's convention)."""
    return np.argmax(np.asarray(logits), axis=-1)


def predict_class(f: Scorer, x) -> int | np.ndarray:
    """Predicted class of ``f`` at ``x`` (a d-vector or an (n, d) batch)."""
    arr = np.asarray(x, dtype=np.float64)
    single = arr.ndim == 1
    batch = arr[None, :] if single else arr
    if batch.ndim != 2:
        raise InputShapeError(f"expected a vector or a 2-d batch, got shape {arr.shape}")
    d = _input_dim(f)
    if d is not None and batch.shape[1] != d:
        raise InputShapeError(f"input has dimension {batch.shape[1]}, scorer expects {d}")
    pred = argmax_lowest(scores(f, batch))
    return int(pred[0]) if single else pred


def _input_dim(f) -> Optional[int]:
    if isinstance(f, ComposedScorer):
        return f.in_features
    if isinstance(f, LookupScorer):
        return f.points.shape[1]
    if isinstance(f, nn.Linear):
        return f.in_features
    return None


def softmax_scores(logits) -> np.ndarray:
    z = np.asarray(logits, dtype=np.float64)
    if not np.all(np.isfinite(z)):
        raise NumericError("softmax of non-finite logits")
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


@dataclass(frozen=True)
class DomainDataset:
    inputs: np.ndarray
    labels: Optional[np.ndarray] = None
    domain_tag: str = "source"
    name: str = "dataset"

    def __post_init__(self):
        X = np.asarray(self.inputs, dtype=np.float64)
        if X.ndim != 2:
            raise InputShapeError("inputs must be a list of d-dimensional vectors")
        object.__setattr__(self, "inputs", X)
        if self.labels is not None:
            y = np.asarray(self.labels, dtype=np.int64)
            if y.shape != (len(X),):
                raise InputShapeError("labels must have one entry per input")
            if len(y) and y.min() < 0:
                raise ValueError("labels must be non-negative class indices")
            object.__setattr__(self, "labels", y)
        if self.domain_tag not in DOMAIN_TAGS:
            raise ValueError(f"domain_tag must be one of {DOMAIN_TAGS}")

    def __len__(self) -> int:
        return len(self.inputs)

    @property
    def dim(self) -> int:
        return self.inputs.shape[1]

    @property
    def labeled(self) -> bool:
        return self.labels is not None

    @property
    def weights(self) -> np.ndarray:
        return np.full(len(self), 1.0 / len(self))

    def require_labels(self) -> np.ndarray:
        if self.labels is None:
            raise MissingLabelsError(f"dataset {self.name!r} has no labels")
        return self.labels

    def unlabeled(self) -> "DomainDataset":
        return DomainDataset(self.inputs, None, self.domain_tag, self.name)

    def to_json(self) -> dict:
        return {
            "name": self.name,
            "domain_tag": self.domain_tag,
            "inputs": self.inputs.tolist(),
            "labels": None if self.labels is None else self.labels.tolist(),
        }

    @classmethod
    def from_json(cls, obj: dict) -> "DomainDataset":
        labels = obj.get("labels")
        return cls(np.array(obj["inputs"], dtype=np.float64),
                   None if labels is None else np.array(labels, dtype=np.int64),
                   obj.get("domain_tag", "source"), obj.get("name", "dataset"))

    def save(self, path) -> None:
        # json writes floats with repr(), which round-trips float64 exactly
        Path(path).write_text(json.dumps(self.to_json()))

    @classmethod
    def load(cls, path) -> "DomainDataset":
        return cls.from_json(json.loads(Path(path).read_text()))


@dataclass(frozen=True)
class PerturbationBudget:
    epsilon: float
    step_size: Optional[float] = None
    num_steps: int = 10
    random_start: bool = True
    norm: str = "inf"
    box: Optional[tuple] = (0.0, 1.0)

    def __post_init__(self):
        if self.epsilon < 0:
            raise ValueError("epsilon must be >= 0")
        if self.norm not in ("inf", "2"):
            raise ValueError("norm must be 'inf' or '2'")
        if self.num_steps < 1:
            raise ValueError("num_steps must be >= 1")
        if self.step_size is None:
            object.__setattr__(self, "step_size", self.epsilon / 4)
        if self.step_size < 0 or (self.epsilon > 0 and self.step_size <= 0):
            raise ValueError("step_size must be > 0")
        if self.step_size > 2 * self.epsilon + 1e-15:
            raise ValueError("step_size must not exceed 2 * epsilon")
        if self.box is not None:
            lo, hi = (np.asarray(b, dtype=np.float64) for b in self.box)
            if np.any(lo >= hi):
                raise ValueError("box requires lo < hi coordinate-wise")

    def with_epsilon(self, epsilon: float) -> "PerturbationBudget":
        scale = self.step_size / self.epsilon if self.epsilon > 0 else 0.25
        return PerturbationBudget(epsilon, epsilon * scale, self.num_steps, self.random_start,
                                  self.norm, self.box)


def training_budget(epsilon: float) -> PerturbationBudget:
    return PerturbationBudget(epsilon, epsilon / 4, num_steps=10, random_start=True)


def eval_budget(epsilon: float) -> PerturbationBudget:
    """PGD-20 evaluation attack (stand-in for AutoAttack)."""
    return PerturbationBudget(epsilon, epsilon / 4, num_steps=20, random_start=True)


@dataclass(frozen=True)
class MarginConfig:
    rho: float = math.log(4.0)
    gamma: float = field(default=None)  # type: ignore[assignment]

    def __post_init__(self):
        if self.rho <= 0:
            raise ValueError("rho must be > 0")
        if self.gamma is None:
            object.__setattr__(self, "gamma", math.exp(self.rho))
        if abs(self.gamma - math.exp(self.rho)) > 1e-12 * math.exp(self.rho):
            raise ValueError("gamma must equal exp(rho)")

    @classmethod
    def from_gamma(cls, gamma: float) -> "MarginConfig":
        if gamma <= 1:
            raise ValueError("gamma must be > 1")
        return cls(rho=math.log(gamma), gamma=gamma)


def as_tensor(X: Sequence | np.ndarray | torch.Tensor) -> torch.Tensor:
    if isinstance(X, torch.Tensor):
        return X.to(DTYPE)
    return torch.as_tensor(np.asarray(X, dtype=np.float64), dtype=DTYPE)
