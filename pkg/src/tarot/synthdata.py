"""Deterministic synthetic domain shifts and finite worlds for the exact oracle."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .core import DomainDataset

MAX_WORLD_POINTS = 4096
BALL_TOL = 1e-12
SHIFT_KINDS = ("rotation", "translation", "scale", "noise")


class CapacityError(ValueError):
    pass


@dataclass(frozen=True)
class ShiftSpec:
    kind: str = "rotation"
    magnitude: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.kind not in SHIFT_KINDS:
            raise ValueError(f"unknown shift kind {self.kind!r}; expected one of {SHIFT_KINDS}")


def _raw_two_moons(n: int, noise_sd: float, rng: np.random.Generator):
    n0 = n // 2
    n1 = n - n0
    t0 = rng.uniform(0.0, np.pi, n0)
    t1 = rng.uniform(0.0, np.pi, n1)
    upper = np.column_stack([np.cos(t0), np.sin(t0)])
    lower = np.column_stack([1.0 - np.cos(t1), 0.5 - np.sin(t1)])
    X = np.vstack([upper, lower])
    y = np.concatenate([np.zeros(n0, dtype=np.int64), np.ones(n1, dtype=np.int64)])
    X = X + noise_sd * rng.standard_normal(X.shape)
    perm = rng.permutation(n)
    return X[perm], y[perm]


def _normalizer(X: np.ndarray):
    """Affine map sending the centroid to (0.5, 0.5) and the data's enclosing
    disc into [0, 1]^2, so every rotation about the centroid stays in the box."""
    c = X.mean(axis=0)
    radius = np.sqrt(((X - c) ** 2).sum(axis=1)).max() * 1.02
    return c, radius


def _apply(X, c, radius):
    return (X - c) / (2.0 * radius) + 0.5


def _rotate(X, c, deg):
    if deg % 360 == 0:
        return X
    a = np.deg2rad(deg)
    R = np.array([[np.cos(a), -np.sin(a)], [np.sin(a), np.cos(a)]])
    return c + (X - c) @ R.T


def _shift(X, c, spec: ShiftSpec):
    if spec.kind == "rotation":
        return _rotate(X, c, spec.magnitude)
    if spec.kind == "translation":
        return X + np.array([spec.magnitude, 0.0])
    if spec.kind == "scale":
        return c + (X - c) * spec.magnitude
    rng = np.random.default_rng(spec.seed)
    return X + spec.magnitude * rng.standard_normal(X.shape)


def make_two_moons_shift(n_per_domain: int, rotation_deg: float = 0.0, noise_sd: float = 0.1,
                         seed: int = 0):
    """Source = two moons; target = the same sample rotated about its centroid.

    Both domains go through one shared affine map into [0, 1]^2.
    """
    if n_per_domain < 4:
        raise ValueError("n_per_domain must be >= 4")
    if noise_sd < 0:
        raise ValueError("noise_sd must be >= 0")
    src, tgt = make_shifted_pair(n_per_domain, ShiftSpec("rotation", rotation_deg, seed),
                                 noise_sd, seed)
    return src, tgt


def make_shifted_pair(n: int, shift: ShiftSpec, noise_sd: float = 0.1, seed: int = 0,
                      names=("two_moons", None)):
    rng = np.random.default_rng(seed)
    X, y = _raw_two_moons(n, noise_sd, rng)
    c, radius = _normalizer(X)
    Xt = _shift(X, c, shift)
    src = np.clip(_apply(X, c, radius), 0.0, 1.0)
    tgt = _apply(Xt, c, radius)
    if shift.kind in ("translation", "scale", "noise"):
        tgt = np.clip(tgt, 0.0, 1.0)
    tname = names[1] or f"two_moons[{shift.kind}={shift.magnitude:g}]"
    return (DomainDataset(src, y, "source", names[0]),
            DomainDataset(tgt, y.copy(), "target", tname))


def make_domain(n: int, shift: Optional[ShiftSpec] = None, noise_sd: float = 0.1, seed: int = 0,
                domain_tag: str = "source", name: Optional[str] = None) -> DomainDataset:
    """One shifted two-moons domain (labels included)."""
    shift = shift or ShiftSpec("rotation", 0.0, seed)
    _, tgt = make_shifted_pair(n, shift, noise_sd, seed)
    return DomainDataset(tgt.inputs, tgt.labels, domain_tag, name or tgt.name)


_KEYS = {"rot": "rotation", "trans": "translation", "scale": "scale", "jitter": "noise"}


def parse_dataset_spec(text: str, domain_tag: str = "source", seed_offset: int = 0) -> DomainDataset:
    """Build a dataset from e.g. ``two_moons:rot=30,noise=0.1,n=500,seed=3``.

    Shift keys: rot (degrees), trans, scale, jitter. At most one shift key.
    """
    name, _, params = text.partition(":")
    if name != "two_moons":
        raise ValueError(f"unknown generator {name!r}")
    kv = {}
    for item in filter(None, (p.strip() for p in params.split(","))):
        k, _, v = item.partition("=")
        kv[k.strip()] = v.strip()
    n = int(kv.pop("n", 500))
    noise = float(kv.pop("noise", 0.1))
    seed = int(kv.pop("seed", 0)) + seed_offset
    shifts = [k for k in kv if k in _KEYS]
    unknown = [k for k in kv if k not in _KEYS]
    if unknown:
        raise ValueError(f"unknown dataset parameters {unknown}")
    if len(shifts) > 1:
        raise ValueError("at most one shift per dataset spec")
    if shifts:
        k = shifts[0]
        shift = ShiftSpec(_KEYS[k], float(kv[k]), seed)
    else:
        shift = ShiftSpec("rotation", 0.0, seed)
    return make_domain(n, shift, noise, seed, domain_tag, name=text)


@dataclass(frozen=True)
class FiniteWorld:
    points: np.ndarray
    source_weights: np.ndarray
    target_weights: np.ndarray
    epsilon: float
    ball_map: tuple

    def __len__(self) -> int:
        return len(self.points)

    def distances(self, i: int) -> np.ndarray:
        return np.abs(self.points - self.points[i]).max(axis=1)

    def ball(self, i: int, epsilon: Optional[float] = None) -> np.ndarray:
        if epsilon is None or epsilon == self.epsilon:
            return self.ball_map[i]
        return np.flatnonzero(self.distances(i) <= epsilon + BALL_TOL)

    def ball_matrix(self, epsilon: Optional[float] = None) -> np.ndarray:
        eps = self.epsilon if epsilon is None else epsilon
        D = np.abs(self.points[:, None, :] - self.points[None, :, :]).max(axis=2)
        return D <= eps + BALL_TOL

    def distance_spectrum(self) -> np.ndarray:
        D = np.abs(self.points[:, None, :] - self.points[None, :, :]).max(axis=2)
        return np.unique(np.round(D, 12))

    def with_epsilon(self, epsilon: float) -> "FiniteWorld":
        return FiniteWorld(self.points, self.source_weights, self.target_weights, epsilon,
                           _ball_map(self.points, epsilon))

    def with_weights(self, source_weights, target_weights) -> "FiniteWorld":
        s = np.asarray(source_weights, dtype=np.float64)
        t = np.asarray(target_weights, dtype=np.float64)
        return FiniteWorld(self.points, s / s.sum(), t / t.sum(), self.epsilon, self.ball_map)

    def index_of(self, x) -> int:
        hits = np.flatnonzero(np.all(self.points == np.asarray(x, dtype=np.float64), axis=1))
        if len(hits) == 0:
            raise KeyError(f"{x} is not a world point")
        return int(hits[0])


def _ball_map(points: np.ndarray, epsilon: float) -> tuple:
    # tolerance absorbs grid rounding, e.g. 1 - 0.5 vs 0.5
    return tuple(np.flatnonzero(np.abs(points - p).max(axis=1) <= epsilon + BALL_TOL)
                 for p in points)


def grid_points(d: int, per_axis: int) -> np.ndarray:
    axis = np.linspace(0.0, 1.0, per_axis)
    mesh = np.meshgrid(*([axis] * d), indexing="ij")
    return np.column_stack([m.ravel() for m in mesh])


def make_finite_world(d: int, grid_points_per_axis: int, epsilon: float, seed: int = 0) -> FiniteWorld:
    if d not in (1, 2):
        raise ValueError("d must be 1 or 2")
    if grid_points_per_axis < 2:
        raise ValueError("grid_points_per_axis must be >= 2")
    if grid_points_per_axis ** d > MAX_WORLD_POINTS:
        raise CapacityError(f"world with {grid_points_per_axis ** d} points exceeds "
                            f"{MAX_WORLD_POINTS}; the oracle is exhaustive")
    if epsilon < 0:
        raise ValueError("epsilon must be >= 0")
    pts = grid_points(d, grid_points_per_axis)
    rng = np.random.default_rng(seed)
    ws = rng.uniform(0.05, 1.0, len(pts))
    wt = rng.uniform(0.05, 1.0, len(pts))
    return FiniteWorld(pts, ws / ws.sum(), wt / wt.sum(), float(epsilon), _ball_map(pts, epsilon))
