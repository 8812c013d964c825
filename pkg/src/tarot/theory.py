"""Exact checks of the robust-UDA inequalities on finite worlds.

Scorers are lookup tables, so every "max over the ball" and "sup over the
class" is an exhaustive finite computation. Only the deterministic
inequalities are checked here; the probabilistic generalization bound is not,
though its ingredients (margin risks, discrepancy, local Lipschitz constant,
empirical Rademacher complexity of the derived classes) are all computable
from this module.
"""
from __future__ import annotations

import itertools
from dataclasses import asdict, dataclass, field
from functools import cached_property
from typing import Optional, Sequence

import numpy as np

from .core import LookupScorer, argmax_lowest
from .disparity import _exact_robust_01, _exact_robust_margin, margin_table, robust_mdd_exact
from .losses import phi_rho
from .synthdata import MAX_WORLD_POINTS, CapacityError, FiniteWorld, grid_points, make_finite_world

SLACK_TOL = 1e-12
MAX_RADEMACHER_N = 16
MAX_CLASS_SIZE = 256


@dataclass
class InequalityReport:
    lhs: float
    rhs: float
    terms: dict = field(default_factory=dict)

    @property
    def slack(self) -> float:
        return self.rhs - self.lhs

    @property
    def holds(self) -> bool:
        return self.slack >= -SLACK_TOL

    def to_json(self) -> dict:
        d = asdict(self)
        d["slack"] = self.slack
        return d


@dataclass
class TheoryInstance:
    world: FiniteWorld
    labels: np.ndarray
    tables: np.ndarray  # (K, n_points, C) logits
    rho: float
    target_labels: Optional[np.ndarray] = None

    def __post_init__(self):
        self.tables = np.asarray(self.tables, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.target_labels is None:
            self.target_labels = self.labels
        if self.tables.ndim != 3 or self.tables.shape[1] != len(self.world):
            raise ValueError("tables must be (K, n_points, C) over the world points")
        if len(self.tables) == 0:
            raise ValueError("hypothesis class must be nonempty")

    @property
    def epsilon(self) -> float:
        return self.world.epsilon

    @property
    def n_classes(self) -> int:
        return self.tables.shape[2]

    @property
    def size(self) -> int:
        return len(self.tables)

    @cached_property
    def scorers(self) -> list:
        return [LookupScorer(self.world.points, t) for t in self.tables]

    @cached_property
    def ball(self) -> np.ndarray:
        return self.world.ball_matrix()

    @cached_property
    def preds(self) -> np.ndarray:
        return argmax_lowest(self.tables)

    @cached_property
    def margins(self) -> np.ndarray:
        return np.stack([margin_table(t) for t in self.tables])

    def weights(self, domain: str) -> np.ndarray:
        return self.world.source_weights if domain == "source" else self.world.target_weights

    def true_labels(self, domain: str) -> np.ndarray:
        return self.labels if domain == "source" else self.target_labels

    # exact terms ------------------------------------------------------------------

    def risk01(self, k: int, domain: str) -> float:
        y = self.true_labels(domain)
        return float(np.dot(self.weights(domain), self.preds[k] != y))

    def robust_risk01(self, k: int, domain: str) -> float:
        y = self.true_labels(domain)
        wrong = self.ball & (self.preds[k][None, :] != y[:, None])
        return float(np.dot(self.weights(domain), wrong.any(axis=1)))

    def margin_risk(self, k: int, domain: str) -> float:
        y = self.true_labels(domain)
        m = self.margins[k][np.arange(len(y)), y]
        return float(np.dot(self.weights(domain), phi_rho(m, self.rho)))

    def margin_disparity(self, kp: int, k: int, domain: str) -> float:
        m = self.margins[k][np.arange(len(self.world)), self.preds[kp]]
        return float(np.dot(self.weights(domain), phi_rho(m, self.rho)))

    def robust_margin_disparity(self, kp: int, k: int, domain: str) -> float:
        idx = np.arange(len(self.world))
        v = _exact_robust_margin(self.tables[kp], self.tables[k], idx, self.ball, self.rho)
        return float(np.dot(self.weights(domain), v))

    def robust_disparity01(self, kp: int, k: int, domain: str) -> float:
        idx = np.arange(len(self.world))
        v = _exact_robust_01(self.tables[kp], self.tables[k], idx, self.ball)
        return float(np.dot(self.weights(domain), v))

    def discrepancy(self, k: int, source: str = "source", target: str = "target") -> float:
        """Robust margin disparity discrepancy sup_{f'} [rob disp on target - disp on source]."""
        pts = self.world.points
        return robust_mdd_exact(self.scorers[k], self.scorers, pts, pts, self.rho, self.world,
                                source_weights=self.weights(source),
                                target_weights=self.weights(target))

    def lipschitz(self, k: int, domain: str) -> float:
        """max over supported points and their ball of ||f(x') - f(x)||_1 / ||x' - x||_inf."""
        support = self.weights(domain) > 0
        pts, Z = self.world.points, self.tables[k]
        D = np.abs(pts[:, None, :] - pts[None, :, :]).max(axis=2)
        mask = self.ball & (D > 0) & support[:, None]
        if not mask.any():
            return 0.0
        num = np.abs(Z[:, None, :] - Z[None, :, :]).sum(axis=2)
        return float((num[mask] / D[mask]).max())

    def joint_margin_risks(self) -> np.ndarray:
        return np.array([self.margin_risk(k, "target") + self.margin_risk(k, "source")
                         for k in range(self.size)])

    def ideal(self):
        """(lowest-index minimizer, lambda, all minimizer indices) of the joint margin risk."""
        joint = self.joint_margin_risks()
        lam = float(joint.min())
        minimizers = np.flatnonzero(joint <= lam + SLACK_TOL)
        return int(minimizers[0]), lam, minimizers

    # derived function classes -------------------------------------------------------

    def pi_one_values(self) -> np.ndarray:
        """Values of {x -> f(x, y) | y, f} on the world points, shape (K*C, n)."""
        return np.concatenate([t.T for t in self.tables])

    def pi_h_values(self) -> np.ndarray:
        """Values of {x -> f(x, h(x)) | h, f} on the world points, shape (K*K, n)."""
        n = np.arange(len(self.world))
        return np.array([t[n, h] for h in self.preds for t in self.tables])


def verify_prop1(instance: TheoryInstance, f_index: int = 0) -> InequalityReport:
    """Target robust risk <= source margin risk + [robust target disparity - source
    disparity] at the ideal hypothesis + lambda."""
    k = f_index
    star, lam, minimizers = instance.ideal()

    def rhs_for(s):
        return (instance.margin_risk(k, "source")
                + instance.robust_margin_disparity(s, k, "target")
                - instance.margin_disparity(s, k, "source") + lam)

    lhs = instance.robust_risk01(k, "target")
    rhs = rhs_for(star)
    all_slacks = [rhs_for(s) - lhs for s in minimizers]
    return InequalityReport(lhs, rhs, {
        "source_margin_risk": instance.margin_risk(k, "source"),
        "target_robust_margin_disparity": instance.robust_margin_disparity(star, k, "target"),
        "source_margin_disparity": instance.margin_disparity(star, k, "source"),
        "lambda": lam,
        "f_star": star,
        "minimizers": minimizers.tolist(),
        "min_slack_all_minimizers": float(min(all_slacks)),
    })


def verify_prop2(instance: TheoryInstance, f_star: int, f_index: int = 0) -> InequalityReport:
    """Target robust risk <= robust 0-1 disparity to f* + target risk of f*."""
    lhs = instance.robust_risk01(f_index, "target")
    disp = instance.robust_disparity01(f_star, f_index, "target")
    risk = instance.risk01(f_star, "target")
    return InequalityReport(lhs, disp + risk, {"robust_disparity": disp, "target_risk_f_star": risk})


def verify_prop3(instance: TheoryInstance, f_index: int = 0) -> InequalityReport:
    """Source robust risk <= source margin risk + 2 * discrepancy
    + 2 * eps * L_f(source, eps) / rho + lambda.

    The witness ``lipschitz_only_rhs`` (source margin risk + 2 eps L / rho)
    is an upper bound that holds unconditionally and is reported alongside.
    """
    k = f_index
    _, lam, _ = instance.ideal()
    margin_s = instance.margin_risk(k, "source")
    d = instance.discrepancy(k)
    L = instance.lipschitz(k, "source")
    lip_term = 2 * instance.epsilon * L / instance.rho
    lhs = instance.robust_risk01(k, "source")
    rhs = margin_s + 2 * d + lip_term + lam
    return InequalityReport(lhs, rhs, {
        "source_margin_risk": margin_s, "discrepancy": d, "lipschitz": L,
        "lipschitz_term": lip_term, "lambda": lam,
        "lipschitz_only_rhs": margin_s + lip_term,
    })


def verify_disp_risk_lemma(instance: TheoryInstance, f_index: int, f_prime_index: int,
                           domain: str = "source") -> InequalityReport:
    """Margin disparity(f', f) <= margin risk(f') + margin risk(f) on one domain."""
    lhs = instance.margin_disparity(f_prime_index, f_index, domain)
    rf = instance.margin_risk(f_index, domain)
    rfp = instance.margin_risk(f_prime_index, domain)
    return InequalityReport(lhs, rf + rfp, {"margin_risk_f": rf, "margin_risk_f_prime": rfp})


def empirical_rademacher(function_class, samples: Optional[Sequence] = None) -> float:
    """E_sigma sup_f (1/n) sum_i sigma_i f(z_i), enumerating all 2^n sign vectors.

    ``function_class`` is a (K, n) array of function values, or a list of
    callables evaluated on ``samples``.
    """
    if samples is None:
        V = np.atleast_2d(np.asarray(function_class, dtype=np.float64))
    else:
        V = np.array([[float(g(z)) for z in samples] for g in function_class])
    n = V.shape[1]
    if n > MAX_RADEMACHER_N:
        raise CapacityError(f"exhaustive Rademacher limited to n <= {MAX_RADEMACHER_N}")
    if n == 0 or len(V) == 0:
        raise ValueError("need at least one function and one sample")
    if len(np.unique(V, axis=0)) == 1:
        return 0.0  # sign vectors cancel in pairs; skip the float residue
    sigma = np.array(list(itertools.product((-1.0, 1.0), repeat=n)))
    return float((sigma @ V.T).max(axis=1).mean() / n)


@dataclass(frozen=True)
class TheorySizes:
    dims: tuple = (1, 2)
    grid_1d: tuple = (2, 12)
    grid_2d: tuple = (2, 5)
    class_size: tuple = (1, 8)
    n_classes: tuple = (2, 3)
    rho: tuple = (0.1, 2.0)
    logit_range: float = 2.0
    independent_labels: bool = False


def random_instance(seed: int, sizes: TheorySizes = TheorySizes()) -> TheoryInstance:
    """Deterministic random instance: lookup-table scorers with logits in
    [-2, 2], strictly positive distributions, rho in [0.1, 2], epsilon drawn
    from the world's distance spectrum."""
    rng = np.random.default_rng(seed)
    d = int(rng.choice(sizes.dims))
    lo, hi = sizes.grid_1d if d == 1 else sizes.grid_2d
    g = int(rng.integers(lo, hi + 1))
    if g ** d > MAX_WORLD_POINTS or sizes.class_size[1] > MAX_CLASS_SIZE:
        raise CapacityError("instance exceeds oracle capacity")
    C = int(rng.integers(sizes.n_classes[0], sizes.n_classes[1] + 1))
    K = int(rng.integers(sizes.class_size[0], sizes.class_size[1] + 1))
    world = make_finite_world(d, g, 0.0, seed=int(rng.integers(2 ** 31)))
    eps = float(rng.choice(world.distance_spectrum()))
    world = world.with_epsilon(eps)
    n = len(world)
    labels = rng.integers(0, C, n)
    target = rng.integers(0, C, n) if sizes.independent_labels else None
    r = sizes.logit_range
    tables = rng.uniform(-r, r, (K, n, C))
    rho = float(rng.uniform(*sizes.rho))
    return TheoryInstance(world, labels, tables, rho, target)


def check_instances(n: int, seed: int = 0, sizes: TheorySizes = TheorySizes(),
                    all_members: bool = True) -> dict:
    """Run every verifier on ``n`` random instances; JSON-ready summary."""
    names = ("prop1", "prop2", "prop3", "disp_risk_lemma")
    min_slack = {k: float("inf") for k in names}
    failures = []
    for i in range(n):
        s = seed + i
        inst = random_instance(s, sizes)
        members = range(inst.size) if all_members else [0]
        for k in members:
            reports = {
                "prop1": verify_prop1(inst, k),
                "prop2": verify_prop2(inst, int((k + 1) % inst.size), k),
                "prop3": verify_prop3(inst, k),
                "disp_risk_lemma": verify_disp_risk_lemma(inst, k, int((k + 1) % inst.size)),
            }
            p1_all = reports["prop1"].terms["min_slack_all_minimizers"]
            for name, rep in reports.items():
                slack = min(rep.slack, p1_all) if name == "prop1" else rep.slack
                min_slack[name] = min(min_slack[name], slack)
                if slack < -SLACK_TOL:
                    failures.append({"proposition": name, "seed": s, "f_index": k,
                                     "slack": slack, "terms": rep.terms})
    return {"checked": n, "min_slack": min_slack, "failures": failures,
            "note": "deterministic inequalities only; the probabilistic generalization bound "
                    "is not verified"}
