import logging

import numpy as np
import pytest
import torch
from hypothesis import given, strategies as st

from tarot.core import DomainDataset, LookupScorer, PerturbationBudget, eval_budget, make_mlp_scorer
from tarot.evaluation import (EvalReport, PolicyError, evaluate, format_reports,
                              lipschitz_per_sample, local_lipschitz_estimate, robust_accuracy,
                              select_checkpoint, standard_accuracy)
from tarot.synthdata import make_finite_world

from conftest import linear_scorer


def test_standard_accuracy_examples():
    X = np.array([[0.1], [0.2], [0.8], [0.9]])
    y = np.array([0, 0, 1, 1])
    perfect = LookupScorer(X, np.eye(2)[y])
    assert standard_accuracy(perfect, DomainDataset(X, y)) == 1.0
    const = LookupScorer(X, np.tile([1.0, 0.0], (4, 1)))
    assert standard_accuracy(const, DomainDataset(X, y)) == 0.5
    X50 = np.arange(50, dtype=float)[:, None]
    pred = np.r_[np.zeros(45, int), np.ones(5, int)]
    assert standard_accuracy(LookupScorer(X50, np.eye(2)[pred]), DomainDataset(X50, np.zeros(50, int))) == 0.9
    with pytest.raises(ValueError):
        standard_accuracy(perfect, DomainDataset(np.zeros((0, 1)), np.zeros(0, int)))


def test_robust_accuracy_zero_epsilon():
    f = make_mlp_scorer(2, 2, hidden=8, seed=0)
    rng = np.random.default_rng(0)
    ds = DomainDataset(rng.random((40, 2)), rng.integers(0, 2, 40))
    assert robust_accuracy(f, ds, PerturbationBudget(0.0)) == standard_accuracy(f, ds)
    assert robust_accuracy(f, ds, eval_budget(0.1), epsilon=0.0) == standard_accuracy(f, ds)


def _threshold(points, t):
    z = 50.0 * (points[:, 0] - t)
    return LookupScorer(points, np.stack([-z, z], axis=1))


def test_exact_robust_accuracy_threshold():
    w = make_finite_world(1, 11, 0.2, seed=0)  # 0, .1, ..., 1
    f = _threshold(w.points, 0.55)
    y = (w.points[:, 0] > 0.55).astype(int)
    ok_points = np.abs(w.points[:, 0] - 0.55) > 0.2 + 1e-9
    ds = DomainDataset(w.points, y)
    assert robust_accuracy(f, ds, "exact", world=w) == pytest.approx(ok_points.mean())
    for i in np.flatnonzero(~ok_points):
        single = DomainDataset(w.points[i:i + 1], y[i:i + 1])
        assert robust_accuracy(f, single, "exact", world=w) == 0.0
    with pytest.raises(ValueError):
        robust_accuracy(f, ds, "exact")


@given(st.integers(0, 10_000))
def test_exact_robust_accuracy_nonincreasing(seed):
    rng = np.random.default_rng(seed)
    d = int(rng.integers(1, 3))
    w = make_finite_world(d, int(rng.integers(3, 8 if d == 2 else 15)), 0.0, seed)
    f = LookupScorer(w.points, rng.uniform(-1, 1, (len(w), 3)))
    ds = DomainDataset(w.points, rng.integers(0, 3, len(w)))
    grid = w.distance_spectrum()
    accs = [robust_accuracy(f, ds, "exact", world=w, epsilon=e) for e in grid]
    assert accs[0] == standard_accuracy(f, ds)
    assert all(b <= a for a, b in zip(accs, accs[1:]))


def test_snapped_pgd_never_beats_exact():
    w = make_finite_world(2, 8, 0.15, seed=0)
    for seed in range(5):
        f = make_mlp_scorer(2, 2, hidden=8, seed=seed)
        y = np.random.default_rng(seed).integers(0, 2, len(w))
        ds = DomainDataset(w.points, y)
        exact = robust_accuracy(f, ds, "exact", world=w)
        pgd_acc = robust_accuracy(f, ds, eval_budget(0.15), world=w, snap=True, seed=seed)
        assert pgd_acc >= exact


def test_lipschitz_linear_single_row():
    f = linear_scorer([[1.0, -2.0]])
    X = np.random.default_rng(0).uniform(0.3, 0.7, (10, 2))
    vals, valid = lipschitz_per_sample(f, X, 0.05)
    assert valid.all()
    np.testing.assert_allclose(vals, 3.0, rtol=1e-9)
    assert local_lipschitz_estimate(f, X, 0.05) == pytest.approx(3.0, rel=1e-9)


def test_lipschitz_constant_and_homogeneity():
    const = linear_scorer([[0.0, 0.0], [0.0, 0.0]])
    X = np.random.default_rng(1).random((5, 2))
    assert local_lipschitz_estimate(const, X, 0.1) == 0.0
    f = make_mlp_scorer(2, 3, hidden=8, seed=1)
    base = local_lipschitz_estimate(f, X, 0.1, seed=3)
    for c in (2.0, -0.5):
        scaled = lambda x, c=c: c * f(x)
        assert local_lipschitz_estimate(scaled, X, 0.1, seed=3) == pytest.approx(abs(c) * base, rel=1e-6)


def test_lipschitz_best_so_far_monotone():
    f = make_mlp_scorer(2, 2, hidden=16, seed=2)
    X = np.random.default_rng(2).random((12, 2))
    a, _ = lipschitz_per_sample(f, X, 0.1, steps=5, restarts=1, seed=4)
    b, _ = lipschitz_per_sample(f, X, 0.1, steps=5, restarts=3, seed=4)
    c, _ = lipschitz_per_sample(f, X, 0.1, steps=1, restarts=1, seed=4)
    assert np.all(b >= a) and np.all(a >= c)


def test_lipschitz_preconditions_and_collapse(caplog):
    f = linear_scorer([[1.0, 0.0]])
    with pytest.raises(ValueError):
        local_lipschitz_estimate(f, np.zeros((1, 2)), 0.0)
    with pytest.raises(ValueError):
        local_lipschitz_estimate(f, np.zeros((1, 2)), 0.1, steps=0)
    # a box that pins every point: every iterate collapses onto x
    with caplog.at_level(logging.WARNING):
        v = local_lipschitz_estimate(f, np.zeros((3, 2)), 0.1, box=(0.0, 0.0 + 1e-300))
    assert np.isnan(v) or v >= 0
    vals, valid = lipschitz_per_sample(f, np.zeros((2, 2)), 0.1, box=(0.0, 5e-324))
    assert not valid.any()


def test_select_checkpoint():
    mono = [{"epoch": e, "target_robust_acc": 0.1 * e} for e in range(1, 6)]
    assert select_checkpoint(mono) == 5
    assert select_checkpoint(mono[:1]) == 1
    peak = [{"epoch": e, "target_robust_acc": a} for e, a in enumerate([0.1, 0.3, 0.6, 0.4, 0.2], 1)]
    assert select_checkpoint(peak) == 3
    tie = [{"epoch": 1, "target_robust_acc": 0.5}, {"epoch": 2, "target_robust_acc": 0.5}]
    assert select_checkpoint(tie) == 2
    assert select_checkpoint(peak, "last") == 5
    with pytest.raises(PolicyError):
        select_checkpoint([])
    with pytest.raises(PolicyError):
        select_checkpoint([{"epoch": 1}])
    with pytest.raises(PolicyError):
        select_checkpoint(peak, "best-source")


def test_evaluate_report_and_table():
    f = make_mlp_scorer(2, 2, hidden=8, seed=0)
    rng = np.random.default_rng(0)
    ds = DomainDataset(rng.random((30, 2)), rng.integers(0, 2, 30), "target", "toy")
    rep = evaluate(f, ds, {"pgd20": eval_budget(0.05)}, lipschitz_eps=0.05)
    assert rep.n_samples == 30 and rep.domain_tag == "target" and rep.lipschitz > 0
    assert 0 <= rep.robust_acc["pgd20"] <= 1
    assert EvalReport.from_json(rep.to_json()) == rep
    table = format_reports([rep])
    assert "std / pgd20" in table and f"{100 * rep.standard_acc:6.2f}" in table
    assert "std" in format_reports([evaluate(f, ds, {})])
