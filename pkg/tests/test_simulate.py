import math

import numpy as np
import pytest
from scipy import stats

from conftest import random_calibrated_tree
from sdollo.dollo import ModelParams, edge_survival, normalizer_X
from sdollo.phylotree import Phylogeny, random_tree
from sdollo.simulate import (
    apply_masking,
    lambda_for_target,
    make_bundle,
    register,
    simulate_borrowing,
    simulate_full_matrix,
)
from sdollo.traitdata import PRESENT, UNKNOWN, R1, RegistrationRule, TraitMatrix, check_registration_consistency


def long_cherry(age=20000.0):
    return Phylogeny(("A", "B"), [2, 2, -1], [0, 0, age], [0, 0, 0])


def test_zero_birth_rate_leaves_nothing_new():
    t = random_calibrated_tree(np.random.default_rng(0), 4)
    sim = simulate_full_matrix(t, ModelParams(1e-3, 0.3, 1e-4, np.ones(4), lam=0.0), 1)
    assert sim.cells.shape == (4, 0)


def test_stationary_leaf_count():
    # a leaf far below the root carries a Poisson(lambda/mu) number of classes
    p = ModelParams(1e-3, 0.0, 1e-9, [1, 1], lam=0.02)
    counts = np.array([(simulate_full_matrix(long_cherry(), p, s).cells[0] == PRESENT).sum() for s in range(4000)])
    mean = p.lam / p.mu
    assert abs(counts.mean() - mean) < 4 * math.sqrt(mean / len(counts))
    assert abs(counts.var() / mean - 1) < 0.1


def test_cherry_shared_classes():
    # classes at both leaves were at the root: lambda/mu * delta_A * delta_B on average
    t = Phylogeny(("A", "B"), [2, 2, -1], [0, 0, 700.0], [1, 0, 0])
    p = ModelParams(1e-3, 0.3, 1e-9, [1, 1], lam=0.05)
    delta = edge_survival(t, p)
    both = np.array([
        (simulate_full_matrix(t, p, s, catastrophes="tree").cells.sum(axis=0) == 2).sum() for s in range(4000)
    ])
    expected = p.lam / p.mu * delta[0] * delta[1]
    assert abs(both.mean() - expected) < 4 * math.sqrt(expected / len(both))


def test_catastrophe_mode_keeps_counts():
    t = random_calibrated_tree(np.random.default_rng(1), 5, max_cats=3)
    p = ModelParams(1e-3, 0.3, 1e-4, np.ones(5), lam=0.01)
    sim = simulate_full_matrix(t, p, 2, catastrophes="tree")
    assert np.array_equal(sim.tree.cats, t.cats)
    assert all(len(sim.cat_positions[i]) == t.cats[i] for i in sim.cat_positions)


def test_sampled_catastrophe_counts_are_poisson():
    t = random_tree(list("ABCD"), np.random.default_rng(2), 3000.0)
    p = ModelParams(1e-3, 0.3, 4e-4, np.ones(4), lam=1e-6)
    ks = np.array([simulate_full_matrix(t, p, s).tree.cats for s in range(3000)])
    lengths = t.edge_lengths()
    for i in range(t.n_nodes - 1):
        rate = p.rho * lengths[i]
        assert abs(ks[:, i].mean() - rate) < 4 * math.sqrt(rate / len(ks)) + 1e-9


def test_masking_extremes():
    full = np.random.default_rng(0).integers(0, 2, (3, 50))
    mask, masked = apply_masking(full, [1.0, 1.0, 1.0], 0)
    assert mask.all() and np.array_equal(masked, full)
    mask, masked = apply_masking(full, [1.0, 0.0, 1.0], 0)
    assert (masked[1] == UNKNOWN).all() and np.array_equal(masked[0], full[0])


def test_masking_frequency():
    full = np.zeros((2, 20000), dtype=int)
    xi = np.array([0.3, 0.8])
    mask, _ = apply_masking(full, xi, 5)
    for i in range(2):
        se = math.sqrt(xi[i] * (1 - xi[i]) / full.shape[1])
        assert abs((~mask[i]).mean() - (1 - xi[i])) < 4 * se


def test_register_drops_and_is_idempotent():
    cells = np.array([[1, 0, 0, 1, UNKNOWN], [0, 0, 1, 1, 0], [0, UNKNOWN, 0, 1, 1]])
    m = TraitMatrix(("A", "B", "C"), tuple("vwxyz"), cells)
    kept = register(m, R1)
    assert kept.classes == ("v", "x", "y", "z")
    rule = RegistrationRule.parse("1,2")
    two = register(m, rule)
    assert two.classes == ("y",)
    assert register(two, rule) == two


def test_bundle_is_consistent_with_rule(rng):
    t = random_calibrated_tree(rng, 6, root_age=4000.0)
    rule = RegistrationRule.parse("1,2,5")
    p = ModelParams(3e-4, 0.3, 1e-4, rng.uniform(0.6, 1, 6), lam=0.05)
    b = make_bundle(t, p, rule, seed=3)
    assert check_registration_consistency(b.data, rule) == []
    seen = b.mask
    assert np.array_equal(b.masked.cells[seen], b.full.cells[seen])
    assert (b.masked.cells[~seen] == UNKNOWN).all()


def test_bundle_reproducible_bytes(tmp_path, rng):
    t = random_calibrated_tree(rng, 5)
    p = ModelParams(5e-4, 0.3, 1e-4, np.full(5, 0.9), lam=0.1)
    a = make_bundle(t, p, R1, seed=42).write(tmp_path / "a")
    b = make_bundle(t, p, R1, seed=42).write(tmp_path / "b")
    for name in ("full.csv", "mask.csv", "masked.csv", "data.csv", "tree.nwk", "truth.json"):
        assert (a / name).read_bytes() == (b / name).read_bytes()


def test_registered_count_mean_is_lambda_x():
    t = random_tree([f"L{i}" for i in range(5)], np.random.default_rng(8), 3000.0)
    rule = RegistrationRule.parse("1,2")
    p = ModelParams(4e-4, 0.35, 1e-4, np.array([0.9, 0.7, 1.0, 0.8, 0.95]))
    lam = lambda_for_target(t, p, rule, 30.0)
    p = p.replace(lam=lam)
    n = []
    for s in range(1500):
        sim = simulate_full_matrix(t, p, s, catastrophes="tree")
        _, masked = apply_masking(sim.cells, p.xi, s + 10**6)
        y = (masked == PRESENT).sum(axis=0)
        q = (masked == UNKNOWN).sum(axis=0)
        n.append(int(rule.keep_mask(y, q, 5).sum()))
    n = np.array(n)
    mean = lam * normalizer_X(t, p, rule)
    assert mean == pytest.approx(30.0)
    assert abs(n.mean() - mean) < 4 * math.sqrt(mean / len(n))


def test_borrowing_zero_is_in_model(rng):
    t = random_calibrated_tree(rng, 4)
    p = ModelParams(5e-4, 0.3, 1e-4, np.ones(4), lam=0.05)
    a = simulate_borrowing(t, p, 0.0, 9)
    b = simulate_full_matrix(t, p, 9)
    assert np.array_equal(a.cells, b.cells) and a.tree == b.tree


def _agreement(cells):
    """Mean over language pairs of shared classes / classes in either."""
    L = cells.shape[0]
    out = []
    for i in range(L):
        for j in range(i + 1, L):
            either = (cells[i] | cells[j]).sum()
            out.append((cells[i] & cells[j]).sum() / either if either else 1.0)
    return float(np.mean(out))


def test_borrowing_raises_agreement():
    t = random_tree([f"L{i}" for i in range(5)], np.random.default_rng(4), 4000.0)
    p = ModelParams(3e-4, 0.3, 5e-5, np.ones(5), lam=0.02)
    rates = (0.0, 2e-4, 1e-3)
    agree = [np.mean([_agreement(simulate_borrowing(t, p, b, s).cells) for s in range(6)]) for b in rates]
    assert agree[0] < agree[1] < agree[2]


def test_borrowing_rejects_negative_rate(rng):
    t = random_calibrated_tree(rng, 3)
    with pytest.raises(ValueError):
        simulate_borrowing(t, ModelParams(1e-3, 0.0, 1e-4, np.ones(3), lam=0.1), -1.0)


def test_catastrophe_pattern_distribution_small():
    # one catastrophe on an edge looks like T_C extra years on it (a quick version)
    mu, kappa = 1e-3, 0.4
    p = ModelParams(mu, kappa, 1e-9, np.ones(3), lam=0.02)
    tc = -math.log1p(-kappa) / mu
    cat = Phylogeny(("A", "B", "C"), [3, 3, 4, 4, -1], [tc, 0, 0, 1500.0, 2500.0], [1, 0, 0, 0, 0])
    longer = cat.replace(ages=[0, 0, 0, 1500.0, 2500.0], cats=[0, 0, 0, 0, 0])
    counts = []
    for tree in (cat, longer):
        tally = np.zeros(8)
        for s in range(1500):
            cells = simulate_full_matrix(tree, p, s, catastrophes="tree").cells
            code = cells[0] * 4 + cells[1] * 2 + cells[2]
            tally += np.bincount(code, minlength=8)
        counts.append(tally[1:])
    table = np.array(counts)
    assert stats.chi2_contingency(table)[1] > 0.001
