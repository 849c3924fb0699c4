import math
from collections import Counter

import numpy as np
import pytest
from scipy import stats

from sdollo.dollo import ModelParams, Posterior, catastrophe_log_prior, edge_survival
from sdollo.mcmc import (
    ChainConfig,
    Sampler,
    _TreeContext,
    cat_shift_log_ratio,
    constrained_upgma,
    ess_geyer,
    initial_state,
    propose_age_slide,
    propose_cat_birth_death,
    propose_cat_shift,
    propose_scale,
    propose_scalar,
    propose_spr,
    read_trace,
    run_chain,
)
from sdollo.phylotree import Calibration, CalibrationSet, Phylogeny, mrca, random_tree, validate
from sdollo.simulate import make_bundle
from sdollo.traitdata import R1, RegistrationRule

NO_CALS = CalibrationSet((), 16000.0)


def balanced() -> Phylogeny:
    # ((A,B)e4,(C,D)e5)root
    return Phylogeny(tuple("ABCD"), [4, 4, 5, 5, 6, 6, -1], [0, 0, 0, 0, 300, 500, 900], [2, 0, 1, 0, 0, 1, 0])


class Scripted:
    """Stand-in generator that replays chosen draws."""

    def __init__(self, ints=(), uniforms=(), randoms=()):
        self.ints = list(ints)
        self.uniforms = list(uniforms)
        self.randoms = list(randoms)

    def integers(self, n):
        v = self.ints.pop(0)
        if not 0 <= v < n:
            raise IndexError
        return v

    def uniform(self, lo, hi):
        return self.uniforms.pop(0)

    def random(self):
        return self.randoms.pop(0)


def _proposal_table(propose, tree, n, seed):
    rng = np.random.default_rng(seed)
    params = ModelParams(1e-3, 0.3, 1e-4, np.ones(tree.n_leaves))
    counts, log_h = Counter(), {}
    for _ in range(n):
        prop = propose(tree, params, rng)
        if prop is None:
            continue
        key = tuple(prop.tree.cats)
        counts[key] += 1
        log_h[key] = prop.log_hastings
    return counts, log_h


@pytest.mark.parametrize("propose", [propose_cat_birth_death, propose_cat_shift])
def test_catastrophe_moves_balance_their_proposals(propose):
    # q(s -> s') exp(log_h) must equal q(s' -> s); checked on empirical frequencies
    tree = balanced()
    n = 20000
    fwd, log_h = _proposal_table(propose, tree, n, 1)
    for key, c in fwd.items():
        other = tree.replace(cats=np.array(key))
        back, back_h = _proposal_table(propose, other, n, 2)
        origin = tuple(tree.cats)
        assert back_h[origin] == pytest.approx(-log_h[key])
        q_fwd, q_back = c / n, back[origin] / n
        se = math.sqrt(q_back / n) + math.sqrt(q_fwd / n) * math.exp(log_h[key])
        assert abs(q_fwd * math.exp(log_h[key]) - q_back) < 4 * se


def test_cat_shift_ratio_by_hand():
    t = balanced()
    # edge A has neighbours B and AB; edge AB has neighbours CD, A, B
    assert cat_shift_log_ratio(t, 0, 4) == pytest.approx(math.log(2 * 1) - math.log(3 * 2))
    # edge CD (k=1) to C (k=1): neighbours 3 and 2
    assert cat_shift_log_ratio(t, 5, 2) == pytest.approx(math.log(3 * 2) - math.log(2 * 1))


def test_cat_moves_skip_when_nothing_to_remove():
    t = balanced().replace(cats=np.zeros(7, dtype=int))
    p = ModelParams(1e-3, 0.3, 1e-4, np.ones(4))
    assert propose_cat_shift(t, p, np.random.default_rng(0)) is None
    assert propose_cat_birth_death(t, p, Scripted(randoms=[0.9])) is None


def _ctx(cals=NO_CALS, labels=tuple("ABCD"), **scales):
    sc = dict(ChainConfig().scales)
    sc.update(scales)
    return _TreeContext(cals, labels, sc)


def _draw_for(tree, x):
    return x if x < tree.root else x - 1


def test_spr_reverse_move_recovers_state():
    rng = np.random.default_rng(5)
    ctx = _ctx(labels=tuple(f"x{i}" for i in range(6)))
    p = ModelParams(1e-3, 0.3, 1e-4, np.ones(6))
    checked = 0
    while checked < 40:
        t = random_tree([f"x{i}" for i in range(6)], rng, 2000.0)
        x = int(rng.integers(t.n_nodes - 1))
        j = int(rng.integers(t.n_nodes))
        u = float(rng.random())
        node = x if x < t.root else x + 1
        par = int(t.parent[node])
        try:
            fwd = propose_spr(t, p, _HeightAt(x, j, u), ctx)
        except IndexError:
            continue
        if fwd is None:
            continue
        new = fwd.tree
        moved = mrca(new, t.clade(node))
        back = None
        for k in range(new.n_nodes):
            try:
                prop = propose_spr(new, p, Scripted([_draw_for(new, moved), k], [float(t.ages[par])]), ctx)
            except IndexError:
                break
            if prop is not None and prop.tree == t:
                back = prop
                break
        assert back is not None
        assert back.log_hastings == pytest.approx(-fwd.log_hastings, abs=1e-12)
        checked += 1


class _HeightAt(Scripted):
    """Scripted draws whose uniform lands a fraction ``u`` of the way up the interval."""

    def __init__(self, x, j, u):
        super().__init__([x, j])
        self.u = u

    def uniform(self, lo, hi):
        return lo + self.u * (hi - lo)


def test_spr_refuses_edges_with_catastrophes():
    t = balanced()
    p = ModelParams(1e-3, 0.3, 1e-4, np.ones(4))
    # pruning C removes node 5, whose edge carries a catastrophe
    assert propose_spr(t, p, Scripted([2]), _ctx()) is None


def test_scale_keeps_survival_and_catastrophe_prior():
    rng = np.random.default_rng(3)
    t = random_tree(list("ABCDE"), rng, 3000.0).replace(cats=[1, 0, 2, 0, 1, 0, 1, 0, 0])
    p = ModelParams(4e-4, 0.3, 1e-4, np.ones(5))
    prop = propose_scale(t, p, Scripted(randoms=[0.9]), _ctx(labels=tuple("ABCDE")))
    s = prop.tree.root_age / t.root_age
    assert s != pytest.approx(1.0)
    assert np.allclose(edge_survival(prop.tree, prop.params), edge_survival(t, p), rtol=1e-12)
    # Poisson terms depend on rho * length, unchanged; only the 1/(mu rho) scale prior moves
    assert catastrophe_log_prior(prop.tree, prop.params.rho) == pytest.approx(catastrophe_log_prior(t, p.rho))
    assert prop.log_hastings == pytest.approx((t.n_leaves - 1 - 2) * math.log(s))


def test_scale_identity_at_unit_factor():
    t = balanced()
    p = ModelParams(1e-3, 0.3, 1e-4, np.ones(4))
    prop = propose_scale(t, p, Scripted(randoms=[0.5]), _ctx())
    assert prop.tree == t and prop.params == p and prop.log_hastings == 0.0


def test_age_slide_stays_between_neighbours():
    t = balanced()
    p = ModelParams(1e-3, 0.3, 1e-4, np.ones(4))
    rng = np.random.default_rng(0)
    for _ in range(300):
        prop = propose_age_slide(t, p, rng, _ctx())
        if prop is not None:
            assert validate(prop.tree, NO_CALS) == []
            assert prop.log_hastings == 0.0


def test_age_slide_respects_clade_bounds():
    cal = Calibration("clade", frozenset("AB"), 250.0, 350.0, "ab")
    cals = CalibrationSet((cal,), 16000.0)
    t = balanced()
    rng = np.random.default_rng(1)
    p = ModelParams(1e-3, 0.3, 1e-4, np.ones(4))
    for _ in range(300):
        prop = propose_age_slide(t, p, rng, _ctx(cals))
        if prop is not None:
            assert 250.0 < prop.tree.ages[mrca(prop.tree, "AB")] < 350.0


def test_scalar_moves_stay_in_range():
    t = balanced()
    p = ModelParams(1e-3, 0.9, 1e-4, np.array([0.5, 1.0, 0.99, 0.2]))
    rng = np.random.default_rng(2)
    ctx = _ctx()
    for _ in range(500):
        for which in ("mu", "rho", "kappa", "xi"):
            prop = propose_scalar(t, p, rng, ctx, which)
            if prop is None:
                continue
            q = prop.params
            assert q.mu > 0 and q.rho > 0 and 0 <= q.kappa < 1
            assert ((q.xi > 0) & (q.xi <= 1)).all()
            assert q.xi[1] == 1.0
    with pytest.raises(ValueError):
        propose_scalar(t, p, rng, ctx, "lambda")


def test_xi_move_jacobian():
    t = balanced()
    p = ModelParams(1e-3, 0.3, 1e-4, np.array([0.5, 1.0, 1.0, 1.0]))
    prop = propose_scalar(t, p, Scripted([0], randoms=[0.75]), _ctx(), "xi")
    c = math.exp(0.6 * 0.25)
    assert prop.params.xi[0] == pytest.approx(1 - c * 0.5)
    assert prop.log_hastings == pytest.approx(math.log(c))


def test_ess_of_independent_and_ar1():
    rng = np.random.default_rng(0)
    n = 100_000
    assert ess_geyer(rng.normal(size=n)) == pytest.approx(n, rel=0.05)
    phi = 0.6
    x = np.zeros(n)
    e = rng.normal(size=n)
    for t in range(1, n):
        x[t] = phi * x[t - 1] + e[t]
    assert ess_geyer(x) == pytest.approx(n * (1 - phi) / (1 + phi), rel=0.1)


def test_ess_short_and_constant():
    assert ess_geyer([1.0, 2.0]) == 2.0
    assert ess_geyer(np.ones(50)) == 50.0


def test_config_validation_and_round_trip():
    with pytest.raises(ValueError, match="unknown moves"):
        ChainConfig(weights={"teleport": 1.0})
    with pytest.raises(ValueError):
        ChainConfig(iterations=0)
    with pytest.raises(ValueError):
        ChainConfig(weights={m: 0.0 for m in ChainConfig().weights})
    cfg = ChainConfig(iterations=50, thin=5, seed=3, weights={"spr": 0.0}, rho_bounds=(1e-8, 1e-3))
    assert ChainConfig.from_dict(cfg.to_dict()) == cfg
    with pytest.raises(ValueError, match="unknown chain config"):
        ChainConfig.from_dict({"iters": 5})


def _small_bundle(seed=0, n_leaves=5):
    rng = np.random.default_rng(seed)
    tree = random_tree([f"L{i}" for i in range(n_leaves)], rng, 3000.0)
    p = ModelParams(4e-4, 0.3, 1e-4, np.full(n_leaves, 0.9), lam=0.2)
    return make_bundle(tree, p, R1, seed=seed)


def test_upgma_never_breaks_calibrated_clade():
    b = _small_bundle()
    cal = Calibration("clade", frozenset(["L0", "L3"]), 100.0, 2500.0, "odd")
    cals = CalibrationSet((cal,), 16000.0)
    parent, _ = constrained_upgma(b.data, cals)
    tree = Phylogeny(b.data.languages, parent, np.concatenate([np.zeros(5), np.arange(1, 5)]), np.zeros(9, int))
    assert tree.clade(mrca(tree, ["L0", "L3"])) == frozenset(["L0", "L3"])


def test_initial_state_satisfies_calibrations():
    b = _small_bundle(1)
    cals = CalibrationSet(
        (
            Calibration("clade", frozenset(["L1", "L2"]), 500.0, 900.0, "pair"),
            Calibration("leaf", frozenset(["L4"]), 100.0, 300.0, "old"),
        ),
        8000.0,
    )
    tree, params = initial_state(b.data, R1, cals, ChainConfig())
    assert validate(tree, cals) == []
    assert math.isfinite(Posterior(b.data, R1, cals)(tree, params))


def test_chain_reproducible_and_consistent(tmp_path):
    b = _small_bundle(2)
    cfg = ChainConfig(iterations=3000, thin=50, seed=11, check_every=100)
    a = run_chain(b.data, R1, NO_CALS, cfg)
    c = run_chain(b.data, R1, NO_CALS, cfg)
    assert a.logpost == c.logpost and a.trees == c.trees
    assert sum(s.proposed for s in a.stats.values()) == 3000
    # the recorded value is the full posterior at the recorded state
    post = Posterior(b.data, R1, NO_CALS)
    last = ModelParams(a.mu[-1], a.kappa[-1], a.rho[-1], a.xi[-1])
    assert post(a.trees[-1], last) == pytest.approx(a.logpost[-1], rel=1e-10)
    a.write(tmp_path / "run")
    back = read_trace(tmp_path / "run")
    assert back.trees == a.trees and back.logpost == a.logpost and back.k_total == a.k_total
    assert all(np.array_equal(x, y) for x, y in zip(back.xi, a.xi))
    assert {m: s.accepted for m, s in back.stats.items()} == {m: s.accepted for m, s in a.stats.items()}


def test_check_catches_drift():
    b = _small_bundle(3)
    s = Sampler(b.data, R1, NO_CALS, ChainConfig(iterations=10))
    s.check()
    s.state.logpost += 1e-3
    with pytest.raises(RuntimeError, match="drifted"):
        s.check()


def test_catastrophe_counts_under_prior():
    # fixed tree and rho: every edge count is Poisson(rho * length), edges independent
    tree = balanced().replace(cats=np.zeros(7, dtype=int))
    rho = 2e-3
    weights = {m: 0.0 for m in ChainConfig().weights}
    weights.update(cat_birth_death=1.0, cat_shift=1.0)
    cfg = ChainConfig(iterations=200_000, thin=20, seed=4, weights=weights, prior_only=True)
    b = _small_bundle(4, n_leaves=4)
    data = b.data.__class__(tuple("ABCD"), b.data.classes, b.data.cells)
    trace = run_chain(data, R1, NO_CALS, cfg, start=(tree, ModelParams(1e-3, 0.3, rho, np.ones(4))))
    ks = np.array([t.cats for t in trace.trees])[:, :6]
    rates = rho * tree.edge_lengths()[:6]
    n_eff = ess_geyer(ks.sum(axis=1))
    for e in range(6):
        assert abs(ks[:, e].mean() - rates[e]) < 4 * math.sqrt(rates[e] / n_eff)
    assert ks.sum(axis=1).var() == pytest.approx(rates.sum(), rel=0.1)


def test_prior_chain_root_age_quick():
    # short version of the acceptance check: the root age is uniform below the cap
    tree = random_tree(list("ABC"), np.random.default_rng(0), 500.0)
    cals = CalibrationSet((), 1000.0)
    cfg = ChainConfig(iterations=100_000, thin=25, seed=9, prior_only=True)
    b = _small_bundle(5, n_leaves=3)
    data = b.data.__class__(tuple("ABC"), b.data.classes, b.data.cells)
    trace = run_chain(data, RegistrationRule.parse("1"), cals, cfg, start=(tree, ModelParams(1e-3, 0.3, 1e-4, np.ones(3))))
    ages = trace.column("root_age")
    assert stats.kstest(ages[:: max(1, int(len(ages) / ess_geyer(ages)))], "uniform", args=(0, 1000)).pvalue > 1e-3
