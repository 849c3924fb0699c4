"""Metropolis-Hastings over calibrated trees, catastrophes and rate parameters."""

from __future__ import annotations

import json
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from .dollo import (
    ModelParams,
    Posterior,
    PriorConfig,
    catastrophe_log_prior,
    compute_profiles,
    mask_log_factor,
    registration_probs,
    sum_log_trait_terms,
)
from .newick import encode_newick, read_trees
from .phylotree import (
    CalibrationSet,
    InfeasibleError,
    Phylogeny,
    age_bounds,
    mrca,
    prior_log_density,
)
from .traitdata import UNKNOWN, RegistrationRule, TraitMatrix

MOVES = (
    "age_slide",
    "spr",
    "scale",
    "mu",
    "kappa",
    "rho",
    "xi",
    "cat_birth_death",
    "cat_shift",
)

DEFAULT_WEIGHTS = {
    "age_slide": 6.0,
    "spr": 3.0,
    "scale": 1.0,
    "mu": 1.0,
    "kappa": 1.0,
    "rho": 1.0,
    "xi": 1.0,
    "cat_birth_death": 2.0,
    "cat_shift": 2.0,
}

DEFAULT_SCALES = {
    "age_window": 0.3,  # half-width as a fraction of the admissible interval
    "scale": 0.4,  # log-scale width of the joint time rescaling
    "mu": 0.4,
    "rho": 1.0,
    "kappa": 0.2,
    "xi": 0.6,
}


@dataclass
class ChainConfig:
    iterations: int = 10_000_000
    thin: int = 1000
    seed: int = 0
    weights: dict = field(default_factory=lambda: dict(DEFAULT_WEIGHTS))
    scales: dict = field(default_factory=lambda: dict(DEFAULT_SCALES))
    rho_bounds: tuple = (1e-9, 1e-2)
    mu_bounds: tuple = (1e-12, 1.0)
    prior_only: bool = False
    check_every: int = 10_000
    burnin: int = 0

    def __post_init__(self):
        if self.iterations <= 0:
            raise ValueError("iterations must be positive")
        if self.thin <= 0:
            raise ValueError("thin must be positive")
        weights = dict(DEFAULT_WEIGHTS)
        weights.update(self.weights)
        scales = dict(DEFAULT_SCALES)
        scales.update(self.scales)
        unknown = set(weights) - set(MOVES)
        if unknown:
            raise ValueError(f"unknown moves in weights: {sorted(unknown)}")
        unknown = set(scales) - set(DEFAULT_SCALES)
        if unknown:
            raise ValueError(f"unknown proposal scales: {sorted(unknown)}")
        if any(w < 0 for w in weights.values()) or not any(w > 0 for w in weights.values()):
            raise ValueError("move weights must be non-negative and not all zero")
        self.weights = weights
        self.scales = scales
        self.rho_bounds = tuple(float(x) for x in self.rho_bounds)
        self.mu_bounds = tuple(float(x) for x in self.mu_bounds)

    @property
    def prior(self) -> PriorConfig:
        return PriorConfig(self.rho_bounds, self.mu_bounds)

    def to_dict(self) -> dict:
        out = asdict(self)
        out["rho_bounds"] = list(self.rho_bounds)
        out["mu_bounds"] = list(self.mu_bounds)
        return out

    @classmethod
    def from_dict(cls, obj: dict) -> "ChainConfig":
        known = set(cls.__dataclass_fields__)
        unknown = set(obj) - known
        if unknown:
            raise ValueError(f"unknown chain config fields: {sorted(unknown)}")
        return cls(**obj)


def load_config(path) -> ChainConfig:
    with open(path) as fh:
        return ChainConfig.from_dict(json.load(fh))


@dataclass
class ChainState:
    tree: Phylogeny
    params: ModelParams
    logpost: float
    iteration: int = 0


@dataclass
class Proposal:
    tree: Phylogeny
    params: ModelParams
    log_hastings: float
    changed: frozenset


# -- posterior bookkeeping ---------------------------------------------------

class _Evaluator:
    """Keeps the additive pieces of the log posterior so moves recompute only what they touch."""

    PARTS = frozenset({"tree_prior", "cat_prior", "scale_prior", "tau", "normalizer", "mask"})
    # summation order is fixed so results do not depend on string hashing
    ORDER = ("tree_prior", "cat_prior", "scale_prior", "tau", "normalizer", "mask")

    def __init__(self, post: Posterior):
        self.post = post
        self.n = post.data.n_classes
        self.joint = bool(post.rule.discarded_absent())

    def pieces(self, tree: Phylogeny, params: ModelParams, prev: dict | None = None, parts=PARTS) -> dict:
        post = self.post
        out = dict(prev) if prev else {}
        if not post.params_in_support(params):
            out["total"] = -math.inf
            return out
        if "tree_prior" in parts:
            out["tree_prior"] = prior_log_density(tree, post.cals)
        if out["tree_prior"] == -math.inf:
            out["total"] = -math.inf
            return out
        if "cat_prior" in parts:
            out["cat_prior"] = catastrophe_log_prior(tree, params.rho)
        if "scale_prior" in parts:
            out["scale_prior"] = -math.log(params.mu) - math.log(params.rho)
        if post.prior_only:
            out.update(tau=0.0, normalizer=0.0, mask=0.0)
        else:
            if "tau" in parts:
                out["tau"] = sum_log_trait_terms(tree, params, post._cache)
            if "normalizer" in parts:
                prof = compute_profiles(tree, params, joint=self.joint)
                pe = registration_probs(tree, params, post.rule, prof)
                w = 1.0 - prof.delta
                w[tree.root] = 1.0
                x = float((pe * w).sum() / params.mu)
                out["normalizer"] = -self.n * math.log(x) if x > 0 else -math.inf
            if "mask" in parts:
                out["mask"] = mask_log_factor(post.data, params.xi, post._q)
        const = 0.0 if post.prior_only else math.lgamma(self.n)
        out["total"] = const + sum(out[k] for k in self.ORDER)
        return out


# -- proposals ---------------------------------------------------------------

def _pick_weighted(weights: np.ndarray, rng) -> int:
    cum = np.cumsum(weights)
    return int(np.searchsorted(cum, rng.random() * cum[-1], side="right"))


def _neighbours(tree: Phylogeny, i: int) -> list[int]:
    """Finite edges adjacent to the edge above ``i`` (edges named by lower node)."""
    p = int(tree.parent[i])
    out = [tree.sibling(i)]
    if p != tree.root:
        out.append(p)
    if not tree.is_leaf(i):
        out.extend(int(c) for c in tree.children[i])
    return out


def propose_cat_shift(tree: Phylogeny, params: ModelParams, rng, ctx=None) -> Proposal | None:
    """Move one catastrophe to a neighbouring edge."""
    cats = tree.cats
    k_total = int(cats.sum())
    if k_total == 0:
        return None
    i = _pick_weighted(cats, rng)
    nb = _neighbours(tree, i)
    j = nb[int(rng.integers(len(nb)))]
    new = cats.copy()
    new[i] -= 1
    new[j] += 1
    q_i, q_j = len(nb), len(_neighbours(tree, j))
    log_h = math.log(q_i * new[j]) - math.log(q_j * cats[i])
    return Proposal(tree.replace(cats=new), params, log_h, frozenset({"cat_prior", "tau", "normalizer"}))


def cat_shift_log_ratio(tree: Phylogeny, i: int, j: int) -> float:
    """Log proposal ratio for moving one catastrophe from edge ``i`` to ``j``."""
    k_i = int(tree.cats[i])
    k_j_new = int(tree.cats[j]) + 1
    return math.log(len(_neighbours(tree, i)) * k_j_new) - math.log(len(_neighbours(tree, j)) * k_i)


def propose_cat_birth_death(tree: Phylogeny, params: ModelParams, rng, ctx=None) -> Proposal | None:
    """Add a catastrophe on a uniform edge, or delete a uniformly chosen one."""
    n_edges = tree.n_nodes - 1
    cats = tree.cats.copy()
    k_total = int(cats.sum())
    changed = frozenset({"cat_prior", "tau", "normalizer"})
    if rng.random() < 0.5:
        e = int(rng.integers(tree.n_nodes - 1))
        e = e if e < tree.root else e + 1
        cats[e] += 1
        log_h = math.log(n_edges * cats[e]) - math.log(k_total + 1)
    else:
        if k_total == 0:
            return None
        e = _pick_weighted(cats, rng)
        log_h = math.log(k_total) - math.log(n_edges * cats[e])
        cats[e] -= 1
    return Proposal(tree.replace(cats=cats), params, log_h, changed)


class _TreeContext:
    """Per-run facts the tree moves need: calibrations and which leaves may move."""

    def __init__(self, cals: CalibrationSet, labels: tuple[str, ...], scales: dict):
        self.cals = cals
        self.scales = scales
        self.leaf_cal = {}
        for j, lab in enumerate(labels):
            c = cals.leaf_calibration(lab)
            if c is not None and c.hi() > c.lo():
                self.leaf_cal[j] = (max(c.lo(), 0.0), c.hi())
        self._own: dict = {}

    def own_bounds(self, tree: Phylogeny) -> tuple[np.ndarray, np.ndarray]:
        """Bounds each internal node carries from its own clade calibrations."""
        key = tree.topology_key()
        hit = self._own.get(key)
        if hit is None:
            lo = np.full(tree.n_nodes, -np.inf)
            hi = np.full(tree.n_nodes, np.inf)
            for c in self.cals.clades():
                i = mrca(tree, c.leaves)
                lo[i] = max(lo[i], c.lo())
                hi[i] = min(hi[i], c.hi())
            for j, (a, b) in self.leaf_cal.items():
                lo[j], hi[j] = a, b
            hi[tree.root] = min(hi[tree.root], self.cals.root_cap)
            hit = (lo, hi)
            if len(self._own) > 64:
                self._own.clear()
            self._own[key] = hit
        return hit


def _reflect(x: float, lo: float, hi: float) -> float:
    width = hi - lo
    y = (x - lo) % (2 * width)
    return lo + (y if y <= width else 2 * width - y)


def propose_age_slide(tree: Phylogeny, params: ModelParams, rng, ctx: _TreeContext) -> Proposal | None:
    """Move one node age inside the interval left free by its neighbours."""
    movable = list(range(tree.n_leaves, tree.n_nodes)) + list(ctx.leaf_cal)
    i = movable[int(rng.integers(len(movable)))]
    own_lo, own_hi = ctx.own_bounds(tree)
    ages = tree.ages
    if tree.is_leaf(i):
        lo = own_lo[i]
    else:
        lo = max(ages[tree.children[i]].max(), own_lo[i])
    up = ages[tree.parent[i]] if i != tree.root else math.inf
    hi = min(up, own_hi[i])
    if not hi > lo:
        return None
    frac = ctx.scales["age_window"]
    if frac >= 0.5:
        new = rng.uniform(lo, hi)
    else:
        new = _reflect(ages[i] + frac * (hi - lo) * (2 * rng.random() - 1), lo, hi)
    if not lo < new < hi:
        return None
    a = ages.copy()
    a[i] = new
    parts = frozenset({"tree_prior", "cat_prior", "tau", "normalizer"})
    return Proposal(tree.replace(ages=a), params, 0.0, parts)


def _subtree_nodes(tree: Phylogeny, x: int) -> np.ndarray:
    """Mask of nodes at or below ``x``: those whose leaves all lie under ``x``."""
    return ~(tree.leafsets & ~tree.leafsets[x]).any(axis=1)


def _regraft_options(tree: Phylogeny, parent: np.ndarray, ages: np.ndarray, x: int, gone: np.ndarray, root_cap: float):
    """Edges of the pruned tree that can receive ``x`` with their height intervals."""
    opts = []
    for y in range(tree.n_nodes):
        if gone[y]:
            continue
        py = parent[y]
        upper = root_cap if py < 0 else ages[py]
        lower = max(ages[x], ages[y])
        if upper > lower:
            opts.append((y, lower, upper))
    return opts


def propose_spr(tree: Phylogeny, params: ModelParams, rng, ctx: _TreeContext) -> Proposal | None:
    """Prune a subtree and regraft it on a uniformly chosen compatible edge.

    The pruned node's parent is removed, so the edge above it must carry no
    catastrophes (or, when it is the root, the sibling's edge must not);
    the regrafted parent gets an empty upper edge.  This keeps the move
    its own reverse.
    """
    x = int(rng.integers(tree.n_nodes - 1))
    x = x if x < tree.root else x + 1
    p = int(tree.parent[x])
    s = tree.sibling(x)
    g = int(tree.parent[p])
    if p == tree.root:
        if tree.cats[s] != 0:
            return None
    elif tree.cats[p] != 0:
        return None
    parent = tree.parent.copy()
    ages = tree.ages.copy()
    cats = tree.cats.copy()
    parent[s] = g
    if g < 0:
        cats[s] = 0
    gone = _subtree_nodes(tree, x)
    gone[p] = True
    cap = ctx.cals.root_cap
    opts = _regraft_options(tree, parent, ages, x, gone, cap)
    old = next(o for o in opts if o[0] == s)
    y, lower, upper = opts[int(rng.integers(len(opts)))]
    h = rng.uniform(lower, upper)
    if not lower < h < upper:
        return None
    parent[p] = parent[y]
    parent[y] = p
    parent[x] = p
    ages[p] = h
    cats[p] = 0
    log_h = math.log(upper - lower) - math.log(old[2] - old[1])
    parts = frozenset({"tree_prior", "cat_prior", "tau", "normalizer"})
    return Proposal(Phylogeny(tree.labels, parent, ages, cats), params, log_h, parts)


def propose_scale(tree: Phylogeny, params: ModelParams, rng, ctx: _TreeContext) -> Proposal | None:
    """Rescale time: free node ages times ``s``, ``mu`` and ``rho`` divided by ``s``."""
    s = math.exp(ctx.scales["scale"] * (rng.random() - 0.5))
    free = np.zeros(tree.n_nodes, dtype=bool)
    free[tree.n_leaves:] = True
    for j in ctx.leaf_cal:
        free[j] = True
    ages = tree.ages.copy()
    ages[free] *= s
    new_params = params.replace(mu=params.mu / s, rho=params.rho / s)
    log_h = (int(free.sum()) - 2) * math.log(s)
    parts = _Evaluator.PARTS - {"mask"}
    new_tree = tree.replace(ages=ages)
    return Proposal(new_tree, new_params, log_h, parts)


def propose_scalar(tree: Phylogeny, params: ModelParams, rng, ctx: _TreeContext, which: str) -> Proposal | None:
    sc = ctx.scales
    if which == "mu":
        m = math.exp(sc["mu"] * (rng.random() - 0.5))
        return Proposal(
            tree, params.replace(mu=params.mu * m), math.log(m), frozenset({"scale_prior", "tau", "normalizer"})
        )
    if which == "rho":
        m = math.exp(sc["rho"] * (rng.random() - 0.5))
        return Proposal(tree, params.replace(rho=params.rho * m), math.log(m), frozenset({"scale_prior", "cat_prior"}))
    if which == "kappa":
        k = _reflect(params.kappa + sc["kappa"] * (rng.random() - 0.5), 0.0, 1.0)
        if k >= 1.0:
            return None
        return Proposal(tree, params.replace(kappa=k), 0.0, frozenset({"tau", "normalizer"}))
    if which == "xi":
        i = int(rng.integers(len(params.xi)))
        if params.xi[i] >= 1.0:
            return None
        c = math.exp(sc["xi"] * (rng.random() - 0.5))
        gap = c * (1.0 - params.xi[i])
        if gap >= 1.0:
            return None
        xi = params.xi.copy()
        xi[i] = 1.0 - gap
        return Proposal(tree, params.replace(xi=xi), math.log(c), frozenset({"normalizer", "mask"}))
    raise ValueError(f"unknown scalar {which!r}")


# -- initialisation ------------------------------------------------------------

def hamming_distances(data: TraitMatrix) -> np.ndarray:
    """Mismatch fraction over jointly observed cells for each pair of languages."""
    seen = (data.cells != UNKNOWN).astype(float)
    one = (data.cells == 1).astype(float)
    zero = seen - one
    both = seen @ seen.T
    mismatch = one @ zero.T + zero @ one.T
    with np.errstate(invalid="ignore", divide="ignore"):
        d = np.where(both > 0, mismatch / both, 1.0)
    np.fill_diagonal(d, 0.0)
    return d


def _compatible(merged: frozenset, clades: list[frozenset]) -> bool:
    return all(merged <= c or not (merged & c) or c <= merged for c in clades)


def constrained_upgma(data: TraitMatrix, cals: CalibrationSet) -> tuple[np.ndarray, np.ndarray]:
    """Average-linkage clustering that never breaks a calibrated clade.

    Returns a parent array and clustering heights (half distances).
    """
    L = data.n_languages
    d = hamming_distances(data)
    clades = [frozenset(data.languages.index(x) for x in c.leaves) for c in cals.clades()]
    members = {j: frozenset([j]) for j in range(L)}
    dist = {(a, b): d[a, b] for a in range(L) for b in range(a + 1, L)}
    parent = np.full(2 * L - 1, -1, dtype=np.int64)
    height = np.zeros(2 * L - 1)
    active = list(range(L))
    for new in range(L, 2 * L - 1):
        best = None
        for ia, a in enumerate(active):
            for b in active[ia + 1:]:
                key = (min(a, b), max(a, b))
                if not _compatible(members[a] | members[b], clades):
                    continue
                if best is None or dist[key] < dist[best]:
                    best = key
        if best is None:
            raise InfeasibleError("calibrated clades are not nested; no compatible tree exists")
        a, b = best
        parent[a] = parent[b] = new
        members[new] = members[a] | members[b]
        height[new] = max(dist[best] / 2, height[a], height[b])
        na, nb = len(members[a]), len(members[b])
        active = [z for z in active if z not in (a, b)]
        for z in active:
            da = dist[(min(a, z), max(a, z))]
            db = dist[(min(b, z), max(b, z))]
            dist[(min(new, z), max(new, z))] = (na * da + nb * db) / (na + nb)
        active.append(new)
    return parent, height


def fit_ages(parent: np.ndarray, target: np.ndarray, labels, cals: CalibrationSet, leaf_ages=None) -> Phylogeny:
    """Ages close to ``target`` that satisfy every calibration on this topology."""
    L = len(labels)
    ages = np.zeros(len(parent)) if leaf_ages is None else np.concatenate([leaf_ages, np.zeros(L - 1)])
    for j, lab in enumerate(labels):
        c = cals.leaf_calibration(lab)
        if c is not None:
            lo, hi = max(c.lo(), 0.0), c.hi()
            ages[j] = lo if not math.isfinite(hi) else 0.5 * (lo + hi)
    # provisional increasing ages so a Phylogeny can be built
    order = np.argsort(target[L:], kind="stable") + L
    tmp = ages.copy()
    base = ages[:L].max() + 1.0
    for rank, i in enumerate(order):
        tmp[i] = base + rank
    tree = Phylogeny(tuple(labels), parent, tmp, np.zeros(len(parent), dtype=np.int64))
    # map original indices onto canonical ones
    canon_target = np.zeros(tree.n_nodes)
    for i in range(L, len(parent)):
        leaves = frozenset(np.flatnonzero(_leafset(parent, i, L)))
        j = mrca(tree, [int(v) for v in leaves])
        canon_target[j] = target[i]
    lo, hi = age_bounds(tree, cals)
    if (lo > hi).any():
        raise InfeasibleError("calibrations are contradictory on the initial topology")
    new = tree.ages.copy()
    for i in tree.postorder[::-1]:
        if tree.is_leaf(i) and lo[i] == hi[i]:
            continue
        top = hi[i] if i == tree.root else min(hi[i], new[tree.parent[i]])
        bottom = lo[i]
        if tree.is_leaf(i):
            new[i] = 0.5 * (bottom + top)
            continue
        if not math.isfinite(top):
            top = max(bottom, canon_target[i]) * 2 + 1.0
        if not top > bottom:
            raise InfeasibleError(f"no room for node {i} between {bottom} and {top}")
        frac = (canon_target[i] - bottom) / (top - bottom)
        new[i] = bottom + min(max(frac, 0.05), 0.95) * (top - bottom)
    return tree.replace(ages=new)


def _leafset(parent: np.ndarray, node: int, L: int) -> np.ndarray:
    out = np.zeros(L, dtype=bool)
    for leaf in range(L):
        x = leaf
        while x >= 0:
            if x == node:
                out[leaf] = True
                break
            x = parent[x]
    return out


def initial_state(
    data: TraitMatrix, rule: RegistrationRule, cals: CalibrationSet, config: ChainConfig
) -> tuple[Phylogeny, ModelParams]:
    """Data-driven feasible start: clustering, calibrated ages, moment-matched ``mu``."""
    parent, height = constrained_upgma(data, cals)
    L = data.n_languages
    clade_ratio = []
    for c in cals.clades():
        idx = frozenset(data.languages.index(x) for x in c.leaves)
        for i in range(L, 2 * L - 1):
            if frozenset(np.flatnonzero(_leafset(parent, i, L))) == idx and height[i] > 0:
                lo, hi = c.lo(), c.hi()
                mid = lo if not math.isfinite(hi) else (hi if not math.isfinite(lo) else 0.5 * (lo + hi))
                if math.isfinite(mid) and mid > 0:
                    clade_ratio.append(mid / height[i])
    if clade_ratio:
        years_per_unit = float(np.median(clade_ratio))
    else:
        years_per_unit = 0.5 * cals.root_cap / max(height.max(), 1e-9)
    target = height * years_per_unit
    tree = fit_ages(parent, target, data.languages, cals)

    # mu from the decay of shared presence with pairwise separation
    one = (data.cells == 1).astype(float)
    seen = (data.cells != UNKNOWN).astype(float)
    rates = []
    for a in range(L):
        for b in range(a + 1, L):
            m = mrca(tree, [a, b])
            sep = 2 * tree.ages[m] - tree.ages[a] - tree.ages[b]
            both_seen = seen[a] * seen[b]
            shared = (one[a] * one[b] * both_seen).sum()
            either = 0.5 * ((one[a] * both_seen).sum() + (one[b] * both_seen).sum())
            if shared > 0 and either > 0 and sep > 0:
                rates.append(-math.log(shared / either) / sep)
    mu = float(np.median(rates)) if rates else 2e-4
    mlo, mhi = config.mu_bounds
    if not mu > 0:
        mu = 2e-4
    mu = min(max(mu, mlo * 1.01), mhi * 0.99)
    rlo, rhi = config.rho_bounds
    rho = math.sqrt(rlo * rhi)
    q = (data.cells == UNKNOWN).sum(axis=1)
    xi = 1.0 - q / data.n_classes
    xi[xi <= 0] = 0.5
    return tree, ModelParams(mu, 0.5, rho, xi)


# -- diagnostics ---------------------------------------------------------------

def autocovariance(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=float) - np.mean(x)
    n = len(x)
    size = 1 << (2 * n - 1).bit_length()
    f = np.fft.rfft(x, size)
    return np.fft.irfft(f * np.conj(f), size)[:n] / n


def ess_geyer(x) -> float:
    """Effective sample size by the initial monotone sequence estimator."""
    x = np.asarray(x, dtype=float)
    n = len(x)
    if n < 4:
        return float(n)
    gamma = autocovariance(x)
    if gamma[0] <= 0:
        return float(n)
    m = (n - 1) // 2
    pairs = gamma[0: 2 * m: 2] + gamma[1: 2 * m + 1: 2]
    positive = np.flatnonzero(pairs <= 0)
    stop = positive[0] if len(positive) else len(pairs)
    pairs = np.minimum.accumulate(pairs[:stop])
    var = -gamma[0] + 2 * pairs.sum()
    if var <= 0:
        return float(n)
    return float(min(n * gamma[0] / var, n * math.log10(max(n, 10))))


# -- the chain -------------------------------------------------------------------

@dataclass
class MoveStats:
    proposed: int = 0
    accepted: int = 0
    skipped: int = 0

    @property
    def rate(self) -> float:
        return self.accepted / self.proposed if self.proposed else float("nan")


@dataclass
class ChainTrace:
    languages: tuple[str, ...]
    iterations: list = field(default_factory=list)
    logpost: list = field(default_factory=list)
    mu: list = field(default_factory=list)
    kappa: list = field(default_factory=list)
    rho: list = field(default_factory=list)
    root_age: list = field(default_factory=list)
    k_total: list = field(default_factory=list)
    xi: list = field(default_factory=list)
    trees: list = field(default_factory=list)
    stats: dict = field(default_factory=lambda: {m: MoveStats() for m in MOVES})
    seconds: float = 0.0

    SCALARS = ("logpost", "mu", "kappa", "rho", "root_age", "k_total")

    def record(self, it: int, state: ChainState):
        self.iterations.append(it)
        self.logpost.append(state.logpost)
        self.mu.append(state.params.mu)
        self.kappa.append(state.params.kappa)
        self.rho.append(state.params.rho)
        self.root_age.append(state.tree.root_age)
        self.k_total.append(state.tree.k_total)
        self.xi.append(np.array(state.params.xi))
        self.trees.append(state.tree)

    def __len__(self):
        return len(self.iterations)

    def column(self, name: str) -> np.ndarray:
        if name.startswith("xi_"):
            j = int(name[3:]) - 1
            return np.array([x[j] for x in self.xi])
        return np.asarray(getattr(self, name), dtype=float)

    def columns(self) -> list[str]:
        return ["iter", *self.SCALARS, *(f"xi_{j + 1}" for j in range(len(self.languages)))]

    def discard(self, fraction: float) -> "ChainTrace":
        """Drop the first ``fraction`` of recorded samples."""
        start = int(len(self) * fraction)
        out = ChainTrace(self.languages)
        for name in ("iterations", "logpost", "mu", "kappa", "rho", "root_age", "k_total", "xi", "trees"):
            setattr(out, name, list(getattr(self, name)[start:]))
        out.stats = self.stats
        out.seconds = self.seconds
        return out

    def ess(self) -> dict:
        return {name: ess_geyer(self.column(name)) for name in ("mu", "kappa", "rho", "root_age")}

    def write(self, outdir) -> Path:
        out = Path(outdir)
        out.mkdir(parents=True, exist_ok=True)
        with open(out / "trace.tsv", "w") as fh:
            fh.write("\t".join(self.columns()) + "\n")
            for j in range(len(self)):
                row = [str(self.iterations[j])]
                row += [repr(float(getattr(self, s)[j])) for s in self.SCALARS[:-1]]
                row.append(str(int(self.k_total[j])))
                row += [repr(float(v)) for v in self.xi[j]]
                fh.write("\t".join(row) + "\n")
        with open(out / "trees.nwk", "w") as fh:
            for it, tree in zip(self.iterations, self.trees):
                fh.write(f"[&iter={it}] {encode_newick(tree)}\n")
        summary = {
            "languages": list(self.languages),
            "moves": {m: asdict(s) for m, s in self.stats.items()},
            "ess": self.ess() if len(self) >= 4 else {},
        }
        (out / "stats.json").write_text(json.dumps(summary, indent=2) + "\n")
        # wall time lives apart so the other outputs are reproducible byte for byte
        (out / "timing.json").write_text(json.dumps({"seconds": self.seconds}) + "\n")
        return out


def read_trace(outdir) -> ChainTrace:
    """Load a trace written by :meth:`ChainTrace.write`."""
    out = Path(outdir)
    stats = json.loads((out / "stats.json").read_text())
    trace = ChainTrace(tuple(stats["languages"]))
    with open(out / "trace.tsv") as fh:
        header = fh.readline().rstrip("\n").split("\t")
        n_xi = sum(1 for h in header if h.startswith("xi_"))
        for line in fh:
            f = line.rstrip("\n").split("\t")
            trace.iterations.append(int(f[0]))
            trace.logpost.append(float(f[1]))
            trace.mu.append(float(f[2]))
            trace.kappa.append(float(f[3]))
            trace.rho.append(float(f[4]))
            trace.root_age.append(float(f[5]))
            trace.k_total.append(int(f[6]))
            trace.xi.append(np.array([float(v) for v in f[7: 7 + n_xi]]))
    trace.trees = read_trees(out / "trees.nwk", trace.languages)
    for m, s in stats.get("moves", {}).items():
        trace.stats[m] = MoveStats(**s)
    timing = out / "timing.json"
    trace.seconds = json.loads(timing.read_text())["seconds"] if timing.exists() else 0.0
    return trace


class Sampler:
    """One Metropolis-Hastings chain."""

    def __init__(
        self,
        data: TraitMatrix,
        rule: RegistrationRule,
        cals: CalibrationSet,
        config: ChainConfig,
        start: tuple[Phylogeny, ModelParams] | None = None,
    ):
        self.config = config
        self.post = Posterior(data, rule, cals, config.prior, prior_only=config.prior_only)
        self.eval = _Evaluator(self.post)
        self.rng = np.random.default_rng(config.seed)
        self.ctx = _TreeContext(cals, data.languages, config.scales)
        tree, params = start if start is not None else initial_state(data, rule, cals, config)
        tree = tree.with_leaf_order(data.languages)
        self.pieces = self.eval.pieces(tree, params)
        if not math.isfinite(self.pieces["total"]):
            raise InfeasibleError("initial state has zero posterior density")
        self.state = ChainState(tree, params, self.pieces["total"], 0)
        names = [m for m in MOVES if config.weights[m] > 0]
        w = np.array([config.weights[m] for m in names], dtype=float)
        self.move_names = names
        self.move_cum = np.cumsum(w)
        self.stats = {m: MoveStats() for m in MOVES}

    def _propose(self, name: str) -> Proposal | None:
        st = self.state
        if name == "age_slide":
            return propose_age_slide(st.tree, st.params, self.rng, self.ctx)
        if name == "spr":
            return propose_spr(st.tree, st.params, self.rng, self.ctx)
        if name == "scale":
            return propose_scale(st.tree, st.params, self.rng, self.ctx)
        if name == "cat_birth_death":
            return propose_cat_birth_death(st.tree, st.params, self.rng)
        if name == "cat_shift":
            return propose_cat_shift(st.tree, st.params, self.rng)
        return propose_scalar(st.tree, st.params, self.rng, self.ctx, name)

    def step(self):
        name = self.move_names[int(np.searchsorted(self.move_cum, self.rng.random() * self.move_cum[-1], side="right"))]
        stat = self.stats[name]
        stat.proposed += 1
        prop = self._propose(name)
        self.state.iteration += 1
        if prop is None:
            stat.skipped += 1
            return
        new = self.eval.pieces(prop.tree, prop.params, self.pieces, prop.changed)
        log_a = new["total"] - self.pieces["total"] + prop.log_hastings
        if log_a >= 0 or self.rng.random() < math.exp(log_a):
            self.pieces = new
            self.state.tree = prop.tree
            self.state.params = prop.params
            self.state.logpost = new["total"]
            stat.accepted += 1

    def check(self):
        fresh = self.eval.pieces(self.state.tree, self.state.params)["total"]
        if not abs(fresh - self.state.logpost) <= 1e-8 * max(1.0, abs(fresh)):
            raise RuntimeError(
                f"cached log posterior {self.state.logpost!r} drifted from recomputed {fresh!r}"
                f" at iteration {self.state.iteration}"
            )

    def run(self, progress: Callable[[int, ChainState], None] | None = None) -> ChainTrace:
        cfg = self.config
        trace = ChainTrace(self.post.languages)
        t0 = time.perf_counter()
        for it in range(1, cfg.iterations + 1):
            self.step()
            if cfg.check_every and it % cfg.check_every == 0:
                self.check()
            if it > cfg.burnin and it % cfg.thin == 0:
                trace.record(it, self.state)
                if progress is not None:
                    progress(it, self.state)
        trace.stats = self.stats
        trace.seconds = time.perf_counter() - t0
        return trace


def run_chain(
    data: TraitMatrix,
    rule: RegistrationRule,
    cals: CalibrationSet,
    config: ChainConfig,
    start: tuple[Phylogeny, ModelParams] | None = None,
) -> ChainTrace:
    """Run one chain from a feasible start and return its thinned trace."""
    return Sampler(data, rule, cals, config, start).run()
