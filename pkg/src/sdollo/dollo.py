"""Likelihood and posterior for the stochastic Dollo model with catastrophes.

A catastrophe on an edge acts like ``T_C = -log(1 - kappa) / mu`` extra
years of anagenic change, so every edge survival probability is

    delta = exp(-mu * length) * (1 - kappa) ** k.

The birth rate ``lambda`` is integrated out analytically against a
``1/lambda`` prior, leaving ``Gamma(N) * X**(-N)`` where ``lambda * X`` is the
expected number of registered classes.
"""

from __future__ import annotations

import math
from collections import OrderedDict
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np
from scipy.special import gammaln

from .phylotree import CalibrationSet, Phylogeny, prior_log_density
from .traitdata import ABSENT, PRESENT, RegistrationRule, TraitMatrix, check_registration_consistency

_TINY = np.finfo(float).tiny


@dataclass(frozen=True, eq=False)
class ModelParams:
    """Rates per year; ``xi`` follows the leaf order of the tree/data."""

    mu: float
    kappa: float
    rho: float
    xi: np.ndarray = field(repr=False)
    lam: float | None = None

    def __post_init__(self):
        xi = np.array(self.xi, dtype=float, copy=True).reshape(-1)
        xi.setflags(write=False)
        object.__setattr__(self, "xi", xi)
        object.__setattr__(self, "mu", float(self.mu))
        object.__setattr__(self, "kappa", float(self.kappa))
        object.__setattr__(self, "rho", float(self.rho))

    def replace(self, **kw) -> "ModelParams":
        return replace(self, **kw)

    def __eq__(self, other):
        if not isinstance(other, ModelParams):
            return NotImplemented
        return (
            (self.mu, self.kappa, self.rho, self.lam) == (other.mu, other.kappa, other.rho, other.lam)
            and np.array_equal(self.xi, other.xi)
        )

    def to_dict(self, languages: Sequence[str] | None = None) -> dict:
        out = {"mu": self.mu, "kappa": self.kappa, "rho": self.rho}
        if languages is None:
            out["xi"] = [float(x) for x in self.xi]
        else:
            out["xi"] = {lab: float(x) for lab, x in zip(languages, self.xi)}
        if self.lam is not None:
            out["lambda"] = self.lam
        return out

    @classmethod
    def from_dict(cls, obj: dict, languages: Sequence[str] | None = None) -> "ModelParams":
        for key in ("mu", "kappa", "rho"):
            if key not in obj:
                raise ValueError(f"parameter file is missing field {key!r}")
        xi = obj.get("xi", 1.0)
        if isinstance(xi, dict):
            if languages is None:
                raise ValueError("xi given by language but no language order is known")
            missing = set(languages) - set(xi)
            if missing:
                raise ValueError(f"xi is missing languages {sorted(missing)}")
            xi = [xi[lab] for lab in languages]
        elif np.isscalar(xi):
            if languages is None:
                raise ValueError("scalar xi needs a language count")
            xi = [xi] * len(languages)
        lam = obj.get("lambda", obj.get("lam"))
        return cls(obj["mu"], obj["kappa"], obj["rho"], xi, None if lam is None else float(lam))


def catastrophe_time(kappa: float, mu: float) -> float:
    """Virtual edge length equivalent to one catastrophe."""
    if not 0 <= kappa < 1:
        raise ValueError(f"kappa must lie in [0, 1), got {kappa}")
    return -math.log1p(-kappa) / mu


def edge_survival(tree: Phylogeny, params: ModelParams) -> np.ndarray:
    """Survival probability along the edge above every node (root: 0)."""
    if not 0 <= params.kappa < 1:
        raise ValueError(f"kappa must lie in [0, 1), got {params.kappa}")
    log_delta = -params.mu * tree.edge_lengths() + tree.cats * math.log1p(-params.kappa)
    delta = np.maximum(np.exp(log_delta), _TINY)
    delta[tree.root] = 0.0
    return delta


def effective_survival(tree: Phylogeny, params: ModelParams, node: int) -> float:
    if node == tree.root:
        raise ValueError("the edge above the root is infinite")
    return float(edge_survival(tree, params)[node])


@dataclass(frozen=True)
class NodeProfile:
    """Per-node registration quantities for a class present at the node.

    ``u0, u1, us, us1`` are probabilities that the number of visible 1's in
    the subtree is 0, 1, s, s-1; ``v0, vs, vs1`` that the number of visible
    1's plus ?'s is 0, s, s-1.  ``low[i, y, d]`` is the joint probability of
    ``y`` visible 1's and ``d`` visible 0's (``y, d`` in {0, 1}); ``high``
    is the same with ``y`` replaced by ``s - y``.  ``extinct`` is the
    probability that no leaf below carries the class, whatever the masking.
    The ``m0, m1, obs`` arrays are masking probabilities over the subtree's
    leaves: none observed, exactly one observed, all observed.
    """

    size: np.ndarray
    u0: np.ndarray
    u1: np.ndarray
    us: np.ndarray
    us1: np.ndarray
    v0: np.ndarray
    vs: np.ndarray
    vs1: np.ndarray
    low: np.ndarray | None
    high: np.ndarray | None
    extinct: np.ndarray
    m0: np.ndarray
    m1: np.ndarray
    obs: np.ndarray
    delta: np.ndarray


def _conv22(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Truncated 2-D convolution of two {0,1} x {0,1} count distributions."""
    out = np.empty((2, 2))
    out[0, 0] = a[0, 0] * b[0, 0]
    out[1, 0] = a[1, 0] * b[0, 0] + a[0, 0] * b[1, 0]
    out[0, 1] = a[0, 1] * b[0, 0] + a[0, 0] * b[0, 1]
    out[1, 1] = (
        a[1, 1] * b[0, 0] + a[0, 0] * b[1, 1] + a[1, 0] * b[0, 1] + a[0, 1] * b[1, 0]
    )
    return out


def compute_profiles(tree: Phylogeny, params: ModelParams, joint: bool = True) -> NodeProfile:
    """Post-order evaluation of every per-node registration quantity.

    ``joint=False`` skips the ``low``/``high`` arrays, which only rules with
    conditions 5 or 6 need.
    """
    xi_arr = np.asarray(params.xi, dtype=float)
    if xi_arr.shape != (tree.n_leaves,):
        raise ValueError(f"xi has {xi_arr.size} entries for {tree.n_leaves} leaves")
    n, L = tree.n_nodes, tree.n_leaves
    delta_arr = edge_survival(tree, params)
    size_arr = tree.subtree_sizes
    # plain floats are much faster than numpy scalars in this loop
    delta = delta_arr.tolist()
    xi = xi_arr.tolist()
    size = size_arr.tolist()
    zeros = [0.0] * n
    u0, u1, us, us1 = zeros[:], zeros[:], zeros[:], zeros[:]
    v0, vs, vs1 = zeros[:], zeros[:], zeros[:]
    ext, m0, m1, obs = zeros[:], zeros[:], zeros[:], zeros[:]
    for j in range(L):
        u0[j] = us1[j] = m0[j] = 1.0 - xi[j]
        u1[j] = us[j] = m1[j] = obs[j] = xi[j]
        vs[j] = 1.0
    low = high = None
    if joint:
        low = np.zeros((n, 2, 2))
        high = np.zeros((n, 2, 2))
        low[:L, 0, 0] = 1 - xi_arr
        low[:L, 1, 0] = xi_arr
        high[:L, 0, 0] = xi_arr
        high[:L, 1, 0] = 1 - xi_arr

    for i, a, b in tree.internal_order:
        da, db = delta[a], delta[b]
        ea, eb = 1.0 - da, 1.0 - db
        u0[i] = (ea + da * u0[a]) * (eb + db * u0[b])
        u1[i] = da * eb * u1[a] + db * ea * u1[b] + da * db * (u1[a] * u0[b] + u0[a] * u1[b])
        us[i] = da * us[a] * db * us[b]
        us1[i] = (da * us1[a] + (size[a] == 1) * ea) * db * us[b] + da * us[a] * (
            db * us1[b] + (size[b] == 1) * eb
        )
        v0[i] = (da * v0[a] + ea * obs[a]) * (db * v0[b] + eb * obs[b])
        top0a = da * vs[a] + ea * m0[a]
        top0b = db * vs[b] + eb * m0[b]
        vs[i] = top0a * top0b
        vs1[i] = (da * vs1[a] + ea * m1[a]) * top0b + top0a * (db * vs1[b] + eb * m1[b])
        ext[i] = (ea + da * ext[a]) * (eb + db * ext[b])
        m0[i] = m0[a] * m0[b]
        m1[i] = m1[a] * m0[b] + m0[a] * m1[b]
        obs[i] = obs[a] * obs[b]

        if joint:
            tops_low = []
            tops_high = []
            for c, d, e in ((a, da, ea), (b, db, eb)):
                tl = d * low[c]
                tl[0, 0] += e * m0[c]
                tl[0, 1] += e * m1[c]
                tops_low.append(tl)
                th = d * high[c]
                if size[c] == 1:
                    th[1, 1] += e * xi[c]
                    th[1, 0] += e * (1 - xi[c])
                tops_high.append(th)
            low[i] = _conv22(*tops_low)
            high[i] = _conv22(*tops_high)

    arr = np.array
    return NodeProfile(
        size_arr, arr(u0), arr(u1), arr(us), arr(us1), arr(v0), arr(vs), arr(vs1),
        low, high, arr(ext), arr(m0), arr(m1), arr(obs), delta_arr,
    )


def _outside_masking(tree: Phylogeny, prof: NodeProfile) -> tuple[np.ndarray, np.ndarray]:
    """P(no leaf outside the subtree observed), P(exactly one observed)."""
    n = tree.n_nodes
    m0o = np.zeros(n)
    m1o = np.zeros(n)
    m0o[tree.root] = 1.0
    ch = tree.children
    for i in tree.postorder[::-1]:
        if i < tree.n_leaves:
            continue
        a, b = ch[i]
        for c, sib in ((a, b), (b, a)):
            m0o[c] = m0o[i] * prof.m0[sib]
            m1o[c] = m1o[i] * prof.m0[sib] + m0o[i] * prof.m1[sib]
    return m0o, m1o


def registration_probs(
    tree: Phylogeny, params: ModelParams, rule: RegistrationRule, prof: NodeProfile | None = None
) -> np.ndarray:
    """Probability that a class present at node ``i`` is registered, for all ``i``."""
    if 1 not in rule.conditions:
        raise ValueError("registration rule must include condition 1")
    L = tree.n_leaves
    drop_y = sorted(rule.discarded_y(L))
    drop_d = sorted(rule.discarded_absent())
    if prof is None or (drop_d and prof.low is None):
        prof = compute_profiles(tree, params, joint=bool(drop_d))
    s = prof.size

    def p_y(y):
        if y == 0:
            return prof.u0
        if y == 1:
            return prof.u1
        # checked in this order so that small subtrees pick the right quantity
        out = np.select(
            [y > s, y == 0, y == 1, y == s, y == s - 1],
            [0.0, prof.u0, prof.u1, prof.us, prof.us1],
            np.nan,
        )
        return out

    drop = np.zeros(tree.n_nodes)
    for y in drop_y:
        drop += p_y(y)
    if drop_d:
        m0o, m1o = _outside_masking(tree, prof)
        nodes = np.arange(tree.n_nodes)

        def j_in(y, d):
            hi_idx = np.clip(s - y, 0, 1)
            out = prof.low[nodes, y, d] if y <= 1 else prof.high[nodes, hi_idx, d]
            return np.where(y > s, 0.0, out)

        p_d = {0: prof.vs * m0o, 1: prof.vs1 * m0o + prof.vs * m1o}
        for d in drop_d:
            drop += p_d[d]
        for y in drop_y:
            for d in drop_d:
                if d == 0:
                    drop -= j_in(y, 0) * m0o
                else:
                    drop -= j_in(y, 1) * m0o + j_in(y, 0) * m1o
    return np.clip(1.0 - drop, 0.0, 1.0)


def registration_prob(
    tree: Phylogeny, params: ModelParams, rule: RegistrationRule, node: int, prof: NodeProfile | None = None
) -> float:
    return float(registration_probs(tree, params, rule, prof)[node])


def normalizer_X(
    tree: Phylogeny, params: ModelParams, rule: RegistrationRule, prof: NodeProfile | None = None
) -> float:
    """Expected registered class count divided by the birth rate."""
    if prof is None:
        prof = compute_profiles(tree, params, joint=bool(rule.discarded_absent()))
    pe = registration_probs(tree, params, rule, prof)
    w = 1.0 - prof.delta
    w[tree.root] = 1.0
    return float((pe * w).sum() / params.mu)


class _ColumnCache:
    """Topology-dependent column bookkeeping, kept for a few recent trees.

    Identical columns share one ``tau``; ``counts`` records multiplicities.
    """

    def __init__(self, matrix: TraitMatrix, maxsize: int = 16):
        patterns, inverse, counts = np.unique(matrix.cells, axis=1, return_inverse=True, return_counts=True)
        self.inverse = np.asarray(inverse).reshape(-1)
        self.counts = counts.astype(float)
        self.present = (patterns == PRESENT).astype(float)
        self.leaf_sum = (patterns != ABSENT).astype(float)
        self.y = self.present.sum(axis=0)
        self.maxsize = maxsize
        self._store: OrderedDict = OrderedDict()

    def get(self, tree: Phylogeny):
        key = tree.topology_key()
        hit = self._store.get(key)
        if hit is not None:
            self._store.move_to_end(key)
            return hit
        ycnt = tree.leafsets.astype(float) @ self.present
        no_ones = (ycnt == 0).astype(float)
        on_path = (ycnt == self.y[None, :]).astype(float)
        hit = (no_ones, on_path)
        self._store[key] = hit
        if len(self._store) > self.maxsize:
            self._store.popitem(last=False)
        return hit


def _unique_terms(tree: Phylogeny, params: ModelParams, cache: _ColumnCache) -> np.ndarray:
    if (cache.y < 1).any():
        bad = int(np.flatnonzero(cache.y[cache.inverse] < 1)[0]) + 1
        raise ValueError(f"column {bad} has no visible 1; it cannot have been registered")
    no_ones, on_path = cache.get(tree)
    delta = edge_survival(tree, params)
    L = tree.n_leaves
    S = np.empty((tree.n_nodes, cache.present.shape[1]))
    S[:L] = cache.leaf_sum
    keep = (1.0 - delta)[:, None]
    for nodes, kids in tree.levels:
        top = S[kids] * delta[kids, None]
        top += keep[kids] * no_ones[kids]
        k = len(nodes)
        S[nodes] = top[:k] * top[k:]
    w = 1.0 - delta
    w[tree.root] = 1.0
    S *= on_path
    return (w @ S) / params.mu


def trait_terms(
    tree: Phylogeny, params: ModelParams, matrix: TraitMatrix, _cache: _ColumnCache | None = None
) -> np.ndarray:
    """Per-column integrated birth terms ``tau_a`` (missing cells summed out).

    Mask factors are not included.  ``matrix`` rows must follow the leaf
    order of ``tree``.
    """
    if matrix.languages != tree.labels:
        matrix = matrix.reorder(tree.labels)
        _cache = None
    cache = _cache or _ColumnCache(matrix)
    return _unique_terms(tree, params, cache)[cache.inverse]


def sum_log_trait_terms(tree: Phylogeny, params: ModelParams, cache: _ColumnCache) -> float:
    """``sum_a log tau_a`` computed once per distinct column pattern."""
    tau = _unique_terms(tree, params, cache)
    if not (tau > 0).all():
        return -math.inf
    return float(cache.counts @ np.log(tau))


def trait_term(tree: Phylogeny, params: ModelParams, matrix: TraitMatrix, a: int) -> float:
    """``tau`` for the single column ``a`` (1-based)."""
    return float(trait_terms(tree, params, matrix.select_columns([a - 1]))[0])


def mask_log_factor(matrix: TraitMatrix, xi: np.ndarray, q: np.ndarray | None = None) -> float:
    """Log of prod_i (1 - xi_i)^Q_i xi_i^(N - Q_i); ``q`` may hold precomputed Q_i."""
    if q is None:
        q = (matrix.cells == 2).sum(axis=1)
    seen = matrix.n_classes - q
    xi = np.asarray(xi, dtype=float)
    if ((q > 0) & (xi >= 1)).any() or ((seen > 0) & (xi <= 0)).any():
        return -math.inf
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(q > 0, q * np.log1p(-np.minimum(xi, 1.0)), 0.0)
        terms += np.where(seen > 0, seen * np.log(np.maximum(xi, _TINY)), 0.0)
    return float(terms.sum())


def catastrophe_log_prior(tree: Phylogeny, rho: float) -> float:
    """Independent Poisson(rho * length) catastrophe counts on finite edges."""
    # the root is always the last node
    lengths = tree.edge_lengths()[:-1]
    k = tree.cats[:-1]
    rate = rho * lengths
    if ((rate <= 0) & (k > 0)).any():
        return -math.inf
    with np.errstate(divide="ignore"):
        logs = np.where(k > 0, k * np.log(np.where(rate > 0, rate, 1.0)), 0.0)
    return float(logs.sum() - rate.sum() - gammaln(k + 1).sum())


@dataclass(frozen=True)
class PriorConfig:
    """Bounds that make the scale-free priors proper.

    ``rho_bounds`` truncates the ``1/rho`` prior; ``mu_bounds`` truncates
    ``1/mu`` and defaults to very wide limits.
    """

    rho_bounds: tuple[float, float] = (1e-9, 1e-2)
    mu_bounds: tuple[float, float] = (1e-12, 1.0)


class Posterior:
    """Lambda-marginalised log posterior for fixed data, rule and calibrations.

    With ``prior_only`` the likelihood is dropped and the data are used only
    for leaf labels.
    """

    def __init__(
        self,
        data: TraitMatrix,
        rule: RegistrationRule,
        cals: CalibrationSet,
        prior: PriorConfig = PriorConfig(),
        prior_only: bool = False,
    ):
        self.data = data
        self.rule = rule
        self.cals = cals
        self.prior = prior
        self.prior_only = prior_only
        cals.check_labels(data.languages)
        if not prior_only:
            bad = check_registration_consistency(data, rule)
            if bad:
                raise ValueError(
                    f"{len(bad)} column(s) violate registration rule {rule} (first: column {bad[0]})"
                )
        self._cache = _ColumnCache(data)
        self._q = (data.cells == 2).sum(axis=1)

    @property
    def languages(self) -> tuple[str, ...]:
        return self.data.languages

    def _align(self, tree: Phylogeny) -> Phylogeny:
        if tree.labels != self.data.languages:
            tree = tree.with_leaf_order(self.data.languages)
        return tree

    def params_in_support(self, params: ModelParams) -> bool:
        lo, hi = self.prior.rho_bounds
        mlo, mhi = self.prior.mu_bounds
        xi = params.xi
        return (
            lo <= params.rho <= hi
            and mlo <= params.mu <= mhi
            and 0 <= params.kappa < 1
            and xi.shape == (self.data.n_languages,)
            and bool(((xi > 0) & (xi <= 1)).all())
        )

    def log_prior(self, tree: Phylogeny, params: ModelParams) -> float:
        if not self.params_in_support(params):
            return -math.inf
        tree = self._align(tree)
        fg = prior_log_density(tree, self.cals)
        if fg == -math.inf:
            return -math.inf
        return fg + catastrophe_log_prior(tree, params.rho) - math.log(params.mu) - math.log(params.rho)

    def log_likelihood(self, tree: Phylogeny, params: ModelParams) -> float:
        """Log of Gamma(N) X^-N prod tau_a times the mask factors."""
        if self.prior_only:
            return 0.0
        tree = self._align(tree)
        log_tau = sum_log_trait_terms(tree, params, self._cache)
        x = normalizer_X(tree, params, self.rule)
        if x <= 0 or log_tau == -math.inf:
            return -math.inf
        n = self.data.n_classes
        return float(gammaln(n)) - n * math.log(x) + log_tau + mask_log_factor(self.data, params.xi, self._q)

    def __call__(self, tree: Phylogeny, params: ModelParams) -> float:
        lp = self.log_prior(tree, params)
        if lp == -math.inf:
            return lp
        return lp + self.log_likelihood(tree, params)


def log_posterior(
    tree: Phylogeny,
    params: ModelParams,
    data: TraitMatrix,
    rule: RegistrationRule,
    cals: CalibrationSet,
    prior: PriorConfig = PriorConfig(),
) -> float:
    """Lambda-marginalised log posterior; ``1/N!`` is dropped."""
    return Posterior(data, rule, cals, prior)(tree, params)


def log_likelihood_fixed_lambda(
    tree: Phylogeny, params: ModelParams, data: TraitMatrix, rule: RegistrationRule, lam: float
) -> float:
    """Log probability of the registered data at a given birth rate (with ``1/N!``)."""
    if data.languages != tree.labels:
        data = data.reorder(tree.labels)
    tau = trait_terms(tree, params, data)
    x = normalizer_X(tree, params, rule)
    n = data.n_classes
    return (
        -lam * x - float(gammaln(n + 1)) + n * math.log(lam)
        + float(np.log(tau).sum()) + mask_log_factor(data, params.xi)
    )
