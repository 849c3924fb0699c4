"""Forward simulation of trait histories, masking and registration.

Classes enter above the root at stationarity (Poisson with mean
``lambda/mu``), are born along edges at rate ``lambda`` and die at rate
``mu`` per copy.  A catastrophe kills each copy with probability ``kappa``
and adds Poisson(``kappa * lambda / mu``) newborn classes, which do not face
the catastrophe they were born in.  A class that dies on the edge where it
was born never reaches a node and is not given a column.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .dollo import ModelParams, normalizer_X
from .newick import encode_newick
from .phylotree import Phylogeny
from .traitdata import PRESENT, UNKNOWN, RegistrationRule, TraitMatrix


def _rng(seed) -> np.random.Generator:
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(seed)


@dataclass
class FullSimulation:
    """A realised history: leaf presence for every class that reached a node."""

    tree: Phylogeny
    cells: np.ndarray
    cat_positions: dict[int, np.ndarray] = field(default_factory=dict)


def _catastrophe_positions(tree: Phylogeny, params: ModelParams, rng, mode: str) -> dict[int, np.ndarray]:
    lengths = tree.edge_lengths()
    out = {}
    for i in range(tree.n_nodes):
        if i == tree.root:
            continue
        if mode == "sample":
            k = rng.poisson(params.rho * lengths[i])
        elif mode == "tree":
            k = int(tree.cats[i])
        else:
            raise ValueError(f"catastrophe mode must be 'sample' or 'tree', not {mode!r}")
        # distance below the upper end of the edge
        out[i] = np.sort(rng.uniform(0.0, lengths[i], size=k))
    return out


def simulate_full_matrix(
    tree: Phylogeny, params: ModelParams, seed=None, catastrophes: str = "sample"
) -> FullSimulation:
    """Simulate the unmasked ``L x N*`` presence matrix on ``tree``.

    ``catastrophes="sample"`` draws Poisson(rho * length) events per edge and
    records the counts in the returned tree; ``"tree"`` keeps the tree's own
    counts and only places them.
    """
    if params.lam is None:
        raise ValueError("simulation needs a birth rate lambda")
    rng = _rng(seed)
    lam, mu, kappa = params.lam, params.mu, params.kappa
    nu = kappa * lam / mu
    cats = _catastrophe_positions(tree, params, rng, catastrophes)
    lengths = tree.edge_lengths()

    n_root = rng.poisson(lam / mu)
    next_id = n_root
    alive: dict[int, np.ndarray] = {tree.root: np.arange(n_root)}
    for i in tree.postorder[::-1]:
        if i == tree.root:
            continue
        top = alive[int(tree.parent[i])]
        length = lengths[i]
        pos = cats[i]
        k = len(pos)
        inherited = top[rng.random(len(top)) < math.exp(-mu * length) * (1 - kappa) ** k]

        n_births = rng.poisson(lam * length)
        at = rng.uniform(0.0, length, size=n_births)
        later = k - np.searchsorted(pos, at, side="right")
        p_births = np.exp(-mu * (length - at)) * (1 - kappa) ** later
        born = rng.random(n_births) < p_births

        n_cat = rng.poisson(nu, size=k)
        cat_at = np.repeat(pos, n_cat)
        cat_later = np.repeat(k - 1 - np.arange(k), n_cat)
        born_cat = rng.random(len(cat_at)) < np.exp(-mu * (length - cat_at)) * (1 - kappa) ** cat_later

        n_new = int(born.sum() + born_cat.sum())
        fresh = np.arange(next_id, next_id + n_new)
        next_id += n_new
        alive[int(i)] = np.concatenate([inherited, fresh])

    L = tree.n_leaves
    cells = np.zeros((L, next_id), dtype=np.int8)
    for leaf in range(L):
        cells[leaf, alive[leaf]] = PRESENT
    new_cats = np.zeros(tree.n_nodes, dtype=np.int64)
    for i, pos in cats.items():
        new_cats[i] = len(pos)
    return FullSimulation(tree.replace(cats=new_cats), cells, cats)


def apply_masking(full: np.ndarray, xi, seed=None) -> tuple[np.ndarray, np.ndarray]:
    """Independent Bernoulli(xi_i) visibility per cell; returns ``(mask, masked)``.

    ``mask`` is True where the cell is visible.
    """
    rng = _rng(seed)
    xi = np.asarray(xi, dtype=float)
    full = np.asarray(full)
    if xi.shape != (full.shape[0],):
        raise ValueError(f"xi has {xi.size} entries for {full.shape[0]} rows")
    if ((xi < 0) | (xi > 1)).any():
        raise ValueError("xi must lie in [0, 1]")
    mask = rng.random(full.shape) < xi[:, None]
    masked = np.where(mask, full, UNKNOWN).astype(np.int8)
    return mask, masked


def register(masked: TraitMatrix, rule: RegistrationRule) -> TraitMatrix:
    """Keep exactly the columns the rule accepts, in their original order."""
    y, q = masked.column_counts()
    keep = rule.keep_mask(y, q, masked.n_languages)
    if not keep.any():
        raise ValueError("no column survives registration")
    return masked.select_columns(keep)


def lambda_for_target(tree: Phylogeny, params: ModelParams, rule: RegistrationRule, n_target: float) -> float:
    """Birth rate giving ``n_target`` registered classes on average."""
    return n_target / normalizer_X(tree, params, rule)


# -- borrowing -----------------------------------------------------------------

class _Lineage:
    """A bag of class ids with O(1) insert, delete and uniform draw."""

    __slots__ = ("items", "where")

    def __init__(self, items=()):
        self.items = list(items)
        self.where = {c: j for j, c in enumerate(self.items)}

    def __len__(self):
        return len(self.items)

    def __contains__(self, c):
        return c in self.where

    def add(self, c):
        if c not in self.where:
            self.where[c] = len(self.items)
            self.items.append(c)

    def remove_at(self, j):
        c = self.items[j]
        last = self.items.pop()
        del self.where[c]
        if j < len(self.items):
            self.items[j] = last
            self.where[last] = j

    def copy(self):
        return _Lineage(self.items)


def simulate_borrowing(
    tree: Phylogeny, params: ModelParams, borrow_rate: float, seed=None
) -> FullSimulation:
    """Simulate with global borrowing between contemporaneous lineages.

    Every copy of a class is, at rate ``borrow_rate``, copied into one lineage
    drawn uniformly from the others alive at that moment.  Catastrophes
    occur at rate ``rho`` per lineage.  With ``borrow_rate == 0`` this is
    :func:`simulate_full_matrix`.
    """
    if borrow_rate < 0:
        raise ValueError("borrowing rate must be non-negative")
    if borrow_rate == 0:
        return simulate_full_matrix(tree, params, seed)
    if params.lam is None:
        raise ValueError("simulation needs a birth rate lambda")
    rng = _rng(seed)
    lam, mu, kappa, rho = params.lam, params.mu, params.kappa, params.rho
    nu = kappa * lam / mu

    n_root = rng.poisson(lam / mu)
    next_id = n_root
    ages = tree.ages
    ch = tree.children
    # active lineages are edges, keyed by their lower node
    active: dict[int, _Lineage] = {}
    for c in ch[tree.root]:
        active[int(c)] = _Lineage(range(n_root))
    cat_count = np.zeros(tree.n_nodes, dtype=np.int64)
    leaves: dict[int, _Lineage] = {}

    now = tree.root_age
    while active:
        keys = list(active)
        nxt = max(keys, key=lambda i: ages[i])
        end = ages[nxt]
        while True:
            keys = list(active)
            sizes = np.array([len(active[k]) for k in keys], dtype=float)
            copies = sizes.sum()
            r_death = mu * copies
            r_birth = lam * len(keys)
            r_cat = rho * len(keys)
            r_borrow = borrow_rate * copies if len(keys) > 1 else 0.0
            total = r_death + r_birth + r_cat + r_borrow
            wait = rng.exponential(1 / total) if total > 0 else math.inf
            if now - wait <= end:
                now = end
                break
            now -= wait
            u = rng.random() * total
            if u < r_death + r_borrow:
                j = rng.choice(len(keys), p=sizes / copies)
                lin = active[keys[j]]
                pos = int(rng.integers(len(lin)))
                if u < r_death:
                    lin.remove_at(pos)
                else:
                    cls = lin.items[pos]
                    others = keys[:j] + keys[j + 1:]
                    active[others[int(rng.integers(len(others)))]].add(cls)
            elif u < r_death + r_borrow + r_birth:
                key = keys[int(rng.integers(len(keys)))]
                active[key].add(next_id)
                next_id += 1
            else:
                key = keys[int(rng.integers(len(keys)))]
                lin = active[key]
                kill = rng.random(len(lin)) < kappa
                survivors = [c for c, dead in zip(lin.items, kill) if not dead]
                fresh = list(range(next_id, next_id + rng.poisson(nu)))
                next_id += len(fresh)
                active[key] = _Lineage(survivors + fresh)
                cat_count[key] += 1
        lin = active.pop(nxt)
        if nxt < tree.n_leaves:
            leaves[nxt] = lin
        else:
            for c in ch[nxt]:
                active[int(c)] = lin.copy()

    # only classes present at some leaf get a column
    seen = set()
    for lin in leaves.values():
        seen.update(lin.items)
    keep_ids = sorted(seen)
    index = {c: j for j, c in enumerate(keep_ids)}
    cells = np.zeros((tree.n_leaves, len(keep_ids)), dtype=np.int8)
    for leaf, lin in leaves.items():
        cells[leaf, [index[c] for c in lin.items]] = PRESENT
    return FullSimulation(tree.replace(cats=cat_count), cells, {})


# -- bundles -------------------------------------------------------------------

@dataclass
class SyntheticBundle:
    tree: Phylogeny
    params: ModelParams
    full: TraitMatrix
    mask: np.ndarray
    masked: TraitMatrix
    data: TraitMatrix
    rule: RegistrationRule
    seed: int | None
    borrow_rate: float = 0.0

    def truth(self) -> dict:
        return {
            "root_age": self.tree.root_age,
            "k": [int(k) for k in self.tree.cats],
            "k_total": self.tree.k_total,
            "params": self.params.to_dict(self.tree.labels),
            "rule": str(self.rule),
            "seed": self.seed,
            "borrow_rate": self.borrow_rate,
            "n_full": self.full.n_classes,
            "n_registered": self.data.n_classes,
        }

    def write(self, outdir) -> Path:
        out = Path(outdir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "full.csv").write_text(self.full.to_text())
        mask_rows = ["language," + ",".join(self.full.classes)]
        for lab, row in zip(self.full.languages, self.mask):
            mask_rows.append(lab + "," + ",".join("1" if v else "0" for v in row))
        (out / "mask.csv").write_text("\n".join(mask_rows) + "\n")
        (out / "masked.csv").write_text(self.masked.to_text())
        (out / "data.csv").write_text(self.data.to_text())
        (out / "tree.nwk").write_text(encode_newick(self.tree) + "\n")
        (out / "truth.json").write_text(json.dumps(self.truth(), indent=2, sort_keys=True) + "\n")
        return out


def make_bundle(
    tree: Phylogeny,
    params: ModelParams,
    rule: RegistrationRule,
    seed: int | None = None,
    borrow_rate: float = 0.0,
    catastrophes: str = "sample",
) -> SyntheticBundle:
    """Simulate, mask and register one synthetic dataset from a single seed."""
    rng = np.random.default_rng(seed)
    if borrow_rate > 0:
        sim = simulate_borrowing(tree, params, borrow_rate, rng)
    else:
        sim = simulate_full_matrix(tree, params, rng, catastrophes)
    classes = tuple(f"c{j + 1}" for j in range(sim.cells.shape[1]))
    if not classes:
        raise ValueError("the simulation produced no classes")
    full = TraitMatrix(tree.labels, classes, sim.cells)
    mask, masked_cells = apply_masking(sim.cells, params.xi, rng)
    masked = TraitMatrix(tree.labels, classes, masked_cells)
    data = register(masked, rule)
    return SyntheticBundle(sim.tree, params, full, mask, masked, data, rule, seed, borrow_rate)
