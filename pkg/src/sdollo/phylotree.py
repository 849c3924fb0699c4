"""Rooted, calibrated binary trees with catastrophe counts and the tree prior.

Node numbering: leaves are ``0..L-1`` in label order, internal nodes
``L..2L-2`` are ranked by age so the root is always ``2L-2``.  The Adam node
above the root is implicit; the root's parent is stored as ``-1``.
Catastrophe counts live on the edge above each node; the root entry is
always zero.
"""

from __future__ import annotations

import json
import math
import warnings
from collections import OrderedDict
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np


class TreeStructureError(ValueError):
    """The parent array does not describe a rooted binary tree."""


class InfeasibleError(ValueError):
    """Calibrations leave no admissible age for some node."""


@dataclass(frozen=True, eq=False)
class Phylogeny:
    labels: tuple[str, ...]
    parent: np.ndarray = field(repr=False)
    ages: np.ndarray = field(repr=False)
    cats: np.ndarray = field(repr=False)

    def __post_init__(self):
        labels = tuple(str(s) for s in self.labels)
        n_leaves = len(labels)
        if n_leaves < 2:
            raise TreeStructureError("need at least two leaves")
        if len(set(labels)) != n_leaves:
            raise TreeStructureError("duplicate leaf labels")
        parent = np.array(self.parent, dtype=np.int64)
        ages = np.array(self.ages, dtype=float)
        cats = np.array(self.cats, dtype=np.int64)
        n_nodes = 2 * n_leaves - 1
        if parent.shape != (n_nodes,) or ages.shape != (n_nodes,) or cats.shape != (n_nodes,):
            raise TreeStructureError(f"expected arrays of length {n_nodes}")
        if parent.tobytes() not in _TOPOLOGIES:
            _check_structure(parent, n_leaves)
        if (cats < 0).any():
            raise TreeStructureError("negative catastrophe count")
        parent, ages, cats = _canonical(parent, ages, cats, n_leaves)
        for arr in (parent, ages, cats):
            arr.setflags(write=False)
        object.__setattr__(self, "labels", labels)
        object.__setattr__(self, "parent", parent)
        object.__setattr__(self, "ages", ages)
        object.__setattr__(self, "cats", cats)

    # -- basic shape -------------------------------------------------------
    @property
    def n_leaves(self) -> int:
        return len(self.labels)

    @property
    def n_nodes(self) -> int:
        return 2 * len(self.labels) - 1

    @property
    def root(self) -> int:
        return self.n_nodes - 1

    @property
    def root_age(self) -> float:
        return float(self.ages[self.root])

    @property
    def k_total(self) -> int:
        return int(self.cats.sum())

    def is_leaf(self, i: int) -> bool:
        return i < self.n_leaves

    @property
    def _topo(self) -> "_Topology":
        return _topology(self.parent, self.n_leaves)

    @property
    def children(self) -> np.ndarray:
        """``(n_nodes, 2)`` child indices, ``-1`` for leaves."""
        return self._topo.children

    @property
    def postorder(self) -> np.ndarray:
        """Node indices with every child before its parent."""
        return self._topo.postorder

    @property
    def internal_order(self) -> list[tuple[int, int, int]]:
        """``(node, left child, right child)`` for internal nodes in post-order."""
        return self._topo.internal_order

    @property
    def levels(self) -> list[tuple[np.ndarray, np.ndarray]]:
        """Internal nodes grouped by height, each with its children (left block, then right)."""
        return self._topo.levels

    @property
    def leafsets(self) -> np.ndarray:
        """Boolean ``(n_nodes, L)`` matrix: row ``i`` marks leaves below ``i``."""
        return self._topo.leafsets

    @property
    def subtree_sizes(self) -> np.ndarray:
        return self._topo.sizes

    def clade(self, i: int) -> frozenset[str]:
        return frozenset(self.labels[j] for j in np.flatnonzero(self.leafsets[i]))

    def clades(self) -> dict[frozenset[str], int]:
        """Map from leaf-label set to node for every internal node."""
        return {self.clade(i): i for i in range(self.n_leaves, self.n_nodes)}

    def sibling(self, i: int) -> int:
        p = self.parent[i]
        if p < 0:
            raise ValueError("root has no sibling")
        a, b = self.children[p]
        return int(b if a == i else a)

    def edge_lengths(self) -> np.ndarray:
        """Length of the edge above each node; zero for the root."""
        out = np.zeros(self.n_nodes)
        nr = self.parent >= 0
        out[nr] = self.ages[self.parent[nr]] - self.ages[nr]
        return out

    def leaf_index(self, label: str) -> int:
        try:
            return self.labels.index(label)
        except ValueError:
            raise KeyError(f"unknown leaf label {label!r}") from None

    # -- snapshots ---------------------------------------------------------
    def replace(self, *, parent=None, ages=None, cats=None) -> "Phylogeny":
        return Phylogeny(
            self.labels,
            self.parent if parent is None else parent,
            self.ages if ages is None else ages,
            self.cats if cats is None else cats,
        )

    def with_leaf_order(self, labels: Sequence[str]) -> "Phylogeny":
        """Renumber leaves so that leaf ``i`` carries ``labels[i]``."""
        labels = tuple(labels)
        if sorted(labels) != sorted(self.labels):
            raise ValueError("leaf label sets differ")
        if labels == self.labels:
            return self
        new_of_old = np.arange(self.n_nodes)
        for old, lab in enumerate(self.labels):
            new_of_old[old] = labels.index(lab)
        parent = np.full(self.n_nodes, -1, dtype=np.int64)
        ages = np.empty(self.n_nodes)
        cats = np.empty(self.n_nodes, dtype=np.int64)
        for old in range(self.n_nodes):
            new = new_of_old[old]
            p = self.parent[old]
            parent[new] = -1 if p < 0 else new_of_old[p]
            ages[new] = self.ages[old]
            cats[new] = self.cats[old]
        return Phylogeny(labels, parent, ages, cats)

    def __eq__(self, other):
        # equality is between labelled trees, whatever the leaf numbering
        if not isinstance(other, Phylogeny):
            return NotImplemented
        if self.labels != other.labels:
            if sorted(self.labels) != sorted(other.labels):
                return False
            other = other.with_leaf_order(self.labels)
        return (
            np.array_equal(self.parent, other.parent)
            and np.array_equal(self.ages, other.ages)
            and np.array_equal(self.cats, other.cats)
        )

    def __hash__(self):
        t = self.with_leaf_order(sorted(self.labels))
        return hash((t.labels, t.parent.tobytes(), t.ages.tobytes(), t.cats.tobytes()))

    def topology_key(self) -> bytes:
        return self.parent.tobytes()

    def ordered_history(self) -> tuple[frozenset[str], ...]:
        """Clades of the internal nodes, youngest first (root included)."""
        return tuple(self.clade(i) for i in range(self.n_leaves, self.n_nodes))


class _Topology:
    """Structure shared by every tree with the same parent array."""

    def __init__(self, parent: np.ndarray, n_leaves: int):
        n_nodes = len(parent)
        root = n_nodes - 1
        ch = np.full((n_nodes, 2), -1, dtype=np.int64)
        fill = np.zeros(n_nodes, dtype=np.int64)
        for i, p in enumerate(parent.tolist()):
            if p >= 0:
                ch[p, fill[p]] = i
                fill[p] += 1
        order = []
        stack = [(root, False)]
        while stack:
            node, done = stack.pop()
            if done or node < n_leaves:
                order.append(node)
                continue
            stack.append((node, True))
            stack.append((int(ch[node, 1]), False))
            stack.append((int(ch[node, 0]), False))
        m = np.zeros((n_nodes, n_leaves), dtype=bool)
        m[np.arange(n_leaves), np.arange(n_leaves)] = True
        internal = []
        for i in order:
            if i >= n_leaves:
                a, b = int(ch[i, 0]), int(ch[i, 1])
                m[i] = m[a] | m[b]
                internal.append((i, a, b))
        height = [0] * n_nodes
        for i, a, b in internal:
            height[i] = 1 + max(height[a], height[b])
        levels = []
        for h in range(1, max(height) + 1):
            nodes = [(i, a, b) for i, a, b in internal if height[i] == h]
            idx = np.array([i for i, _, _ in nodes], dtype=np.int64)
            kids = np.array([a for _, a, _ in nodes] + [b for _, _, b in nodes], dtype=np.int64)
            levels.append((idx, kids))
        self.levels = levels
        for arr in (ch, m):
            arr.setflags(write=False)
        self.children = ch
        self.postorder = np.array(order, dtype=np.int64)
        self.postorder.setflags(write=False)
        self.internal_order = internal
        self.leafsets = m
        self.sizes = m.sum(axis=1)
        self.sizes.setflags(write=False)


_TOPOLOGIES: "OrderedDict[bytes, _Topology]" = OrderedDict()
_TOPOLOGY_CACHE_SIZE = 512


def _topology(parent: np.ndarray, n_leaves: int) -> _Topology:
    key = parent.tobytes()
    hit = _TOPOLOGIES.get(key)
    if hit is None:
        hit = _Topology(parent, n_leaves)
        _TOPOLOGIES[key] = hit
        if len(_TOPOLOGIES) > _TOPOLOGY_CACHE_SIZE:
            _TOPOLOGIES.popitem(last=False)
    else:
        _TOPOLOGIES.move_to_end(key)
    return hit


def _check_structure(parent: np.ndarray, n_leaves: int) -> None:
    n_nodes = 2 * n_leaves - 1
    roots = np.flatnonzero(parent < 0)
    if len(roots) != 1:
        raise TreeStructureError(f"expected one root, found {len(roots)}")
    if roots[0] < n_leaves:
        raise TreeStructureError("a leaf cannot be the root")
    if (parent >= n_nodes).any():
        raise TreeStructureError("parent index out of range")
    if (parent[parent >= 0] < n_leaves).any():
        raise TreeStructureError("a leaf has children")
    counts = np.bincount(parent[parent >= 0], minlength=n_nodes)
    if (counts[n_leaves:] != 2).any():
        bad = int(np.flatnonzero(counts[n_leaves:] != 2)[0]) + n_leaves
        raise TreeStructureError(f"node {bad} has {counts[bad]} children, expected 2")
    _depths(parent)


def _depths(parent: np.ndarray) -> np.ndarray:
    """Number of edges from each node up to the root; detects cycles."""
    n = len(parent)
    depth = np.zeros(n, dtype=np.int64)
    cur = parent.copy()
    for _ in range(n + 1):
        live = cur >= 0
        if not live.any():
            return depth
        depth += live
        cur[live] = parent[cur[live]]
    raise TreeStructureError("cycle in parent array")


def _canonical(parent, ages, cats, n_leaves):
    """Renumber internal nodes by increasing age, root last."""
    n_nodes = len(parent)
    if parent[-1] < 0 and (np.diff(ages[n_leaves:-1]) > 0).all():
        # already ranked by age; strict ages imply parents follow children
        return parent, ages, cats
    internal = np.arange(n_leaves, n_nodes)
    root = int(np.flatnonzero(parent < 0)[0])
    # depth breaks ties so that parents always follow children
    depth = _depths(parent)
    others = [i for i in internal if i != root]
    others.sort(key=lambda i: (ages[i], -depth[i], i))
    order = list(range(n_leaves)) + others + [root]
    if order == list(range(n_nodes)):
        return parent, ages, cats
    new_of_old = np.empty(n_nodes, dtype=np.int64)
    new_of_old[order] = np.arange(n_nodes)
    new_parent = np.where(parent[order] >= 0, new_of_old[np.maximum(parent[order], 0)], -1)
    return new_parent, ages[order].copy(), cats[order].copy()


# -- calibrations ------------------------------------------------------------

@dataclass(frozen=True)
class Calibration:
    """A clade (monophyly + age of its root) or a leaf-age constraint."""

    kind: str
    leaves: frozenset[str]
    lower: float | None = None
    upper: float | None = None
    name: str = ""

    def __post_init__(self):
        if self.kind not in ("clade", "leaf"):
            raise ValueError(f"calibration kind must be 'clade' or 'leaf', not {self.kind!r}")
        object.__setattr__(self, "leaves", frozenset(self.leaves))
        if not self.leaves:
            raise ValueError("calibration leaf set is empty")
        if self.kind == "leaf" and len(self.leaves) != 1:
            raise ValueError("leaf-age calibration must name exactly one leaf")
        if self.lower is not None and self.upper is not None and self.lower > self.upper:
            raise ValueError(f"calibration {self.label}: min {self.lower} exceeds max {self.upper}")
        if not self.name:
            object.__setattr__(self, "name", self.default_name())

    def default_name(self) -> str:
        if self.kind == "leaf":
            return next(iter(self.leaves))
        return "+".join(sorted(self.leaves))

    @property
    def label(self) -> str:
        return self.name or self.default_name()

    def lo(self) -> float:
        return -math.inf if self.lower is None else float(self.lower)

    def hi(self) -> float:
        return math.inf if self.upper is None else float(self.upper)

    def contains_age(self, age: float) -> bool:
        return self.lo() <= age <= self.hi()

    def node(self, tree: Phylogeny) -> int:
        if self.kind == "leaf":
            return tree.leaf_index(next(iter(self.leaves)))
        return mrca(tree, self.leaves)

    def satisfied(self, tree: Phylogeny) -> bool:
        i = self.node(tree)
        if self.kind == "clade" and tree.clade(i) != self.leaves:
            return False
        return self.contains_age(float(tree.ages[i]))


@dataclass(frozen=True)
class CalibrationSet:
    calibrations: tuple[Calibration, ...] = ()
    root_cap: float = 16000.0

    def __post_init__(self):
        object.__setattr__(self, "calibrations", tuple(self.calibrations))
        if not self.root_cap > 0:
            raise ValueError("root cap T must be positive")
        his = [c.upper for c in self.calibrations if c.upper is not None]
        if his and max(his) >= self.root_cap:
            warnings.warn(
                f"root cap {self.root_cap} does not exceed the largest calibration bound {max(his)}",
                stacklevel=2,
            )
        names = [c.label for c in self.calibrations]
        if len(set(names)) != len(names):
            raise ValueError("calibration names must be unique")
        leaf_map = {}
        for c in self.calibrations:
            if c.kind == "leaf":
                leaf_map.setdefault(next(iter(c.leaves)), c)
        object.__setattr__(self, "_leaf_map", leaf_map)
        object.__setattr__(self, "_memo", OrderedDict())

    def __len__(self):
        return len(self.calibrations)

    def index(self, key: str | int) -> int:
        if isinstance(key, int) or (isinstance(key, str) and key.isdigit()):
            k = int(key)
            if not 0 <= k < len(self.calibrations):
                raise KeyError(f"no calibration number {k}")
            return k
        for j, c in enumerate(self.calibrations):
            if c.label == key:
                return j
        raise KeyError(f"no calibration named {key!r}")

    def without(self, key: str | int) -> "CalibrationSet":
        j = self.index(key)
        rest = self.calibrations[:j] + self.calibrations[j + 1:]
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            return CalibrationSet(rest, self.root_cap)

    def leaf_calibration(self, label: str) -> Calibration | None:
        return self._leaf_map.get(label)

    def clade_nodes(self, tree: Phylogeny) -> list[tuple[int, bool, Calibration]]:
        """For each clade calibration: its MRCA in ``tree`` and whether it is monophyletic."""
        key = (tree.labels, tree.topology_key())
        hit = self._memo.get(key)
        if hit is None:
            self.check_labels(tree.labels)
            hit = []
            for c in self.clades():
                i = mrca(tree, c.leaves)
                hit.append((i, tree.clade(i) == c.leaves, c))
            self._memo[key] = hit
            if len(self._memo) > 256:
                self._memo.popitem(last=False)
        return hit

    def clades(self) -> list[Calibration]:
        return [c for c in self.calibrations if c.kind == "clade"]

    def check_labels(self, labels: Iterable[str]) -> None:
        labels = set(labels)
        for c in self.calibrations:
            missing = c.leaves - labels
            if missing:
                raise KeyError(f"calibration {c.label} names unknown leaves {sorted(missing)}")

    @classmethod
    def from_dict(cls, obj: dict) -> "CalibrationSet":
        cals = []
        for k, item in enumerate(obj.get("clades", [])):
            try:
                cals.append(
                    Calibration(
                        "clade",
                        frozenset(item["leaves"]),
                        item.get("min"),
                        item.get("max"),
                        item.get("name", ""),
                    )
                )
            except KeyError as exc:
                raise ValueError(f"clades[{k}] is missing field {exc}") from None
        for k, item in enumerate(obj.get("leaf_ages", [])):
            try:
                cals.append(
                    Calibration(
                        "leaf", frozenset([item["leaf"]]), item.get("min"), item.get("max"), item.get("name", "")
                    )
                )
            except KeyError as exc:
                raise ValueError(f"leaf_ages[{k}] is missing field {exc}") from None
        if "root_cap" not in obj:
            raise ValueError("calibration file is missing field 'root_cap'")
        return cls(tuple(cals), float(obj["root_cap"]))

    def to_dict(self) -> dict:
        out = {"clades": [], "leaf_ages": [], "root_cap": self.root_cap}
        for c in self.calibrations:
            if c.kind == "clade":
                out["clades"].append(
                    {"name": c.label, "leaves": sorted(c.leaves), "min": c.lower, "max": c.upper}
                )
            else:
                out["leaf_ages"].append(
                    {"name": c.label, "leaf": next(iter(c.leaves)), "min": c.lower, "max": c.upper}
                )
        return out


def load_calibrations(path) -> CalibrationSet:
    with open(path) as fh:
        return CalibrationSet.from_dict(json.load(fh))


# -- operations on trees -------------------------------------------------------

def mrca(tree: Phylogeny, leaves: Iterable[str | int]) -> int:
    """Deepest node whose subtree contains every given leaf."""
    idx = []
    for x in leaves:
        idx.append(x if isinstance(x, (int, np.integer)) else tree.leaf_index(x))
    if not idx:
        raise ValueError("empty leaf set")
    ls = tree.leafsets
    has_all = ls[:, idx].all(axis=1)
    cands = np.flatnonzero(has_all)
    return int(cands[np.argmin(tree.subtree_sizes[cands])])


def tree_length(tree: Phylogeny) -> float:
    """Sum of finite edge lengths (the infinite edge to the Adam node excluded)."""
    return float(tree.edge_lengths().sum())


def age_bounds(tree: Phylogeny, cals: CalibrationSet) -> tuple[np.ndarray, np.ndarray]:
    """Least and greatest admissible ages for every node given the topology.

    Leaves without a leaf-age calibration have their ages fixed.
    """
    clade_nodes = cals.clade_nodes(tree)
    n, L = tree.n_nodes, tree.n_leaves
    lo = [-math.inf] * n
    hi = [math.inf] * n
    ages = tree.ages.tolist()
    for j, lab in enumerate(tree.labels):
        c = cals.leaf_calibration(lab)
        if c is None:
            lo[j] = hi[j] = ages[j]
        else:
            lo[j] = max(c.lo(), 0.0)
            hi[j] = c.hi()
    for i, _, c in clade_nodes:
        if i >= L:
            lo[i] = max(lo[i], c.lo())
            hi[i] = min(hi[i], c.hi())
    root = tree.root
    hi[root] = min(hi[root], cals.root_cap)
    order = tree.internal_order
    for i, a, b in order:
        lo[i] = max(lo[i], lo[a], lo[b])
    for i, a, b in reversed(order):
        h = hi[i]
        if hi[a] > h:
            hi[a] = h
        if hi[b] > h:
            hi[b] = h
    return np.array(lo), np.array(hi)


def node_age_bounds(tree: Phylogeny, cals: CalibrationSet, node: int) -> tuple[float, float]:
    lo, hi = age_bounds(tree, cals)
    if lo[node] > hi[node]:
        raise InfeasibleError(f"node {node}: lower bound {lo[node]} exceeds upper bound {hi[node]}")
    return float(lo[node]), float(hi[node])


def validate(tree: Phylogeny, cals: CalibrationSet) -> list[str]:
    """Reasons why ``tree`` lies outside the calibrated tree space (empty if inside)."""
    if tree.topology_key() not in _TOPOLOGIES:
        _check_structure(np.asarray(tree.parent), tree.n_leaves)
    clade_nodes = cals.clade_nodes(tree)
    out = []
    ages = tree.ages
    if not np.isfinite(ages).all():
        out.append("non-finite node age")
        return out
    if (ages < 0).any():
        out.append("negative node age")
    nr = tree.parent[:-1]
    bad = np.flatnonzero(ages[:-1] >= ages[nr])
    for i in bad:
        out.append(f"node {i} is not younger than its parent")
    if ages[-1] > cals.root_cap:
        out.append(f"root age {ages[-1]} exceeds root cap {cals.root_cap}")
    for i, mono, c in clade_nodes:
        if not mono:
            out.append(f"calibration {c.label}: clade is not monophyletic")
        elif not c.contains_age(float(ages[i])):
            out.append(f"calibration {c.label}: age {ages[i]:.6g} outside [{c.lower}, {c.upper}]")
    for lab, c in cals._leaf_map.items():
        j = tree.leaf_index(lab)
        if not c.contains_age(float(ages[j])):
            out.append(f"calibration {c.label}: age {ages[j]:.6g} outside [{c.lower}, {c.upper}]")
    return out


def prior_log_density(tree: Phylogeny, cals: CalibrationSet) -> float:
    """Log tree prior, up to a constant; ``-inf`` outside the calibrated space.

    The density is the product of ``1/(t_root - t_min_i)`` over non-root
    nodes whose admissible ages are capped only by the root cap.  This gives
    a uniform marginal root age when leaves are contemporaneous and there
    are no calibrations.
    """
    if validate(tree, cals):
        return -math.inf
    lo, hi = age_bounds(tree, cals)
    if (lo > hi).any():
        return -math.inf
    capped = hi[:-1] == cals.root_cap
    gaps = tree.root_age - lo[:-1][capped]
    if (gaps <= 0).any():
        return -math.inf
    return -float(np.log(gaps).sum())


def random_tree(
    labels: Sequence[str],
    rng: np.random.Generator,
    root_age: float,
    leaf_ages: Sequence[float] | None = None,
) -> Phylogeny:
    """Random ranked tree: uniform pairwise joining with sorted uniform node ages.

    Uniform joining gives the Yule distribution on ordered histories.
    """
    L = len(labels)
    leaf_ages = np.zeros(L) if leaf_ages is None else np.asarray(leaf_ages, dtype=float)
    base = float(leaf_ages.max())
    if root_age <= base:
        raise ValueError("root age must exceed leaf ages")
    inner = np.sort(rng.uniform(base, root_age, size=L - 2))
    node_ages = np.concatenate([leaf_ages, inner, [root_age]])
    parent = np.full(2 * L - 1, -1, dtype=np.int64)
    active = list(range(L))
    for new in range(L, 2 * L - 1):
        a, b = rng.choice(len(active), size=2, replace=False)
        x, y = active[a], active[b]
        parent[x] = parent[y] = new
        active = [z for z in active if z not in (x, y)] + [new]
    return Phylogeny(tuple(labels), parent, node_ages, np.zeros(2 * L - 1, dtype=np.int64))
