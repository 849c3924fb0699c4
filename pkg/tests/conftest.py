import math

import numpy as np
import pytest

from sdollo.dollo import ModelParams
from sdollo.phylotree import Phylogeny, random_tree

TABLE_1 = """language,c1,c2,c3
Old English,1,0,0
Old High German,1,1,0
Avestan,0,0,1
Old Church Slavonic,0,0,1
Latin,0,0,1
Oscan,?,?,?
"""


def cherry(length: float = math.log(2), cats=(0, 0)) -> Phylogeny:
    """Two leaves joined at ``length``; with mu = 1 each edge survives with e^-length."""
    return Phylogeny(("A", "B"), np.array([2, 2, -1]), np.array([0.0, 0.0, length]), np.array([*cats, 0]))


def random_params(rng, n_leaves: int, xi_low: float = 0.3) -> ModelParams:
    xi = rng.uniform(xi_low, 1.0, size=n_leaves)
    xi[rng.random(n_leaves) < 0.3] = 1.0
    return ModelParams(float(rng.uniform(2e-4, 2e-3)), float(rng.uniform(0, 0.6)), 1e-4, xi)


def random_calibrated_tree(rng, n_leaves: int, root_age: float = 2000.0, max_cats: int = 2) -> Phylogeny:
    labels = [f"L{j}" for j in range(n_leaves)]
    tree = random_tree(labels, rng, root_age)
    cats = rng.integers(0, max_cats + 1, size=tree.n_nodes)
    cats[tree.root] = 0
    return tree.replace(cats=cats)


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)
