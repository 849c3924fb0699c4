import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import random_calibrated_tree
from sdollo.newick import NewickError, decode_newick, encode_newick, read_trees, strip_comment


def test_plain_lengths():
    t = decode_newick("((A:1000,B:1000):500,C:1500);")
    assert t.labels == ("A", "B", "C")
    assert t.root_age == 1500
    assert t.ages[t.leaf_index("A")] == 0
    assert t.clade(3) == frozenset("AB") and t.ages[3] == 1000


def test_catastrophe_annotation():
    t = decode_newick("(A:1000[&k=2],B:1000):0;")
    assert t.cats[t.leaf_index("A")] == 2
    assert t.cats[t.leaf_index("B")] == 0
    assert t.root_age == 1000


def test_quoted_labels_round_trip():
    t = decode_newick("('Old English':10,'it''s':10);")
    assert set(t.labels) == {"Old English", "it's"}
    assert decode_newick(encode_newick(t)) == t


@given(st.integers(2, 12), st.integers(0, 2**32 - 1))
@settings(max_examples=100, deadline=None)
def test_round_trip(n, seed):
    t = random_calibrated_tree(np.random.default_rng(seed), n, root_age=12345.678)
    back = decode_newick(encode_newick(t), t.labels)
    assert back == t
    assert np.array_equal(back.ages, t.ages)


@pytest.mark.parametrize(
    "text",
    ["((A:1,B:1):1,C:2)", "(A:1,B:1;", "(A:1,B:x);", "(A:1[&k=1.5],B:1);", "(A:1,B:1); junk", "(A:1,B:1,C:1);"],
)
def test_malformed(text):
    with pytest.raises(NewickError, match="position"):
        decode_newick(text)


def test_error_position_points_at_problem():
    with pytest.raises(NewickError) as info:
        decode_newick("(A:1,B:1)x;;")
    assert info.value.pos >= 10


def test_read_trees_skips_iteration_tags(tmp_path, rng):
    trees = [random_calibrated_tree(rng, 5) for _ in range(3)]
    path = tmp_path / "t.nwk"
    path.write_text("".join(f"[&iter={j}] {encode_newick(t)}\n" for j, t in enumerate(trees)))
    assert read_trees(path) == trees
    assert strip_comment("[&iter=7] (A:1,B:1);") == "(A:1,B:1);"
