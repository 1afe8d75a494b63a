import threading

import numpy as np
import pytest

from lgc3d.indexing import PermutationIndex
from lgc3d.indexing import concat_orders
from lgc3d.indexing import gather
from lgc3d.indexing import instrumentation
from lgc3d.indexing import merge_indices
from lgc3d.indexing import sort_by_group
from lgc3d.utils import LabelRangeError
from lgc3d.utils import ShapeError


def test_sort_by_group_is_stable():
    """Test that items are sorted by group, keeping their original order inside a group."""
    assert sort_by_group(np.array([1, 0, 1, 0])).perm.tolist() == [1, 3, 0, 2]
    assert sort_by_group(np.array([2, 2, 0, 1, 0])).perm.tolist() == [2, 4, 3, 0, 1]


def test_sort_by_group_negative():
    """Test that negative group ids are refused."""
    with pytest.raises(LabelRangeError):
        sort_by_group(np.array([0, -1]))


def test_inverse():
    """Test that a permutation and its inverse compose to the identity."""
    p = PermutationIndex(np.array([2, 0, 3, 1]))
    assert p.inverse.tolist() == [1, 3, 0, 2]
    assert p.then(p.inverted()).is_identity
    assert p.inverted().inverted() == p


def test_invalid_permutations():
    """Test that out-of-range or repeated entries are refused."""
    with pytest.raises(LabelRangeError):
        PermutationIndex(np.array([0, 2]))
    with pytest.raises(LabelRangeError):
        PermutationIndex(np.array([0, 0, 1]))


def test_permutation_is_read_only():
    """Test that a permutation index cannot be modified in place, nor alias its input."""
    source = np.array([1, 0])
    p = PermutationIndex(source)
    source[0] = 0
    assert p.perm.tolist() == [1, 0]
    with pytest.raises(ValueError):
        p.perm[0] = 1


def test_then_matches_two_gathers(rng):
    """Test that one gather with a composed permutation equals two successive gathers."""
    x = rng.standard_normal((2, 5, 1, 1, 1))
    a = PermutationIndex(rng.permutation(5))
    b = PermutationIndex(rng.permutation(5))
    np.testing.assert_array_equal(gather(gather(x, a), b), gather(x, a.then(b)))


def test_then_length_mismatch():
    """Test that permutations of different lengths do not compose."""
    with pytest.raises(ShapeError):
        PermutationIndex.identity(2).then(PermutationIndex.identity(3))


def test_merge_indices(rng):
    """Test that reading a physical layout through the merged index gives the group-sorted logical order."""
    logical = rng.standard_normal((1, 6, 1, 1, 1))
    order = PermutationIndex(rng.permutation(6))
    physical = gather(logical, order)
    sort = sort_by_group(rng.integers(0, 3, size=6))
    merged = merge_indices(order, sort)
    np.testing.assert_array_equal(gather(physical, merged), gather(logical, sort))


def test_merge_indices_identity_order():
    """Test that merging with an identity layout returns the group sort itself."""
    sort = sort_by_group(np.array([1, 0, 1, 0]))
    assert merge_indices(PermutationIndex.identity(4), sort) == sort
    with pytest.raises(ShapeError):
        merge_indices(PermutationIndex.identity(3), sort)


def test_concat_orders():
    """Test that concatenated layouts keep each block's order, shifted by the preceding sizes."""
    order = concat_orders([PermutationIndex(np.array([1, 0])), PermutationIndex(np.array([2, 0, 1]))])
    assert order.perm.tolist() == [1, 0, 4, 2, 3]


def test_gather_counters():
    """Test that gathers and permutation constructions are counted."""
    built, gathers, elements = instrumentation.snapshot()
    p = PermutationIndex.identity(3)
    gather(np.ones((2, 3, 1, 1, 1)), p)
    after = instrumentation.snapshot()
    assert after[0] - built == 1
    assert after[1] - gathers == 1
    assert after[2] - elements == 6


def test_counters_are_per_thread():
    """Test that work done in another thread leaves the counters of this thread unchanged."""
    before = instrumentation.snapshot()
    seen = []

    def build_and_gather():
        p = PermutationIndex(np.array([2, 0, 1]))
        gather(np.ones((1, 3, 1, 1, 1)), p)
        seen.append(instrumentation.snapshot())

    worker = threading.Thread(target=build_and_gather)
    worker.start()
    worker.join()
    assert seen == [(1, 1, 3)]
    assert instrumentation.snapshot() == before
