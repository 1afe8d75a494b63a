"""Channel permutations and the counters that prove they are built offline.

A :class:`PermutationIndex` ``p`` describes a physical channel layout:
physical slot ``i`` holds logical channel ``p.perm[i]``, and ``p.inverse``
maps a logical channel back to its physical slot.
"""

import threading
from dataclasses import dataclass
from dataclasses import field

import numpy as np

from .utils import LabelRangeError
from .utils import ShapeError


class Instrumentation(threading.local):
    """Counters of the calling thread, read by the compiler checks and benchmarks.

    Each thread sees only its own counts, so comparing two snapshots measures
    the work of one call even while other threads gather or compile.
    """

    def __init__(self):
        self.permutations_built = 0
        self.gathers = 0
        self.gathered_elements = 0

    def snapshot(self) -> tuple[int, int, int]:
        return self.permutations_built, self.gathers, self.gathered_elements


instrumentation = Instrumentation()


@dataclass(frozen=True)
class PermutationIndex:
    perm: np.ndarray
    inverse: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        perm = np.array(self.perm, dtype=np.int64).reshape(-1)
        size = perm.size
        inverse = np.full(size, -1, dtype=np.int64)
        if size and (perm.min() < 0 or perm.max() >= size):
            raise LabelRangeError(f"permutation entries must lie in [0, {size})")
        inverse[perm] = np.arange(size, dtype=np.int64)
        if (inverse < 0).any():
            raise LabelRangeError("permutation entries must be distinct")
        perm.setflags(write=False)
        inverse.setflags(write=False)
        object.__setattr__(self, "perm", perm)
        object.__setattr__(self, "inverse", inverse)
        instrumentation.permutations_built += 1

    def __len__(self) -> int:
        return int(self.perm.size)

    def __eq__(self, other: object) -> bool:
        return isinstance(other, PermutationIndex) and np.array_equal(self.perm, other.perm)

    def __hash__(self) -> int:
        return hash(self.perm.tobytes())

    @classmethod
    def identity(cls, size: int) -> "PermutationIndex":
        return cls(np.arange(size, dtype=np.int64))

    @property
    def is_identity(self) -> bool:
        return bool(np.array_equal(self.perm, np.arange(self.perm.size)))

    def inverted(self) -> "PermutationIndex":
        return PermutationIndex(self.inverse)

    def then(self, other: "PermutationIndex") -> "PermutationIndex":
        """Compose: gathering with ``self`` and then with ``other`` equals one gather with the result."""
        if len(self) != len(other):
            raise ShapeError(f"cannot compose permutations of length {len(self)} and {len(other)}")
        return PermutationIndex(self.perm[other.perm])

    def offset(self, shift: int) -> np.ndarray:
        return self.perm + shift


def gather(x: np.ndarray, index: np.ndarray | PermutationIndex, axis: int = 1) -> np.ndarray:
    """Counted channel gather: ``out[:, i] = x[:, index[i]]``."""
    indices = index.perm if isinstance(index, PermutationIndex) else index
    out = np.take(x, indices, axis=axis)
    instrumentation.gathers += 1
    instrumentation.gathered_elements += int(out.size)
    return out


def sort_by_group(assignment: np.ndarray) -> PermutationIndex:
    """Stable sort of items by group id: items of group 0 first, original order kept within a group."""
    assignment = np.asarray(assignment, dtype=np.int64).reshape(-1)
    if assignment.size and assignment.min() < 0:
        raise LabelRangeError("group ids must be non-negative")
    return PermutationIndex(np.argsort(assignment, kind="stable"))


def merge_indices(prev_output_order: PermutationIndex, this_input_sort: PermutationIndex) -> PermutationIndex:
    """Merge the previous layer's physical output order with this layer's group-sorted input order.

    Reading the previous layer's physical output through the merged index
    yields this layer's group-sorted channel order in a single gather.
    """
    if len(prev_output_order) != len(this_input_sort):
        raise ShapeError(
            f"cannot merge an output order of {len(prev_output_order)} channels with an input sort of {len(this_input_sort)}"
        )
    return PermutationIndex(prev_output_order.inverse[this_input_sort.perm])


def concat_orders(orders: list[PermutationIndex]) -> PermutationIndex:
    """Physical order of a channel concatenation, each block keeping its own layout."""
    parts = []
    shift = 0
    for order in orders:
        parts.append(order.offset(shift))
        shift += len(order)
    return PermutationIndex(np.concatenate(parts) if parts else np.zeros(0, dtype=np.int64))
