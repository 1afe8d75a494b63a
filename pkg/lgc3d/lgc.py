"""Learnable 3D group convolution.

A layer keeps its full kernel bank ``W`` (N, C, kd, kh, kw) together with two
selection matrices: ``S`` assigns each of the C input channels to one of G
groups and ``T`` assigns each of the N kernels. The connection mask
``U = T @ S.T`` (N, C) says which kernel reads which channel; the layer
computes ``conv3d(x, W * U)``. During training the selections are row
softmaxes of learnable logits. Freezing takes the row argmax and packs the
surviving weights into a true grouped convolution.
"""

import logging
from dataclasses import dataclass
from enum import Enum

import numpy as np

from .functional import Conv3dSpec
from .functional import conv3d
from .functional import conv3d_forward
from .functional import relu
from .functional import softmax_rows
from .indexing import PermutationIndex
from .indexing import gather
from .indexing import sort_by_group
from .tensor import Tensor
from .tensor import as_tensor
from .tensor import parameter
from .utils import FreezeError
from .utils import ShapeError

logger = logging.getLogger(__name__)

LOGIT_INIT_RANGE = 0.1
REGULARIZER_FLOOR = 1.0


class SelectionMode(str, Enum):
    SOFT = "soft"
    HARD = "hard"


class SelectionRole(str, Enum):
    CHANNEL = "channel"
    KERNEL = "kernel"


@dataclass
class SelectionMatrix:
    """Assignment of rows (channels or kernels) to groups, parameterized by logits (rows, G)."""

    logits: Tensor
    role: SelectionRole
    mode: SelectionMode = SelectionMode.SOFT
    temperature: float = 1.0

    @classmethod
    def initialize(
        cls,
        rows: int,
        groups: int,
        role: SelectionRole,
        rng: np.random.Generator,
        dtype=np.float32,
    ) -> "SelectionMatrix":
        data = rng.uniform(-LOGIT_INIT_RANGE, LOGIT_INIT_RANGE, size=(rows, groups)).astype(dtype)
        return cls(parameter(data, name=f"{role.value}_logits"), role)

    @property
    def rows(self) -> int:
        return self.logits.shape[0]

    @property
    def groups(self) -> int:
        return self.logits.shape[1]

    def soft(self) -> Tensor:
        scaled = self.logits if self.temperature == 1.0 else self.logits * self.temperature
        return softmax_rows(scaled)

    def assignment(self) -> np.ndarray:
        """Group id of every row; ties go to the lowest group index."""
        return np.argmax(self.logits.data, axis=1).astype(np.int64)

    def one_hot(self) -> np.ndarray:
        out = np.zeros(self.logits.shape, dtype=self.logits.dtype)
        out[np.arange(self.rows), self.assignment()] = 1
        return out

    def view(self) -> Tensor:
        if self.mode is SelectionMode.SOFT:
            return self.soft()
        return Tensor(self.one_hot())


def hard_assign(selection: SelectionMatrix) -> SelectionMatrix:
    """Hard view of a selection: each row one-hot at the argmax of its logits."""
    return SelectionMatrix(
        selection.logits,
        selection.role,
        mode=SelectionMode.HARD,
        temperature=selection.temperature,
    )


def connection_mask(channels: SelectionMatrix, kernels: SelectionMatrix) -> Tensor:
    """Kernel-to-channel adjacency ``U[n, c] = sum_j T[n, j] * S[c, j]``."""
    if channels.groups != kernels.groups:
        raise ShapeError(
            f"channel selection has {channels.groups} groups but kernel selection has {kernels.groups}"
        )
    return kernels.view() @ channels.view().transpose()


class LgcConv3d:
    """Learnable group convolution layer with its full weight bank and S/T logits."""

    def __init__(
        self,
        weight: Tensor,
        channel_selection: SelectionMatrix,
        kernel_selection: SelectionMatrix,
        spec: Conv3dSpec,
    ):
        if weight.shape != spec.weight_shape:
            raise ShapeError(f"weight shape {weight.shape} does not match {spec.weight_shape}")
        if channel_selection.rows != spec.in_channels:
            raise ShapeError(
                f"channel selection has {channel_selection.rows} rows for {spec.in_channels} input channels"
            )
        if kernel_selection.rows != spec.out_kernels:
            raise ShapeError(
                f"kernel selection has {kernel_selection.rows} rows for {spec.out_kernels} kernels"
            )
        if channel_selection.groups != kernel_selection.groups:
            raise ShapeError("channel and kernel selections disagree on the group count")
        groups = channel_selection.groups
        if not 1 <= groups <= min(spec.in_channels, spec.out_kernels):
            raise ShapeError(
                f"group count {groups} must lie in [1, min(C={spec.in_channels}, N={spec.out_kernels})]"
            )
        self.weight = weight
        self.channel_selection = channel_selection
        self.kernel_selection = kernel_selection
        self.spec = spec

    @classmethod
    def create(
        cls,
        spec: Conv3dSpec,
        groups: int,
        rng: np.random.Generator,
        dtype=np.float32,
    ) -> "LgcConv3d":
        fan_in = spec.in_channels * spec.kernel_volume
        weight = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=spec.weight_shape).astype(dtype)
        return cls(
            parameter(weight, name="weight"),
            SelectionMatrix.initialize(spec.in_channels, groups, SelectionRole.CHANNEL, rng, dtype),
            SelectionMatrix.initialize(spec.out_kernels, groups, SelectionRole.KERNEL, rng, dtype),
            spec,
        )

    @property
    def groups(self) -> int:
        return self.channel_selection.groups

    @property
    def mode(self) -> SelectionMode:
        return self.channel_selection.mode

    def set_mode(self, mode: SelectionMode) -> None:
        self.channel_selection.mode = SelectionMode(mode)
        self.kernel_selection.mode = SelectionMode(mode)

    def set_temperature(self, temperature: float) -> None:
        self.channel_selection.temperature = temperature
        self.kernel_selection.temperature = temperature

    def parameters(self, include_selection: bool = True) -> dict[str, Tensor]:
        params = {"weight": self.weight}
        if include_selection:
            params["channel_logits"] = self.channel_selection.logits
            params["kernel_logits"] = self.kernel_selection.logits
        return params

    def __call__(self, x: Tensor) -> Tensor:
        return lgc_forward(x, self)


def masked_weight(layer: LgcConv3d) -> Tensor:
    mask = connection_mask(layer.channel_selection, layer.kernel_selection)
    return layer.weight * mask.reshape(layer.spec.out_kernels, layer.spec.in_channels, 1, 1, 1)


def lgc_forward(x: Tensor, layer: LgcConv3d) -> Tensor:
    """Convolve ``x`` with the connection-masked kernel bank ``W * U``."""
    x = as_tensor(x)
    if x.ndim != 5 or x.shape[1] != layer.spec.in_channels:
        raise ShapeError(
            f"lgc_forward channel axis (1) mismatch: input shape {x.shape}, layer expects {layer.spec.in_channels} channels"
        )
    return conv3d(x, masked_weight(layer), layer.spec)


@dataclass(frozen=True)
class GroupedConv3d:
    """A frozen learnable group convolution: packed per-group kernel blocks and the permutations around them.

    Block ``g`` has shape (N_g, C_g, kd, kh, kw); groups may be ragged. A
    group without channels but with kernels (allowed only when freezing with
    ``allow_empty_groups``) outputs zeros for its kernels.
    """

    blocks: tuple[np.ndarray, ...]
    channel_perm: PermutationIndex
    kernel_perm: PermutationIndex
    channel_counts: tuple[int, ...]
    kernel_counts: tuple[int, ...]
    spec: Conv3dSpec

    def __post_init__(self):
        if sum(self.channel_counts) != self.spec.in_channels or len(self.channel_perm) != self.spec.in_channels:
            raise FreezeError(f"group channel counts {self.channel_counts} do not cover C={self.spec.in_channels}")
        if sum(self.kernel_counts) != self.spec.out_kernels or len(self.kernel_perm) != self.spec.out_kernels:
            raise FreezeError(f"group kernel counts {self.kernel_counts} do not cover N={self.spec.out_kernels}")
        if not len(self.blocks) == len(self.channel_counts) == len(self.kernel_counts):
            raise FreezeError("every group needs one block, one channel count and one kernel count")
        for block, n_g, c_g in zip(self.blocks, self.kernel_counts, self.channel_counts, strict=True):
            if block.shape != (n_g, c_g, *self.spec.kernel):
                raise FreezeError(f"block shape {block.shape} does not match ({n_g}, {c_g}, {self.spec.kernel})")

    @classmethod
    def from_dense(cls, weight: np.ndarray, spec: Conv3dSpec) -> "GroupedConv3d":
        """Wrap a standard convolution as a single-group frozen layer."""
        return cls(
            (np.ascontiguousarray(weight),),
            PermutationIndex.identity(spec.in_channels),
            PermutationIndex.identity(spec.out_kernels),
            (spec.in_channels,),
            (spec.out_kernels,),
            spec,
        )

    @property
    def groups(self) -> int:
        return len(self.blocks)

    def packed_parameters(self) -> int:
        return int(sum(block.size for block in self.blocks))

    def __call__(self, x: np.ndarray) -> np.ndarray:
        return group_forward(x, self)


def freeze(layer: LgcConv3d, allow_empty_groups: bool = False) -> GroupedConv3d:
    """Harden the selections of ``layer`` and pack its weights into per-group blocks.

    Weight entries outside the hard connection mask are discarded. A group that
    owns kernels but no channel raises :class:`~lgc3d.utils.FreezeError`
    unless ``allow_empty_groups`` is set.
    """
    channel_groups = layer.channel_selection.assignment()
    kernel_groups = layer.kernel_selection.assignment()
    groups = layer.groups
    channel_counts = np.bincount(channel_groups, minlength=groups)
    kernel_counts = np.bincount(kernel_groups, minlength=groups)

    starving = [g for g in range(groups) if kernel_counts[g] and not channel_counts[g]]
    if starving:
        if not allow_empty_groups:
            raise FreezeError(
                f"groups {starving} own kernels but no input channel, their kernels would read no input"
            )
        logger.warning("groups %s own kernels but no channel, their outputs are zero", starving)

    channel_perm = sort_by_group(channel_groups)
    kernel_perm = sort_by_group(kernel_groups)
    weight = layer.weight.data
    blocks = []
    for g in range(groups):
        kernels = np.flatnonzero(kernel_groups == g)
        channels = np.flatnonzero(channel_groups == g)
        blocks.append(np.ascontiguousarray(weight[np.ix_(kernels, channels)]))
    return GroupedConv3d(
        tuple(blocks),
        channel_perm,
        kernel_perm,
        tuple(int(c) for c in channel_counts),
        tuple(int(n) for n in kernel_counts),
        layer.spec,
    )


def grouped_convolution(x_sorted: np.ndarray, frozen: GroupedConv3d) -> np.ndarray:
    """Per-group convolutions of group-sorted input channels, outputs in kernel-sorted order."""
    outputs = []
    start = 0
    out_dims = frozen.spec.output_dims(x_sorted.shape[2:])
    for block, c_g, n_g in zip(frozen.blocks, frozen.channel_counts, frozen.kernel_counts, strict=True):
        if n_g:
            if c_g:
                outputs.append(
                    conv3d_forward(
                        x_sorted[:, start : start + c_g], block, frozen.spec.stride, frozen.spec.padding
                    )
                )
            else:
                outputs.append(np.zeros((x_sorted.shape[0], n_g, *out_dims), dtype=x_sorted.dtype))
        start += c_g
    return np.concatenate(outputs, axis=1)


def group_forward(x: np.ndarray, frozen: GroupedConv3d, restore: bool = True) -> np.ndarray:
    """Run a frozen layer: gather channels into group order, convolve per group, and restore kernel order.

    With ``restore=False`` the outputs stay in kernel-sorted order, as compiled
    networks consume them.
    """
    x = np.asarray(x)
    if x.ndim != 5 or x.shape[1] != frozen.spec.in_channels:
        raise ShapeError(
            f"group_forward channel axis (1) mismatch: input shape {x.shape}, layer expects {frozen.spec.in_channels} channels"
        )
    out = grouped_convolution(gather(x, frozen.channel_perm), frozen)
    if restore:
        out = gather(out, frozen.kernel_perm.inverse)
    return out


def group_regularizer(
    channels: SelectionMatrix, kernels: SelectionMatrix, floor: float = REGULARIZER_FLOOR
) -> Tensor:
    """Penalty ``sum_j max(0, floor - column mass_j)^2`` over the soft S and T, against empty groups."""
    total: Tensor | None = None
    for selection in (channels, kernels):
        mass = selection.soft().sum(axis=0)
        deficit = relu(floor - mass)
        term = (deficit * deficit).sum()
        total = term if total is None else total + term
    assert total is not None
    return total
