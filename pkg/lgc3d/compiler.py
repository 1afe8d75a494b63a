"""Offline index reordering for inference.

A naive frozen network gathers its input channels into group order before
every grouped convolution and gathers the outputs back into kernel order
afterwards: two channel gathers per layer. Compiling keeps every layer's
output in kernel-sorted (physical) order and merges that order with the next
layer's group sort into a single precomputed index, so each compiled layer
performs exactly one gather and a single restoration runs at the end.
"""

import hashlib
import json
import logging
import statistics
import time
from collections.abc import Callable
from collections.abc import Sequence
from dataclasses import dataclass
from dataclasses import field
from pathlib import Path
from typing import Any

import numpy as np
from pydantic import BaseModel

from .container import load_container
from .container import save_container
from .functional import Conv3dSpec
from .functional import avg_pool3d_forward
from .indexing import PermutationIndex
from .indexing import concat_orders
from .indexing import gather
from .indexing import instrumentation
from .indexing import merge_indices
from .lgc import GroupedConv3d
from .lgc import group_forward
from .lgc import grouped_convolution
from .utils import CompileError
from .utils import EquivalenceError
from .utils import GraphError
from .utils import ShapeError

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class FrozenConv:
    """A frozen convolution preceded by an optional folded batch norm and ReLU.

    With ``append`` the output is concatenated to the running feature buffer
    (dense connectivity); otherwise it replaces the buffer.
    """

    conv: GroupedConv3d
    scale: np.ndarray | None = None
    shift: np.ndarray | None = None
    relu: bool = False
    append: bool = False
    name: str = ""


@dataclass(frozen=True)
class FrozenPool:
    window: tuple[int, int, int]
    name: str = ""


@dataclass(frozen=True)
class FrozenHead:
    """Folded batch norm, ReLU, global average pooling and the linear classifier."""

    weight: np.ndarray
    bias: np.ndarray | None = None
    scale: np.ndarray | None = None
    shift: np.ndarray | None = None
    relu: bool = True


@dataclass(frozen=True)
class FrozenNetwork:
    steps: tuple[FrozenConv | FrozenPool, ...]
    in_channels: int
    head: FrozenHead | None = None
    metadata: dict[str, Any] = field(default_factory=dict)

    @classmethod
    def chain(cls, layers: Sequence[GroupedConv3d], relu: bool = True) -> "FrozenNetwork":
        """A plain stack of frozen layers, ReLU between consecutive layers."""
        if not layers:
            raise CompileError("a network needs at least one layer")
        steps = tuple(
            FrozenConv(layer, relu=relu and index > 0, name=f"layer{index}")
            for index, layer in enumerate(layers)
        )
        return cls(steps, layers[0].spec.in_channels)

    def conv_layers(self) -> list[FrozenConv]:
        return [step for step in self.steps if isinstance(step, FrozenConv)]


def _channel_view(values: np.ndarray, ndim: int) -> np.ndarray:
    return values.reshape((1, -1) + (1,) * (ndim - 2))


def _preactivate(x: np.ndarray, scale, shift, relu: bool) -> np.ndarray:
    if scale is not None:
        x = x * _channel_view(scale, x.ndim) + _channel_view(shift, x.ndim)
    if relu:
        x = np.maximum(x, 0)
    return x


def _run_head(x: np.ndarray, head: FrozenHead | None) -> np.ndarray:
    if head is None:
        return x
    x = _preactivate(x, head.scale, head.shift, head.relu)
    pooled = x.mean(axis=tuple(range(2, x.ndim)))
    out = pooled @ head.weight.T
    return out + head.bias if head.bias is not None else out


def _check_input(x: np.ndarray, channels: int) -> None:
    if x.ndim != 5:
        raise ShapeError(f"network input must be (batch, channel, depth, height, width), got rank {x.ndim}")
    if x.shape[1] != channels:
        raise ShapeError(f"network input channel axis (1) has {x.shape[1]} channels, expected {channels}")


def run_frozen(x: np.ndarray, net: FrozenNetwork) -> np.ndarray:
    """Naive inference: every layer reorders its input and restores its output order."""
    x = np.asarray(x)
    _check_input(x, net.in_channels)
    buffer = x
    for step in net.steps:
        if isinstance(step, FrozenPool):
            buffer = avg_pool3d_forward(buffer, step.window)
            continue
        if buffer.shape[1] != step.conv.spec.in_channels:
            raise GraphError(
                f"{step.name or 'layer'} expects {step.conv.spec.in_channels} channels, the buffer holds {buffer.shape[1]}"
            )
        out = group_forward(_preactivate(buffer, step.scale, step.shift, step.relu), step.conv)
        buffer = np.concatenate([buffer, out], axis=1) if step.append else out
    return _run_head(buffer, net.head)


@dataclass(frozen=True)
class CompiledLayer:
    """A grouped convolution reading its input through one merged index.

    ``scale``/``shift`` are already gathered into the group-sorted order;
    ``output_order`` is the physical layout of the produced channels.
    """

    conv: GroupedConv3d
    merged_index: PermutationIndex
    output_order: PermutationIndex
    scale: np.ndarray | None
    shift: np.ndarray | None
    relu: bool
    append: bool
    name: str = ""


@dataclass(frozen=True)
class CompiledPool:
    window: tuple[int, int, int]
    name: str = ""


@dataclass(frozen=True)
class CompiledNetwork:
    layers: tuple[CompiledLayer | CompiledPool, ...]
    restoration: PermutationIndex
    in_channels: int
    head: FrozenHead | None = None
    metadata: dict[str, Any] = field(default_factory=dict)

    def conv_layers(self) -> list[CompiledLayer]:
        return [layer for layer in self.layers if isinstance(layer, CompiledLayer)]

    def to_frozen(self) -> FrozenNetwork:
        """Rebuild the uncompiled network, the reference of every equivalence check."""
        steps: list[FrozenConv | FrozenPool] = []
        for layer in self.layers:
            if isinstance(layer, CompiledPool):
                steps.append(FrozenPool(layer.window, layer.name))
                continue
            inverse = layer.conv.channel_perm.inverse
            steps.append(
                FrozenConv(
                    layer.conv,
                    None if layer.scale is None else layer.scale[inverse],
                    None if layer.shift is None else layer.shift[inverse],
                    layer.relu,
                    layer.append,
                    layer.name,
                )
            )
        return FrozenNetwork(tuple(steps), self.in_channels, self.head, dict(self.metadata))


def network_hash(metadata: dict[str, Any]) -> str:
    return hashlib.sha256(json.dumps(metadata, sort_keys=True, default=str).encode()).hexdigest()


def compile_network(net: FrozenNetwork) -> CompiledNetwork:
    """Compute every reordering index offline; touches no input data."""
    if not isinstance(net, FrozenNetwork):
        raise CompileError(f"only frozen networks can be compiled, got {type(net).__name__}")

    order = PermutationIndex.identity(net.in_channels)
    layers: list[CompiledLayer | CompiledPool] = []
    for step in net.steps:
        if isinstance(step, FrozenPool):
            layers.append(CompiledPool(step.window, step.name))
            continue
        if not isinstance(step, FrozenConv) or not isinstance(step.conv, GroupedConv3d):
            raise CompileError(f"step {getattr(step, 'name', step)!r} is not a frozen layer")
        conv = step.conv
        if len(order) != conv.spec.in_channels:
            raise GraphError(
                f"{step.name or 'layer'} expects {conv.spec.in_channels} channels, the buffer holds {len(order)}"
            )
        merged = merge_indices(order, conv.channel_perm)
        if not np.array_equal(order.perm[merged.perm], conv.channel_perm.perm):
            raise CompileError(f"merged index of {step.name or 'layer'} does not produce its group order")
        sort = conv.channel_perm.perm
        layers.append(
            CompiledLayer(
                conv,
                merged,
                conv.kernel_perm,
                None if step.scale is None else np.ascontiguousarray(step.scale[sort]),
                None if step.shift is None else np.ascontiguousarray(step.shift[sort]),
                step.relu,
                step.append,
                step.name,
            )
        )
        order = concat_orders([order, conv.kernel_perm]) if step.append else conv.kernel_perm

    if net.head is not None and net.head.weight.shape[1] != len(order):
        raise GraphError(f"classifier reads {net.head.weight.shape[1]} features, the buffer holds {len(order)}")
    metadata = dict(net.metadata)
    metadata.setdefault("source_hash", network_hash(net.metadata))
    compiled = CompiledNetwork(tuple(layers), order.inverted(), net.in_channels, net.head, metadata)
    logger.info(
        "compiled %d layers, %d with non-identity merged index",
        len(compiled.conv_layers()),
        sum(not layer.merged_index.is_identity for layer in compiled.conv_layers()),
    )
    return compiled


def run_compiled(x: np.ndarray, net: CompiledNetwork) -> np.ndarray:
    """Compiled inference: one gather per layer, one final restoration."""
    x = np.asarray(x)
    _check_input(x, net.in_channels)
    built = instrumentation.permutations_built
    buffer = x
    for layer in net.layers:
        if isinstance(layer, CompiledPool):
            buffer = avg_pool3d_forward(buffer, layer.window)
            continue
        if buffer.shape[1] != len(layer.merged_index):
            raise ShapeError(
                f"{layer.name or 'layer'} reads {len(layer.merged_index)} channels, the buffer holds {buffer.shape[1]}"
            )
        sorted_input = _preactivate(gather(buffer, layer.merged_index), layer.scale, layer.shift, layer.relu)
        out = grouped_convolution(sorted_input, layer.conv)
        buffer = np.concatenate([buffer, out], axis=1) if layer.append else out
    result = _run_head(gather(buffer, net.restoration), net.head)
    if instrumentation.permutations_built != built:
        raise CompileError("a permutation was constructed while running a compiled network")
    return result


@dataclass
class RunStats:
    gathers: int
    gathered_elements: int
    permutations_built: int


def measure(func: Callable[..., np.ndarray], *args: Any) -> tuple[np.ndarray, RunStats]:
    """Run ``func`` and report the gathers and permutation constructions it performed."""
    built, gathers, elements = instrumentation.snapshot()
    out = func(*args)
    after = instrumentation.snapshot()
    return out, RunStats(after[1] - gathers, after[2] - elements, after[0] - built)


class BenchRow(BaseModel):
    input_shape: list[int]
    max_abs_diff: float
    naive_ms: float
    compiled_ms: float
    naive_gathers: int
    compiled_gathers: int
    naive_gathered_elements: int
    compiled_gathered_elements: int


class BenchReport(BaseModel):
    layers: int
    repetitions: int
    rows: list[BenchRow]


def bench(
    net: CompiledNetwork,
    input_shapes: Sequence[Sequence[int]],
    repetitions: int = 30,
    seed: int = 0,
    tolerance: float = 1e-4,
) -> BenchReport:
    """Compare naive and compiled inference: equivalence first, then median wall time and gather counts."""
    naive_net = net.to_frozen()
    rng = np.random.default_rng(seed)
    rows = []
    for shape in input_shapes:
        x = rng.standard_normal(tuple(shape)).astype(np.float32)
        reference, naive_stats = measure(run_frozen, x, naive_net)
        compiled, compiled_stats = measure(run_compiled, x, net)
        diff = float(np.max(np.abs(reference - compiled))) if reference.size else 0.0
        if diff > tolerance:
            raise EquivalenceError(
                f"compiled and naive outputs differ by {diff:.3g} on input {tuple(shape)}, tolerance {tolerance}"
            )
        rows.append(
            BenchRow(
                input_shape=list(shape),
                max_abs_diff=diff,
                naive_ms=_median_ms(run_frozen, x, naive_net, repetitions),
                compiled_ms=_median_ms(run_compiled, x, net, repetitions),
                naive_gathers=naive_stats.gathers,
                compiled_gathers=compiled_stats.gathers,
                naive_gathered_elements=naive_stats.gathered_elements,
                compiled_gathered_elements=compiled_stats.gathered_elements,
            )
        )
    return BenchReport(layers=len(net.conv_layers()), repetitions=repetitions, rows=rows)


def _median_ms(func, x, net, repetitions: int) -> float:
    timings = []
    for _ in range(max(1, repetitions)):
        start = time.perf_counter()
        func(x, net)
        timings.append((time.perf_counter() - start) * 1000.0)
    return statistics.median(timings)


def save_plan(path: str | Path, net: CompiledNetwork) -> None:
    arrays: dict[str, np.ndarray] = {"restoration": net.restoration.perm}
    layers_meta = []
    for index, layer in enumerate(net.layers):
        prefix = f"layers.{index}"
        if isinstance(layer, CompiledPool):
            layers_meta.append({"kind": "pool", "name": layer.name, "window": list(layer.window)})
            continue
        conv = layer.conv
        for group, block in enumerate(conv.blocks):
            arrays[f"{prefix}.block.{group}"] = block
        arrays[f"{prefix}.merged_index"] = layer.merged_index.perm
        arrays[f"{prefix}.channel_perm"] = conv.channel_perm.perm
        arrays[f"{prefix}.kernel_perm"] = conv.kernel_perm.perm
        if layer.scale is not None and layer.shift is not None:
            arrays[f"{prefix}.scale"] = layer.scale
            arrays[f"{prefix}.shift"] = layer.shift
        layers_meta.append(
            {
                "kind": "conv",
                "name": layer.name,
                "spec": conv.spec.to_dict(),
                "channel_counts": list(conv.channel_counts),
                "kernel_counts": list(conv.kernel_counts),
                "merged_index": layer.merged_index.perm.tolist(),
                "output_order": layer.output_order.perm.tolist(),
                "relu": layer.relu,
                "append": layer.append,
                "batch_norm": layer.scale is not None,
            }
        )
    head_meta = None
    if net.head is not None:
        head = net.head
        arrays["head.weight"] = head.weight
        if head.bias is not None:
            arrays["head.bias"] = head.bias
        if head.scale is not None and head.shift is not None:
            arrays["head.scale"] = head.scale
            arrays["head.shift"] = head.shift
        head_meta = {"relu": head.relu, "bias": head.bias is not None, "batch_norm": head.scale is not None}
    metadata = {
        "in_channels": net.in_channels,
        "layers": layers_meta,
        "head": head_meta,
        "network": net.metadata,
    }
    save_container(path, "plan", arrays, metadata)


def load_plan(path: str | Path) -> CompiledNetwork:
    arrays, manifest = load_container(path, kind="plan")
    meta = manifest.metadata
    layers: list[CompiledLayer | CompiledPool] = []
    for index, entry in enumerate(meta["layers"]):
        prefix = f"layers.{index}"
        if entry["kind"] == "pool":
            layers.append(CompiledPool(tuple(entry["window"]), entry["name"]))  # type: ignore[arg-type]
            continue
        spec = Conv3dSpec(**entry["spec"])
        conv = GroupedConv3d(
            tuple(arrays[f"{prefix}.block.{g}"] for g in range(len(entry["channel_counts"]))),
            PermutationIndex(arrays[f"{prefix}.channel_perm"]),
            PermutationIndex(arrays[f"{prefix}.kernel_perm"]),
            tuple(entry["channel_counts"]),
            tuple(entry["kernel_counts"]),
            spec,
        )
        layers.append(
            CompiledLayer(
                conv,
                PermutationIndex(arrays[f"{prefix}.merged_index"]),
                conv.kernel_perm,
                arrays.get(f"{prefix}.scale"),
                arrays.get(f"{prefix}.shift"),
                entry["relu"],
                entry["append"],
                entry["name"],
            )
        )
    head = None
    if meta["head"] is not None:
        head = FrozenHead(
            arrays["head.weight"],
            arrays.get("head.bias"),
            arrays.get("head.scale"),
            arrays.get("head.shift"),
            meta["head"]["relu"],
        )
    return CompiledNetwork(
        tuple(layers),
        PermutationIndex(arrays["restoration"]),
        meta["in_channels"],
        head,
        meta.get("network", {}),
    )
