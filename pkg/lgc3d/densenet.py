"""The 3D DenseNet backbone built from learnable group convolutions.

A stem convolution is followed by stages of dense layers (BN, ReLU and a 3x3x3
learnable group convolution adding ``growth`` channels each). With
``cross_block`` every layer sees the stem output and all earlier dense
outputs, average-pooled to the current resolution; otherwise stages are
separated by classic compressing transitions. A batch norm, ReLU, global
average pooling and a linear classifier close the network.
"""

import logging
import math
from collections.abc import Iterable
from typing import Literal

import numpy as np
from pydantic import BaseModel
from pydantic import Field
from pydantic import field_validator
from pydantic import model_validator

from .compiler import FrozenConv
from .compiler import FrozenHead
from .compiler import FrozenNetwork
from .compiler import FrozenPool
from .functional import Conv3dSpec
from .functional import avg_pool3d
from .functional import batch_norm
from .functional import conv3d
from .functional import fold_batch_norm
from .functional import global_avg_pool
from .functional import linear
from .functional import relu
from .lgc import GroupedConv3d
from .lgc import LgcConv3d
from .lgc import SelectionMode
from .lgc import freeze
from .lgc import group_regularizer
from .tensor import Tensor
from .tensor import as_tensor
from .tensor import concat
from .tensor import no_grad
from .tensor import parameter
from .utils import CheckpointError
from .utils import ConfigurationError
from .utils import FreezeError
from .utils import GraphError
from .utils import ShapeError

logger = logging.getLogger(__name__)

DEFAULT_GROUPS = 4


def growth_schedule(k: int, m: int, mode: str = "doubling") -> int:
    """Growth rate of stage ``m``: ``k * 2**m`` when doubling, ``k`` when constant."""
    if k < 1 or m < 0:
        raise ConfigurationError(f"growth schedule needs k >= 1 and m >= 0, got k={k}, m={m}")
    return k * 2**m if mode == "doubling" else k


def min_patch_size(stages: int) -> int:
    """Smallest odd patch surviving the ``stages - 1`` spatial poolings."""
    if stages <= 1:
        return 1
    return 2 ** (stages - 1) + 1


class ModelConfig(BaseModel):
    """Architecture of a network."""

    name: str = "custom"
    stage_blocks: list[int]
    """Dense layers per stage."""

    growth_rate: int = 4
    """Base growth rate ``k`` of the first stage."""

    growth_mode: Literal["doubling", "constant"] = "doubling"
    stage_growth: list[int] | None = None
    """Growth per stage, derived from ``growth_rate`` and ``growth_mode`` when omitted."""

    groups: int | list[int] = DEFAULT_GROUPS
    """Group count of the learnable convolutions, one value or one per stage."""

    compression: int = 2
    """Channel divisor of compressing transitions, only used without ``cross_block``."""

    stem_channels: int | None = None
    """Stem output channels, twice the first growth rate when omitted."""

    num_classes: int = 16
    bands: int = 200
    patch_size: int = 15
    cross_block: bool = True

    @field_validator("stage_blocks")
    @classmethod
    def _positive_blocks(cls, value: list[int]) -> list[int]:
        if not value or min(value) < 1:
            raise ValueError("stage_blocks must be a non-empty list of positive integers")
        return value

    @field_validator("patch_size")
    @classmethod
    def _odd_patch(cls, value: int) -> int:
        if value < 1 or value % 2 == 0:
            raise ValueError(f"patch size must be a positive odd integer, got {value}")
        return value

    @model_validator(mode="after")
    def _derive(self) -> "ModelConfig":
        stages = len(self.stage_blocks)
        if self.growth_rate < 1 or self.compression < 1 or self.num_classes < 2 or self.bands < 1:
            raise ValueError("growth_rate, compression and bands must be positive and num_classes at least 2")
        expected = [growth_schedule(self.growth_rate, m, self.growth_mode) for m in range(stages)]
        if self.stage_growth is None:
            self.stage_growth = expected
        elif self.stage_growth != expected:
            raise ValueError(
                f"stage_growth {self.stage_growth} does not follow the {self.growth_mode} schedule {expected}"
            )
        if isinstance(self.groups, int):
            self.groups = [self.groups] * stages
        if len(self.groups) != stages:
            raise ValueError(f"groups lists {len(self.groups)} stages, stage_blocks lists {stages}")
        if self.stem_channels is None:
            self.stem_channels = 2 * self.stage_growth[0]
        for m, (groups, growth) in enumerate(zip(self.groups, self.stage_growth, strict=True)):
            if not 1 <= groups <= min(growth, self.stem_channels):
                raise ValueError(
                    f"stage {m} group count {groups} must lie in [1, min(growth={growth}, stem={self.stem_channels})]"
                )
        return self

    @property
    def stages(self) -> int:
        return len(self.stage_blocks)

    @property
    def input_dims(self) -> tuple[int, int, int]:
        return (self.bands, self.patch_size, self.patch_size)

    def stage_groups(self) -> list[int]:
        assert isinstance(self.groups, list)
        return self.groups


def predefined_configs() -> dict[str, ModelConfig]:
    """The three published network sizes."""
    return {
        "small": ModelConfig(name="small", stage_blocks=[4, 6, 8], growth_rate=4),
        "base": ModelConfig(name="base", stage_blocks=[6, 8, 10], growth_rate=8),
        "larger": ModelConfig(name="larger", stage_blocks=[10, 10, 10], growth_rate=8),
    }


PUBLISHED_COSTS = {
    "small": (156_856, 6_898_600),
    "base": (882_272, 36_199_104),
    "larger": (1_834_848, 72_421_584),
}
"""Reported (params, flops) of the predefined sizes on 200 bands and 15x15 patches."""


class LayerRecord(BaseModel):
    name: str
    kind: Literal["stem", "dense", "transition", "head"]
    in_channels: int
    out_channels: int
    groups: int = 1
    kernel: list[int] | None = None
    window: list[int] | None = None
    in_dims: list[int]
    out_dims: list[int]
    inputs: list[str] = Field(default_factory=list)
    """Names of the records whose outputs this layer reads."""

    stage: int = 0


class NetworkGraph(BaseModel):
    layers: list[LayerRecord]

    def __getitem__(self, name: str) -> LayerRecord:
        for record in self.layers:
            if record.name == name:
                return record
        raise KeyError(name)

    def dense_layers(self) -> list[LayerRecord]:
        return [record for record in self.layers if record.kind == "dense"]


def _pool_window(dims: tuple[int, int, int]) -> tuple[int, int, int]:
    return (2 if dims[0] >= 2 else 1, 2, 2)


def build_graph(config: ModelConfig, dims: tuple[int, int, int] | None = None) -> NetworkGraph:
    """Layer records and channel arithmetic of ``config`` on inputs of ``dims`` (depth, height, width)."""
    dims = tuple(dims or config.input_dims)  # type: ignore[assignment]
    assert config.stage_growth is not None and config.stem_channels is not None
    if min(dims[1:]) < min_patch_size(config.stages):
        raise ConfigurationError(
            f"patch {dims[1]}x{dims[2]} is too small for {config.stages} stages, "
            f"minimum patch size is {min_patch_size(config.stages)}"
        )

    channels = config.stem_channels
    records = [
        LayerRecord(
            name="stem",
            kind="stem",
            in_channels=1,
            out_channels=channels,
            kernel=[3, 3, 3],
            in_dims=list(dims),
            out_dims=list(dims),
            inputs=["input"],
        )
    ]
    sources = ["stem"]
    for m, (blocks, growth, groups) in enumerate(
        zip(config.stage_blocks, config.stage_growth, config.stage_groups(), strict=True)
    ):
        if m > 0:
            window = _pool_window(dims)
            pooled = (dims[0] // window[0], dims[1] // 2, dims[2] // 2)
            name = f"transition{m}"
            if config.cross_block:
                records.append(
                    LayerRecord(
                        name=name,
                        kind="transition",
                        in_channels=channels,
                        out_channels=channels,
                        window=list(window),
                        in_dims=list(dims),
                        out_dims=list(pooled),
                        inputs=list(sources),
                        stage=m,
                    )
                )
            else:
                out = math.ceil(channels / config.compression)
                records.append(
                    LayerRecord(
                        name=name,
                        kind="transition",
                        in_channels=channels,
                        out_channels=out,
                        groups=min(config.stage_groups()[m - 1], channels, out),
                        kernel=[1, 1, 1],
                        window=list(window),
                        in_dims=list(dims),
                        out_dims=list(pooled),
                        inputs=list(sources),
                        stage=m,
                    )
                )
                channels = out
                sources = [name]
            dims = pooled
        for j in range(blocks):
            name = f"stage{m}.layer{j}"
            records.append(
                LayerRecord(
                    name=name,
                    kind="dense",
                    in_channels=channels,
                    out_channels=growth,
                    groups=groups,
                    kernel=[3, 3, 3],
                    in_dims=list(dims),
                    out_dims=list(dims),
                    inputs=list(sources),
                    stage=m,
                )
            )
            sources.append(name)
            channels += growth
    records.append(
        LayerRecord(
            name="head",
            kind="head",
            in_channels=channels,
            out_channels=config.num_classes,
            in_dims=list(dims),
            out_dims=[],
            inputs=list(sources),
            stage=config.stages - 1,
        )
    )
    return NetworkGraph(layers=records)


class Conv3dLayer:
    """A standard convolution with an optional bias."""

    def __init__(self, weight: Tensor, spec: Conv3dSpec, bias: Tensor | None = None):
        if weight.shape != spec.weight_shape:
            raise ShapeError(f"weight shape {weight.shape} does not match {spec.weight_shape}")
        self.weight = weight
        self.bias = bias
        self.spec = spec

    @classmethod
    def create(cls, spec: Conv3dSpec, rng: np.random.Generator, bias: bool = False, dtype=np.float32):
        fan_in = spec.in_channels * spec.kernel_volume
        weight = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=spec.weight_shape).astype(dtype)
        return cls(
            parameter(weight, name="weight"),
            spec,
            parameter(np.zeros(spec.out_kernels, dtype=dtype), name="bias") if bias else None,
        )

    def parameters(self) -> dict[str, Tensor]:
        params = {"weight": self.weight}
        if self.bias is not None:
            params["bias"] = self.bias
        return params

    def __call__(self, x: Tensor) -> Tensor:
        out = conv3d(x, self.weight, self.spec)
        if self.bias is not None:
            out = out + self.bias.reshape(1, -1, 1, 1, 1)
        return out


class BatchNorm3d:
    """Per-channel batch norm with running statistics.

    While ``calibrating`` the running statistics are replaced by the
    cumulative average of the statistics of every batch seen.
    """

    def __init__(self, channels: int, momentum: float = 0.1, eps: float = 1e-5, dtype=np.float32):
        self.gamma = parameter(np.ones(channels, dtype=dtype), name="gamma")
        self.beta = parameter(np.zeros(channels, dtype=dtype), name="beta")
        self.running_mean = np.zeros(channels, dtype=dtype)
        self.running_var = np.ones(channels, dtype=dtype)
        self.momentum = momentum
        self.eps = eps
        self.calibrating = False
        self.calibration_batches = 0

    @property
    def channels(self) -> int:
        return self.gamma.size

    def parameters(self) -> dict[str, Tensor]:
        return {"gamma": self.gamma, "beta": self.beta}

    def buffers(self) -> dict[str, np.ndarray]:
        return {"running_mean": self.running_mean, "running_var": self.running_var}

    def start_calibration(self) -> None:
        self.calibrating = True
        self.calibration_batches = 0
        self.running_mean[...] = 0
        self.running_var[...] = 1

    def stop_calibration(self) -> None:
        self.calibrating = False

    def __call__(self, x: Tensor, training: bool) -> Tensor:
        if self.calibrating:
            batch_mean = np.zeros_like(self.running_mean)
            batch_var = np.zeros_like(self.running_var)
            out = batch_norm(x, self.gamma, self.beta, batch_mean, batch_var, True, momentum=1.0, eps=self.eps)
            self.calibration_batches += 1
            self.running_mean += (batch_mean - self.running_mean) / self.calibration_batches
            if self.calibration_batches == 1:
                self.running_var[...] = batch_var
            else:
                self.running_var += (batch_var - self.running_var) / self.calibration_batches
            return out
        return batch_norm(
            x, self.gamma, self.beta, self.running_mean, self.running_var, training, self.momentum, self.eps
        )

    def fold(self) -> tuple[np.ndarray, np.ndarray]:
        return fold_batch_norm(self.gamma.data, self.beta.data, self.running_mean, self.running_var, self.eps)


class Linear:
    def __init__(self, weight: Tensor, bias: Tensor | None = None):
        self.weight = weight
        self.bias = bias

    @classmethod
    def create(cls, in_features: int, out_features: int, rng: np.random.Generator, dtype=np.float32) -> "Linear":
        bound = 1.0 / np.sqrt(in_features)
        weight = rng.uniform(-bound, bound, size=(out_features, in_features)).astype(dtype)
        return cls(parameter(weight, name="weight"), parameter(np.zeros(out_features, dtype=dtype), name="bias"))

    def parameters(self) -> dict[str, Tensor]:
        params = {"weight": self.weight}
        if self.bias is not None:
            params["bias"] = self.bias
        return params

    def __call__(self, x: Tensor) -> Tensor:
        return linear(x, self.weight, self.bias)


class DenseLayer:
    """BN, ReLU and a learnable group convolution producing ``growth`` new channels."""

    def __init__(self, record: LayerRecord, norm: BatchNorm3d, conv: LgcConv3d):
        self.record = record
        self.norm = norm
        self.conv = conv

    def __call__(self, x: Tensor, training: bool) -> Tensor:
        return self.conv(relu(self.norm(x, training)))


class Transition:
    """Pooling between stages, preceded by a compressing BN-ReLU-1x1x1 convolution when not carrying features across."""

    def __init__(
        self,
        record: LayerRecord,
        window: tuple[int, int, int],
        norm: BatchNorm3d | None = None,
        conv: LgcConv3d | None = None,
    ):
        self.record = record
        self.window = window
        self.norm = norm
        self.conv = conv

    def __call__(self, x: Tensor, training: bool) -> Tensor:
        if self.conv is not None and self.norm is not None:
            x = self.conv(relu(self.norm(x, training)))
        return avg_pool3d(x, self.window)


class ClassifierHead:
    def __init__(self, norm: BatchNorm3d, fc: Linear):
        self.norm = norm
        self.fc = fc

    def __call__(self, x: Tensor, training: bool) -> Tensor:
        return self.fc(global_avg_pool(relu(self.norm(x, training))))


class LGCNet:
    """A built network: its configuration, layer graph and parameters."""

    def __init__(self, config: ModelConfig, graph: NetworkGraph, rng: np.random.Generator, dtype=np.float32):
        self.config = config
        self.graph = graph
        self.dtype = np.dtype(dtype)
        self.steps: list[DenseLayer | Transition] = []
        self.stem = Conv3dLayer.create(Conv3dSpec(1, graph["stem"].out_channels), rng, dtype=dtype)
        for record in graph.layers:
            if record.kind == "dense":
                spec = Conv3dSpec(record.in_channels, record.out_channels)
                self.steps.append(
                    DenseLayer(
                        record,
                        BatchNorm3d(record.in_channels, dtype=dtype),
                        LgcConv3d.create(spec, record.groups, rng, dtype),
                    )
                )
            elif record.kind == "transition":
                window = tuple(record.window or (2, 2, 2))
                if record.kernel is None:
                    self.steps.append(Transition(record, window))  # type: ignore[arg-type]
                else:
                    spec = Conv3dSpec(record.in_channels, record.out_channels, kernel=1, padding=0)
                    self.steps.append(
                        Transition(
                            record,
                            window,  # type: ignore[arg-type]
                            BatchNorm3d(record.in_channels, dtype=dtype),
                            LgcConv3d.create(spec, record.groups, rng, dtype),
                        )
                    )
        head = graph["head"]
        self.head = ClassifierHead(
            BatchNorm3d(head.in_channels, dtype=dtype), Linear.create(head.in_channels, head.out_channels, rng, dtype)
        )

    def forward(self, x: Tensor | np.ndarray, training: bool = False) -> Tensor:
        """Class logits (batch, num_classes) of patches shaped (batch, 1, bands, patch, patch)."""
        x = as_tensor(x)
        expected = (1, *self.config.input_dims)
        if x.ndim != 5:
            raise ShapeError(f"network input must be (batch, 1, bands, patch, patch), got rank {x.ndim}")
        for axis, name in enumerate(("channel", "band", "height", "width"), start=1):
            if x.shape[axis] != expected[axis - 1]:
                raise ShapeError(f"{name} axis ({axis}) has size {x.shape[axis]}, expected {expected[axis - 1]}")
        if x.dtype != self.dtype:
            x = Tensor(x.data.astype(self.dtype), requires_grad=x.requires_grad, creator=x.creator)
        buffer = self.stem(x)
        for step in self.steps:
            if buffer.shape[1] != step.record.in_channels:
                raise GraphError(
                    f"{step.record.name} expects {step.record.in_channels} channels, the buffer holds {buffer.shape[1]}"
                )
            if isinstance(step, DenseLayer):
                buffer = concat([buffer, step(buffer, training)], axis=1)
            else:
                buffer = step(buffer, training)
        if buffer.shape[1] != self.graph["head"].in_channels:
            raise GraphError(
                f"head expects {self.graph['head'].in_channels} channels, the buffer holds {buffer.shape[1]}"
            )
        return self.head(buffer, training)

    __call__ = forward

    def predict(self, x: np.ndarray, batch_size: int = 256) -> np.ndarray:
        """Predicted 0-indexed classes, evaluated batch by batch without recording a graph."""
        predictions = []
        with no_grad():
            for start in range(0, len(x), batch_size):
                predictions.append(np.argmax(self.forward(x[start : start + batch_size]).data, axis=1))
        return np.concatenate(predictions) if predictions else np.zeros(0, dtype=np.int64)

    def lgc_layers(self) -> dict[str, LgcConv3d]:
        layers = {}
        for step in self.steps:
            if step.conv is not None:
                layers[step.record.name] = step.conv
        return layers

    def batch_norms(self) -> dict[str, BatchNorm3d]:
        norms = {}
        for step in self.steps:
            if step.norm is not None:
                norms[step.record.name] = step.norm
        norms["head"] = self.head.norm
        return norms

    def named_parameters(self, include_selection: bool = True) -> dict[str, Tensor]:
        params = {f"stem.{key}": value for key, value in self.stem.parameters().items()}
        for step in self.steps:
            if step.norm is not None:
                params.update({f"{step.record.name}.norm.{k}": v for k, v in step.norm.parameters().items()})
            if step.conv is not None:
                params.update(
                    {f"{step.record.name}.conv.{k}": v for k, v in step.conv.parameters(include_selection).items()}
                )
        params.update({f"head.norm.{k}": v for k, v in self.head.norm.parameters().items()})
        params.update({f"head.fc.{k}": v for k, v in self.head.fc.parameters().items()})
        return params

    def named_buffers(self) -> dict[str, np.ndarray]:
        return {
            f"{name}.norm.{key}": value
            for name, norm in self.batch_norms().items()
            for key, value in norm.buffers().items()
        }

    @property
    def mode(self) -> SelectionMode:
        layers = list(self.lgc_layers().values())
        return layers[0].mode if layers else SelectionMode.SOFT

    def set_mode(self, mode: SelectionMode | str) -> None:
        for layer in self.lgc_layers().values():
            layer.set_mode(SelectionMode(mode))

    @property
    def temperature(self) -> float:
        layers = list(self.lgc_layers().values())
        return layers[0].channel_selection.temperature if layers else 1.0

    def set_temperature(self, temperature: float) -> None:
        for layer in self.lgc_layers().values():
            layer.set_temperature(temperature)

    def zero_grad(self) -> None:
        for param in self.named_parameters().values():
            param.zero_grad()

    def regularizer(self) -> Tensor:
        """Sum of the empty-group penalties of every learnable group convolution."""
        total = Tensor(np.zeros((), dtype=self.dtype))
        for layer in self.lgc_layers().values():
            total = total + group_regularizer(layer.channel_selection, layer.kernel_selection)
        return total

    def recalibrate(self, batches: Iterable[np.ndarray]) -> int:
        """Recompute every batch-norm running statistic as the cumulative average over ``batches``."""
        norms = list(self.batch_norms().values())
        for norm in norms:
            norm.start_calibration()
        seen = 0
        try:
            with no_grad():
                for batch in batches:
                    self.forward(batch, training=False)
                    seen += 1
        finally:
            for norm in norms:
                norm.stop_calibration()
        logger.info("recalibrated %d batch norms on %d batches", len(norms), seen)
        return seen

    def freeze(self, allow_empty_groups: bool = True) -> FrozenNetwork:
        """Harden every selection and fold every batch norm into an inference-only network."""
        if self.stem.bias is not None:
            raise FreezeError("a stem convolution with bias cannot be frozen")
        steps: list[FrozenConv | FrozenPool] = [
            FrozenConv(GroupedConv3d.from_dense(self.stem.weight.data, self.stem.spec), name="stem")
        ]
        for step in self.steps:
            name = step.record.name
            if step.conv is not None and step.norm is not None:
                scale, shift = step.norm.fold()
                frozen = freeze(step.conv, allow_empty_groups=allow_empty_groups)
                steps.append(
                    FrozenConv(frozen, scale, shift, relu=True, append=isinstance(step, DenseLayer), name=name)
                )
            if isinstance(step, Transition):
                steps.append(FrozenPool(step.window, name=f"{name}.pool"))
        scale, shift = self.head.norm.fold()
        head = FrozenHead(
            self.head.fc.weight.data,
            None if self.head.fc.bias is None else self.head.fc.bias.data,
            scale,
            shift,
            relu=True,
        )
        return FrozenNetwork(tuple(steps), 1, head, {"model": self.config.model_dump(mode="json")})

    def state_dict(self) -> dict[str, np.ndarray]:
        state = {f"param.{name}": tensor.data.copy() for name, tensor in self.named_parameters().items()}
        state.update({f"buffer.{name}": value.copy() for name, value in self.named_buffers().items()})
        return state

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        targets: dict[str, np.ndarray] = {
            f"param.{name}": tensor.data for name, tensor in self.named_parameters().items()
        }
        targets.update({f"buffer.{name}": value for name, value in self.named_buffers().items()})
        missing = sorted(set(targets) - set(state))
        unexpected = sorted(set(state) - set(targets))
        if missing or unexpected:
            raise CheckpointError(f"state does not match the network: missing {missing[:3]}, unexpected {unexpected[:3]}")
        for name, target in targets.items():
            if state[name].shape != target.shape:
                raise CheckpointError(f"{name} has shape {state[name].shape}, the network expects {target.shape}")
            np.copyto(target, state[name].astype(target.dtype, copy=False))


def build_model(config: ModelConfig, rng: np.random.Generator | None = None, dtype=np.float32) -> LGCNet:
    graph = build_graph(config)
    model = LGCNet(config, graph, rng if rng is not None else np.random.default_rng(0), dtype)
    logger.debug(
        "built %s: %d dense layers, %d output features",
        config.name,
        len(graph.dense_layers()),
        graph["head"].in_channels,
    )
    return model


class LayerParams(BaseModel):
    name: str
    params: int
    selection: int = 0
    inference: int = 0
    """Parameters left after freezing: packed group weights, folded norms and the classifier."""


class ParamReport(BaseModel):
    total: int
    """Every learnable scalar, selection logits included."""

    without_selection: int
    selection: int
    inference: int
    layers: list[LayerParams] = Field(default_factory=list)


def _conv_inference_params(conv: LgcConv3d) -> int:
    channel_counts = np.bincount(conv.channel_selection.assignment(), minlength=conv.groups)
    kernel_counts = np.bincount(conv.kernel_selection.assignment(), minlength=conv.groups)
    return int((channel_counts * kernel_counts).sum()) * conv.spec.kernel_volume


def _sizes(params: dict[str, Tensor]) -> int:
    return sum(tensor.size for tensor in params.values())


def count_params(model: "LGCNet | LgcConv3d | Conv3dLayer | Linear | GroupedConv3d") -> ParamReport:
    """Exact learnable parameter counts, reported with and without the selection logits."""
    if isinstance(model, GroupedConv3d):
        packed = model.packed_parameters()
        return ParamReport(total=packed, without_selection=packed, selection=0, inference=packed)
    if isinstance(model, LgcConv3d):
        weight = model.weight.size
        selection = _sizes(model.parameters()) - weight
        return ParamReport(
            total=weight + selection,
            without_selection=weight,
            selection=selection,
            inference=_conv_inference_params(model),
        )
    if isinstance(model, Conv3dLayer | Linear):
        total = _sizes(model.parameters())
        return ParamReport(total=total, without_selection=total, selection=0, inference=total)

    layers = [LayerParams(name="stem", params=_sizes(model.stem.parameters()), inference=model.stem.weight.size)]
    for step in model.steps:
        params = selection = inference = 0
        if step.norm is not None:
            params += _sizes(step.norm.parameters())
            inference += _sizes(step.norm.parameters())
        if step.conv is not None:
            params += step.conv.weight.size
            selection += _sizes(step.conv.parameters()) - step.conv.weight.size
            inference += _conv_inference_params(step.conv)
        layers.append(LayerParams(name=step.record.name, params=params, selection=selection, inference=inference))
    head = _sizes(model.head.norm.parameters()) + _sizes(model.head.fc.parameters())
    layers.append(LayerParams(name="head", params=head, inference=head))

    without = sum(layer.params for layer in layers)
    selection = sum(layer.selection for layer in layers)
    return ParamReport(
        total=without + selection,
        without_selection=without,
        selection=selection,
        inference=sum(layer.inference for layer in layers),
        layers=layers,
    )


Grouping = Literal["balanced", "learned", "dense"]


def balanced_counts(total: int, groups: int) -> list[int]:
    """Split ``total`` members over ``groups`` as evenly as possible, larger groups first."""
    base, extra = divmod(total, groups)
    return [base + (1 if g < extra else 0) for g in range(groups)]


def conv_madds(
    spec: Conv3dSpec,
    input_dims: tuple[int, int, int],
    channel_counts: list[int] | None = None,
    kernel_counts: list[int] | None = None,
) -> int:
    """Multiply-adds of a convolution: output positions times the sum over groups of ``N_g * C_g * kernel volume``."""
    positions = math.prod(spec.output_dims(tuple(input_dims)))  # type: ignore[arg-type]
    if channel_counts is None or kernel_counts is None:
        connections = spec.out_kernels * spec.in_channels
    else:
        if len(channel_counts) != len(kernel_counts):
            raise ShapeError("channel and kernel group counts must list the same groups")
        connections = sum(n * c for n, c in zip(kernel_counts, channel_counts, strict=True))
    return positions * connections * spec.kernel_volume


class LayerCost(BaseModel):
    name: str
    madds: int


class MaddsReport(BaseModel):
    total: int
    conv: int
    linear: int
    grouping: str
    input_dims: list[int]
    layers: list[LayerCost] = Field(default_factory=list)


def _group_counts(conv: LgcConv3d | None, spec: Conv3dSpec, groups: int, grouping: str):
    if grouping == "dense" or groups == 1:
        return None, None
    if grouping == "learned":
        if conv is None:
            raise ConfigurationError("learned grouping needs a built model")
        return (
            np.bincount(conv.channel_selection.assignment(), minlength=groups).tolist(),
            np.bincount(conv.kernel_selection.assignment(), minlength=groups).tolist(),
        )
    return balanced_counts(spec.in_channels, groups), balanced_counts(spec.out_kernels, groups)


def count_madds(
    model: "LGCNet | LgcConv3d | GroupedConv3d | Conv3dLayer",
    input_dims: tuple[int, int, int] | None = None,
    grouping: Grouping = "balanced",
) -> MaddsReport:
    """Multiply-adds of one inference on a single patch.

    ``grouping`` picks the group sizes of learnable convolutions: ``balanced``
    splits channels and kernels evenly over G, ``learned`` reads the current
    hard assignment and ``dense`` counts them as standard convolutions.
    """
    if grouping not in ("balanced", "learned", "dense"):
        raise ConfigurationError(f"unknown grouping {grouping!r}")
    if not isinstance(model, LGCNet):
        if input_dims is None:
            raise ConfigurationError("counting a single layer needs its input dims")
        if isinstance(model, GroupedConv3d):
            channels, kernels = list(model.channel_counts), list(model.kernel_counts)
            if grouping == "dense":
                channels = kernels = None  # type: ignore[assignment]
            madds = conv_madds(model.spec, input_dims, channels, kernels)
        elif isinstance(model, LgcConv3d):
            channels, kernels = _group_counts(model, model.spec, model.groups, grouping)
            madds = conv_madds(model.spec, input_dims, channels, kernels)
        else:
            madds = conv_madds(model.spec, input_dims)
        return MaddsReport(
            total=madds, conv=madds, linear=0, grouping=grouping, input_dims=list(input_dims), layers=[]
        )

    dims = tuple(input_dims or model.config.input_dims)
    graph = build_graph(model.config, dims) if dims != model.config.input_dims else model.graph  # type: ignore[arg-type]
    lgc_layers = model.lgc_layers()
    layers = []
    conv_total = linear_total = 0
    for record in graph.layers:
        if record.kind == "head":
            madds = record.in_channels * record.out_channels
            linear_total += madds
        elif record.kernel is None:
            continue
        else:
            padding = 1 if record.kernel == [3, 3, 3] else 0
            spec = Conv3dSpec(record.in_channels, record.out_channels, tuple(record.kernel), padding=padding)  # type: ignore[arg-type]
            channels, kernels = _group_counts(lgc_layers.get(record.name), spec, record.groups, grouping)
            madds = conv_madds(spec, tuple(record.in_dims), channels, kernels)  # type: ignore[arg-type]
            conv_total += madds
        layers.append(LayerCost(name=record.name, madds=madds))
    return MaddsReport(
        total=conv_total + linear_total,
        conv=conv_total,
        linear=linear_total,
        grouping=grouping,
        input_dims=list(dims),
        layers=layers,
    )
