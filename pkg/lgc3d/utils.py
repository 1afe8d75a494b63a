import functools
from dataclasses import dataclass
from enum import Enum
from enum import auto
from typing import Any


class Status(Enum):
    SUCCESS = auto()
    ERROR = auto()


class LGCError(Exception):
    """Base exception of the engine, raised by every operation on invalid input or state."""

    def __init__(self, message: str):
        super().__init__(message)
        self.message = message

    def __str__(self):
        return self.message


class ShapeError(LGCError):
    """Raised when tensor dimensions do not fit an operation. The message names the axis."""


class LabelRangeError(LGCError):
    """Raised when a class label or an index is out of its valid range."""


class FreezeError(LGCError):
    """Raised when a learnable group convolution cannot be packed into groups."""


class CompileError(LGCError):
    """Raised when a network cannot be turned into a compiled inference plan."""


class GraphError(LGCError):
    """Raised when channel bookkeeping between layers is inconsistent."""


class ConfigurationError(LGCError):
    """Raised when a model, training or data configuration is invalid."""


class CubeFormatError(LGCError):
    """Raised when a cube file has a bad magic number or an unsupported version."""


class CubeDimensionError(LGCError):
    """Raised when cube dimensions overflow or disagree with the payload size."""


class TruncatedPayloadError(LGCError):
    """Raised when a file ends before its declared payload."""


class CheckpointError(LGCError):
    """Raised when a checkpoint or plan container is corrupted or incompatible."""


class NonFiniteLossError(LGCError):
    """Raised when the training loss becomes NaN or infinite."""


class EquivalenceError(LGCError):
    """Raised when two execution paths that must agree produce different results."""


class MetricsError(LGCError):
    """Raised when metrics are requested on empty inputs."""


@dataclass
class CheckConfig:
    """Object used to configure the checks behavior."""

    seed: int = 0
    """Seed of the random generator producing the checked instances."""

    instances: int = 20
    """How many random instances the gradient, continuity and multiply-add checks draw."""

    layers: int = 200
    """How many random hard-assigned layers the decomposition check draws."""

    chains: int = 10
    """How many random layer chains the compiler check builds, besides the predefined sizes."""

    inputs: int = 50
    """How many random inputs each compiled network is run on."""

    raise_exceptions: bool = False
    """Whether to raise exceptions or store them in a :class:`~lgc3d.CheckResult` object."""

    gradient_tolerance: float = 1e-4
    """Maximum relative error between analytic and finite-difference gradients."""

    equivalence_tolerance: float = 1e-4
    """Maximum absolute difference between two execution paths, in float32."""


class CheckFailedError(LGCError):
    """Exception raised when a check failed and the `raise_exceptions` config parameter is :data:`True`."""

    def __init__(self, message: str, result: "CheckResult"):
        super().__init__(message)
        self.result = result


@dataclass
class CheckResult:
    """Store a check result."""

    conf: CheckConfig
    status: Status

    title: str | None = None
    """The title of the check."""

    description: str | None = None
    """What the check verifies."""

    reason: str | None = None
    """Why it failed, or how it succeed."""

    data: Any | None = None
    """Any related data that can help to debug."""

    def __post_init__(self):
        if self.conf.raise_exceptions and self.status == Status.ERROR:
            raise CheckFailedError(self.reason or "check failed", self)


def checker(func):
    """Decorate checker functions.

    - It adds a title and a description to the returned result, extracted from the function name and its docstring.
    - It catches engine errors.
    """

    @functools.wraps(func)
    def wrapped(conf: CheckConfig, *args, **kwargs):
        try:
            result = func(conf, *args, **kwargs)
        except CheckFailedError:
            raise
        except LGCError as exc:
            if conf.raise_exceptions:
                raise

            result = CheckResult(
                conf,
                status=Status.ERROR,
                reason=f"{exc.__class__.__name__}: {exc}",
            )

        result.title = func.__name__
        result.description = func.__doc__
        return result

    return wrapped


def as_triple(value: int | tuple[int, ...] | list[int], name: str) -> tuple[int, int, int]:
    """Expand an int into a (depth, height, width) triple and validate it."""
    if isinstance(value, int):
        triple = (value, value, value)
    else:
        triple = tuple(int(v) for v in value)
    if len(triple) != 3:
        raise ShapeError(f"{name} must have 3 entries (depth, height, width), got {len(triple)}")
    return triple  # type: ignore[return-value]
