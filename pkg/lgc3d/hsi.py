"""Hyperspectral cubes: the cube file format, band removal, patches, splits and a synthetic generator.

A cube file starts with a 16-byte header (8-byte magic, little-endian uint32
format version, little-endian uint32 metadata length), followed by the UTF-8
JSON metadata, the little-endian float32 data in (height, width, bands)
row-major order and the little-endian int16 label raster (height, width).
"""

import json
import logging
import math
import struct
from collections.abc import Iterator
from dataclasses import dataclass
from dataclasses import field
from importlib import resources
from pathlib import Path
from typing import Literal

import numpy as np
from pydantic import BaseModel
from pydantic import ValidationError

from .utils import ConfigurationError
from .utils import CubeDimensionError
from .utils import CubeFormatError
from .utils import LabelRangeError
from .utils import ShapeError
from .utils import TruncatedPayloadError

logger = logging.getLogger(__name__)

CUBE_MAGIC = b"LGC3DHSI"
CUBE_VERSION = 1
CUBE_HEADER = struct.Struct("<8sII")
DATA_DTYPE = np.dtype("<f4")
LABEL_DTYPE = np.dtype("<i2")
MAX_ELEMENTS = 2**31 - 1
STD_FLOOR = 1e-8

PadMode = Literal["zero", "reflect"]


@dataclass(frozen=True, eq=False)
class HsiCube:
    """A hyperspectral cube with its label raster; label 0 marks unlabeled pixels."""

    data: np.ndarray
    labels: np.ndarray
    num_classes: int = 0
    class_names: list[str] = field(default_factory=list)
    name: str = "cube"

    def __post_init__(self):
        data = np.ascontiguousarray(self.data, dtype=np.float32)
        labels = np.ascontiguousarray(self.labels, dtype=np.int64)
        if data.ndim != 3:
            raise ShapeError(f"cube data must be (height, width, bands), got shape {data.shape}")
        if labels.shape != data.shape[:2]:
            raise ShapeError(f"label raster {labels.shape} does not match the cube spatial dims {data.shape[:2]}")
        if not np.isfinite(data).all():
            raise CubeFormatError("cube data contains non-finite values")
        num_classes = self.num_classes or int(labels.max(initial=0))
        if labels.size and (labels.min() < 0 or labels.max() > num_classes):
            raise LabelRangeError(f"labels must lie in [0, {num_classes}], found [{labels.min()}, {labels.max()}]")
        if self.class_names and len(self.class_names) != num_classes:
            raise LabelRangeError(f"{len(self.class_names)} class names for {num_classes} classes")
        data.setflags(write=False)
        labels.setflags(write=False)
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "labels", labels)
        object.__setattr__(self, "num_classes", num_classes)
        object.__setattr__(self, "class_names", list(self.class_names))

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def bands(self) -> int:
        return self.data.shape[2]

    def labeled_coords(self) -> np.ndarray:
        """Row-major (row, col) coordinates of every labeled pixel."""
        return np.argwhere(self.labels > 0)

    def class_counts(self) -> dict[int, int]:
        counts = np.bincount(self.labels.reshape(-1), minlength=self.num_classes + 1)
        return {k: int(counts[k]) for k in range(1, self.num_classes + 1)}

    def replace(self, **changes) -> "HsiCube":
        values = {
            "data": self.data,
            "labels": self.labels,
            "num_classes": self.num_classes,
            "class_names": self.class_names,
            "name": self.name,
        }
        values.update(changes)
        return HsiCube(**values)


class CubeHeader(BaseModel):
    height: int
    width: int
    bands: int
    num_classes: int
    data_dtype: str = DATA_DTYPE.str
    label_dtype: str = LABEL_DTYPE.str
    class_names: list[str] = []
    name: str = "cube"

    @property
    def payload_size(self) -> int:
        pixels = self.height * self.width
        return pixels * self.bands * DATA_DTYPE.itemsize + pixels * LABEL_DTYPE.itemsize


def _encode_cube(cube: HsiCube) -> bytes:
    if cube.num_classes > np.iinfo(LABEL_DTYPE).max:
        raise CubeDimensionError(f"{cube.num_classes} classes do not fit the int16 label raster")
    header = CubeHeader(
        height=cube.height,
        width=cube.width,
        bands=cube.bands,
        num_classes=cube.num_classes,
        class_names=cube.class_names,
        name=cube.name,
    )
    metadata = header.model_dump_json().encode("utf-8")
    return b"".join(
        [
            CUBE_HEADER.pack(CUBE_MAGIC, CUBE_VERSION, len(metadata)),
            metadata,
            cube.data.astype(DATA_DTYPE).tobytes(),
            cube.labels.astype(LABEL_DTYPE).tobytes(),
        ]
    )


def save_cube(cube: HsiCube, path: str | Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(_encode_cube(cube))
    logger.info("saved cube %s (%dx%dx%d) to %s", cube.name, cube.height, cube.width, cube.bands, path)


def load_cube(path: str | Path) -> HsiCube:
    raw = Path(path).read_bytes()
    if len(raw) < CUBE_HEADER.size:
        raise CubeFormatError(f"{path} is too short to hold a cube header")
    magic, version, length = CUBE_HEADER.unpack_from(raw)
    if magic != CUBE_MAGIC:
        raise CubeFormatError(f"{path} does not start with the cube magic")
    if version != CUBE_VERSION:
        raise CubeFormatError(f"{path} has unsupported cube format version {version}")
    start = CUBE_HEADER.size + length
    if start > len(raw):
        raise TruncatedPayloadError(f"{path} is truncated inside its metadata block")
    try:
        header = CubeHeader.model_validate_json(raw[CUBE_HEADER.size : start])
    except ValidationError as exc:
        raise CubeFormatError(f"{path} has an invalid metadata block: {exc.error_count()} errors") from exc
    if header.data_dtype != DATA_DTYPE.str or header.label_dtype != LABEL_DTYPE.str:
        raise CubeFormatError(f"{path} stores unsupported dtypes {header.data_dtype}/{header.label_dtype}")

    dims = (header.height, header.width, header.bands)
    if min(dims) < 1 or header.height * header.width * header.bands > MAX_ELEMENTS:
        raise CubeDimensionError(f"{path} declares invalid cube dims {dims}")
    payload = len(raw) - start
    if payload < header.payload_size:
        raise TruncatedPayloadError(f"{path} holds {payload} payload bytes, its dims {dims} need {header.payload_size}")
    if payload > header.payload_size:
        raise CubeDimensionError(f"{path} holds {payload} payload bytes, its dims {dims} need {header.payload_size}")

    split = start + header.height * header.width * header.bands * DATA_DTYPE.itemsize
    data = np.frombuffer(raw, dtype=DATA_DTYPE, count=header.height * header.width * header.bands, offset=start)
    labels = np.frombuffer(raw, dtype=LABEL_DTYPE, count=header.height * header.width, offset=split)
    return HsiCube(
        data.reshape(dims).astype(np.float32),
        labels.reshape(dims[:2]).astype(np.int64),
        header.num_classes,
        header.class_names,
        header.name,
    )


def remove_bands(cube: HsiCube, band_indices) -> HsiCube:
    """Drop the given bands; the remaining bands keep their order."""
    indices = np.asarray(list(band_indices), dtype=np.int64)
    if indices.size == 0:
        return cube
    bad = indices[(indices < 0) | (indices >= cube.bands)]
    if bad.size:
        raise ShapeError(f"band index {int(bad[0])} is outside the band axis [0, {cube.bands})")
    if np.unique(indices).size != indices.size:
        raise ShapeError("band indices to remove must be distinct")
    keep = np.setdiff1d(np.arange(cube.bands), indices)
    return cube.replace(data=cube.data[:, :, keep])


def indian_pines_removed_bands() -> list[int]:
    """The 20 water-absorption bands commonly dropped from the 220-band Indian Pines cube (0-indexed)."""
    text = resources.files("lgc3d").joinpath("data/indian_pines_removed_bands.json").read_text()
    return json.loads(text)["bands"]


def pad_cube(data: np.ndarray, margin: int, pad_mode: PadMode = "zero") -> np.ndarray:
    if margin == 0:
        return data
    if pad_mode == "zero":
        return np.pad(data, ((margin, margin), (margin, margin), (0, 0)))
    if pad_mode == "reflect":
        return np.pad(data, ((margin, margin), (margin, margin), (0, 0)), mode="reflect")
    raise ConfigurationError(f"unknown pad mode {pad_mode!r}")


def _check_patch_size(size: int) -> int:
    if size < 1 or size % 2 == 0:
        raise ShapeError(f"patch size must be a positive odd integer, got {size}")
    return size // 2


def extract_patch(cube: HsiCube, center: tuple[int, int], size: int, pad_mode: PadMode = "zero") -> np.ndarray:
    """The ``size`` x ``size`` x bands window centered on ``center`` of the padded cube."""
    margin = _check_patch_size(size)
    row, col = center
    if not (0 <= row < cube.height and 0 <= col < cube.width):
        raise ShapeError(f"center {center} lies outside the {cube.height}x{cube.width} cube")
    padded = pad_cube(cube.data, margin, pad_mode)
    return padded[row : row + size, col : col + size, :].copy()


@dataclass
class PatchBatch:
    patches: np.ndarray
    """(batch, 1, bands, size, size): bands become the depth axis."""

    labels: np.ndarray
    """0-indexed classes, -1 for unlabeled centers."""

    coords: np.ndarray


class PatchSampler:
    """Assemble patch batches from a cube padded once."""

    def __init__(self, cube: HsiCube, size: int, pad_mode: PadMode = "zero"):
        self.cube = cube
        self.size = size
        self.margin = _check_patch_size(size)
        self.padded = pad_cube(cube.data, self.margin, pad_mode)

    def batch(self, coords: np.ndarray) -> PatchBatch:
        coords = np.asarray(coords, dtype=np.int64).reshape(-1, 2)
        if coords.size and (
            coords.min() < 0 or coords[:, 0].max() >= self.cube.height or coords[:, 1].max() >= self.cube.width
        ):
            raise ShapeError(f"patch centers must lie inside the {self.cube.height}x{self.cube.width} cube")
        size = self.size
        patches = np.empty((len(coords), 1, self.cube.bands, size, size), dtype=np.float32)
        for index, (row, col) in enumerate(coords):
            patches[index, 0] = self.padded[row : row + size, col : col + size, :].transpose(2, 0, 1)
        labels = self.cube.labels[coords[:, 0], coords[:, 1]] - 1 if coords.size else np.zeros(0, dtype=np.int64)
        return PatchBatch(patches, labels, coords)

    def iter_batches(
        self, coords: np.ndarray, batch_size: int, rng: np.random.Generator | None = None
    ) -> Iterator[PatchBatch]:
        """Batches in coordinate order, or in a permutation drawn from ``rng``."""
        coords = np.asarray(coords, dtype=np.int64).reshape(-1, 2)
        order = rng.permutation(len(coords)) if rng is not None else np.arange(len(coords))
        for start in range(0, len(order), batch_size):
            yield self.batch(coords[order[start : start + batch_size]])


def parse_ratios(text: str) -> tuple[int, int, int]:
    """Parse ``a:b:c`` train/val/test ratios."""
    try:
        parts = tuple(int(part) for part in text.split(":"))
    except ValueError as exc:
        raise ConfigurationError(f"ratios must be integers like 6:1:3, got {text!r}") from exc
    if len(parts) != 3 or min(parts) < 0 or sum(parts) == 0 or parts[0] == 0:
        raise ConfigurationError(f"ratios must be three non-negative integers with a positive train share, got {text!r}")
    return parts  # type: ignore[return-value]


class SampleSplit(BaseModel):
    """Train/val/test coordinates of the labeled pixels."""

    train: list[tuple[int, int]]
    val: list[tuple[int, int]]
    test: list[tuple[int, int]]
    ratios: tuple[int, int, int]
    seed: int
    cube: str = ""

    def coords(self, part: str) -> np.ndarray:
        if part not in ("train", "val", "test"):
            raise ConfigurationError(f"unknown split part {part!r}, use train, val or test")
        return np.asarray(getattr(self, part), dtype=np.int64).reshape(-1, 2)

    def save(self, path: str | Path) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(self.model_dump_json(indent=2))

    @classmethod
    def load(cls, path: str | Path) -> "SampleSplit":
        try:
            return cls.model_validate_json(Path(path).read_text())
        except ValidationError as exc:
            raise ConfigurationError(f"{path} is not a valid split manifest: {exc.error_count()} errors") from exc


def stratified_split(cube: HsiCube, ratios: tuple[int, int, int] = (6, 1, 3), seed: int = 0) -> SampleSplit:
    """Per class, shuffle the labeled pixels and cut ``floor(a/s*n)`` to train, ``floor(b/s*n)`` to val, the rest to test."""
    a, b, c = ratios
    total = a + b + c
    if min(ratios) < 0 or total == 0 or a == 0:
        raise ConfigurationError(f"invalid split ratios {ratios}")
    rng = np.random.default_rng(seed)
    parts: dict[str, list[tuple[int, int]]] = {"train": [], "val": [], "test": []}
    for k in range(1, cube.num_classes + 1):
        coords = np.argwhere(cube.labels == k)
        n = len(coords)
        if n == 0:
            continue
        coords = coords[rng.permutation(n)]
        if n < 3:
            logger.warning("class %d has only %d labeled pixels, all of them go to the training split", k, n)
            n_train, n_val = n, 0
        else:
            n_train, n_val = a * n // total, b * n // total
        parts["train"].extend(map(tuple, coords[:n_train].tolist()))
        parts["val"].extend(map(tuple, coords[n_train : n_train + n_val].tolist()))
        parts["test"].extend(map(tuple, coords[n_train + n_val :].tolist()))
    return SampleSplit(**parts, ratios=(a, b, c), seed=seed, cube=cube.name)


def normalize(cube: HsiCube) -> HsiCube:
    """Standardize every band to zero mean and unit standard deviation."""
    data = cube.data.astype(np.float64)
    mean = data.mean(axis=(0, 1))
    std = np.maximum(data.std(axis=(0, 1)), STD_FLOOR)
    return cube.replace(data=((data - mean) / std).astype(np.float32))


def _smooth_signature(bands: int, rng: np.random.Generator) -> np.ndarray:
    knots = min(bands, 5)
    positions = np.linspace(0, bands - 1, knots)
    values = rng.uniform(0.0, 1.0, size=knots)
    return np.interp(np.arange(bands), positions, values)


def _nearest_distance(candidate: np.ndarray, others: list[np.ndarray]) -> float:
    return min((float(np.linalg.norm(candidate - other)) for other in others), default=math.inf)


def synth_cube(
    size: int = 48,
    bands: int = 16,
    classes: int = 4,
    noise: float = 0.1,
    seed: int = 0,
    max_attempts: int = 1000,
) -> HsiCube:
    """A fully labeled cube: Voronoi regions of ``classes`` random sites, one smooth spectrum per class plus Gaussian noise.

    Class spectra are pairwise more than ``10 * noise`` apart in L2. Each
    class gets up to ``max_attempts`` draws to clear that distance; when the
    noise is too large for spectra in ``[0, 1]``, the best-separated draws are
    kept and every spectrum is scaled up until the distance holds.
    """
    if classes < 2:
        raise ConfigurationError(f"a synthetic cube needs at least 2 classes, got {classes}")
    if size * size < classes or bands < 1 or noise < 0 or max_attempts < 1:
        raise ConfigurationError(f"cannot place {classes} classes on a {size}x{size}x{bands} cube with noise {noise}")
    rng = np.random.default_rng(seed)
    sites = rng.choice(size * size, size=classes, replace=False)
    site_rows, site_cols = np.divmod(sites, size)
    rows, cols = np.mgrid[0:size, 0:size]
    distances = (rows[..., None] - site_rows) ** 2 + (cols[..., None] - site_cols) ** 2
    labels = np.argmin(distances, axis=-1) + 1

    threshold = max(10.0 * noise, 1e-6)
    signatures: list[np.ndarray] = []
    for _ in range(classes):
        best = _smooth_signature(bands, rng)
        best_gap = _nearest_distance(best, signatures)
        for _ in range(max_attempts - 1):
            if best_gap > threshold:
                break
            candidate = _smooth_signature(bands, rng)
            gap = _nearest_distance(candidate, signatures)
            if gap > best_gap:
                best, best_gap = candidate, gap
        signatures.append(best)
    spectra = np.stack(signatures)
    gap = min(_nearest_distance(spectra[k], signatures[:k]) for k in range(1, classes))
    if gap <= threshold:
        amplitude = 2.0 * threshold / max(gap, np.finfo(np.float64).eps)
        logger.debug("scaling synthetic spectra by %.3g to keep them %.3g apart", amplitude, threshold)
        spectra = spectra * amplitude
    data = spectra[labels - 1]
    if noise > 0:
        data = data + rng.normal(0.0, noise, size=data.shape)
    return HsiCube(
        data.astype(np.float32),
        labels,
        classes,
        [f"class{k}" for k in range(1, classes + 1)],
        f"synth-{size}x{size}x{bands}-k{classes}-s{seed}",
    )


def _load_array(path: Path, kind: str, shape: tuple[int, ...] | None, key: str | None) -> np.ndarray:
    suffix = path.suffix.lower()
    if suffix == ".npy":
        return np.load(path, allow_pickle=False)
    if suffix == ".csv":
        return np.loadtxt(path, delimiter=",", ndmin=2)
    if suffix in (".raw", ".bin"):
        if shape is None:
            raise ConfigurationError(f"raw dump {path} needs an explicit shape")
        dtype = DATA_DTYPE if kind == "data" else LABEL_DTYPE
        array = np.fromfile(path, dtype=dtype)
        if array.size != int(np.prod(shape)):
            raise CubeDimensionError(f"{path} holds {array.size} values, shape {shape} needs {int(np.prod(shape))}")
        return array.reshape(shape)
    if suffix == ".mat":
        try:
            from scipy.io import loadmat
        except ImportError as exc:
            raise ConfigurationError("reading .mat files needs scipy, install lgc3d[mat]") from exc
        content = {name: value for name, value in loadmat(path).items() if not name.startswith("__")}
        if key is None:
            if len(content) != 1:
                raise CubeFormatError(f"{path} holds variables {sorted(content)}, pick one with a key")
            key = next(iter(content))
        if key not in content:
            raise CubeFormatError(f"{path} has no variable {key!r}")
        return np.asarray(content[key])
    raise CubeFormatError(f"unsupported input format {suffix!r}, use .npy, .csv, .raw or .mat")


def convert(
    data_path: str | Path,
    labels_path: str | Path,
    shape: tuple[int, int, int] | None = None,
    name: str | None = None,
    data_key: str | None = None,
    labels_key: str | None = None,
    class_names: list[str] | None = None,
) -> HsiCube:
    """Build a cube from a data array and a label raster in npy, csv, raw or mat form.

    CSV data holds one pixel per row (height * width rows, bands columns) in
    row-major pixel order; CSV labels hold height rows and width columns. Raw
    dumps are little-endian float32 data and int16 labels and need ``shape``.
    """
    data_path, labels_path = Path(data_path), Path(labels_path)
    label_shape = shape[:2] if shape is not None else None
    labels = _load_array(labels_path, "labels", label_shape, labels_key)
    if labels.ndim != 2:
        raise CubeDimensionError(f"label raster must be 2-dimensional, got shape {labels.shape}")
    data = _load_array(data_path, "data", shape, data_key)
    if data.ndim == 2 and data.shape[0] == labels.size:
        data = data.reshape(*labels.shape, data.shape[1])
    if data.ndim != 3 or data.shape[:2] != labels.shape:
        raise CubeDimensionError(f"data shape {data.shape} does not match the label raster {labels.shape}")
    if not np.array_equal(labels, np.round(labels)):
        raise LabelRangeError("labels must be integers")
    labels = labels.astype(np.int64)
    return HsiCube(
        data.astype(np.float32),
        labels,
        len(class_names) if class_names else 0,
        class_names or [],
        name or data_path.stem,
    )
