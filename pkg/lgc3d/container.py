"""Single-file container of named arrays: checkpoints and compiled plans.

Layout: 8-byte magic, little-endian uint64 manifest length, UTF-8 JSON
manifest, then the little-endian array payloads back to back. The manifest
lists every array with its shape, dtype, offset and SHA-256 checksum.
"""

import hashlib
import struct
from pathlib import Path
from typing import Any

import numpy as np
from pydantic import BaseModel
from pydantic import Field
from pydantic import ValidationError

from .utils import CheckpointError

MAGIC = b"LGC3DPKG"
HEADER = struct.Struct("<8sQ")
FORMAT_VERSION = 1


class ArrayEntry(BaseModel):
    name: str
    shape: list[int]
    dtype: str
    offset: int
    nbytes: int
    sha256: str


class ContainerManifest(BaseModel):
    kind: str
    """What the container holds, ``checkpoint`` or ``plan``."""

    version: int = FORMAT_VERSION
    arrays: list[ArrayEntry] = Field(default_factory=list)
    metadata: dict[str, Any] = Field(default_factory=dict)


def _little_endian(array: np.ndarray) -> np.ndarray:
    array = np.ascontiguousarray(array)
    return array.astype(array.dtype.newbyteorder("<"), copy=False)


def save_container(
    path: str | Path, kind: str, arrays: dict[str, np.ndarray], metadata: dict[str, Any]
) -> ContainerManifest:
    payloads = []
    entries = []
    offset = 0
    for name, array in arrays.items():
        data = _little_endian(np.asarray(array))
        raw = data.tobytes()
        entries.append(
            ArrayEntry(
                name=name,
                shape=list(data.shape),
                dtype=data.dtype.str,
                offset=offset,
                nbytes=len(raw),
                sha256=hashlib.sha256(raw).hexdigest(),
            )
        )
        payloads.append(raw)
        offset += len(raw)

    manifest = ContainerManifest(kind=kind, arrays=entries, metadata=metadata)
    encoded = manifest.model_dump_json().encode("utf-8")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("wb") as fd:
        fd.write(HEADER.pack(MAGIC, len(encoded)))
        fd.write(encoded)
        for raw in payloads:
            fd.write(raw)
    return manifest


def load_container(path: str | Path, kind: str | None = None) -> tuple[dict[str, np.ndarray], ContainerManifest]:
    raw = Path(path).read_bytes()
    if len(raw) < HEADER.size:
        raise CheckpointError(f"{path} is too short to be a container")
    magic, length = HEADER.unpack_from(raw)
    if magic != MAGIC:
        raise CheckpointError(f"{path} does not start with the container magic")
    start = HEADER.size + length
    if start > len(raw):
        raise CheckpointError(f"{path} is truncated inside its manifest")
    try:
        manifest = ContainerManifest.model_validate_json(raw[HEADER.size : start])
    except ValidationError as exc:
        raise CheckpointError(f"{path} has an unreadable manifest: {exc.error_count()} errors") from exc
    if manifest.version != FORMAT_VERSION:
        raise CheckpointError(f"{path} has unsupported container version {manifest.version}")
    if kind is not None and manifest.kind != kind:
        raise CheckpointError(f"{path} holds a {manifest.kind}, expected a {kind}")

    arrays = {}
    for entry in manifest.arrays:
        begin = start + entry.offset
        chunk = raw[begin : begin + entry.nbytes]
        if len(chunk) != entry.nbytes:
            raise CheckpointError(f"{path} is truncated inside array {entry.name!r}")
        if hashlib.sha256(chunk).hexdigest() != entry.sha256:
            raise CheckpointError(f"checksum mismatch for array {entry.name!r} in {path}")
        dtype = np.dtype(entry.dtype)
        array = np.frombuffer(chunk, dtype=dtype).reshape(entry.shape)
        arrays[entry.name] = array.astype(dtype.newbyteorder("="), copy=True)
    return arrays, manifest
