"""Training checkpoints stored in the named-array container."""

import json
import logging
from dataclasses import dataclass
from dataclasses import field
from pathlib import Path
from typing import Any

import numpy as np
from pydantic import BaseModel
from pydantic import Field

from .container import load_container
from .container import save_container
from .densenet import LGCNet
from .densenet import ModelConfig
from .densenet import build_model
from .lgc import SelectionMode
from .optim import RMSProp
from .utils import CheckpointError

logger = logging.getLogger(__name__)


class CheckpointMeta(BaseModel):
    model: ModelConfig
    train: dict[str, Any] = Field(default_factory=dict)
    epoch: int = 0
    best_val_oa: float = 0.0
    mode: SelectionMode = SelectionMode.SOFT
    temperature: float = 1.0
    """Multiplier of the selection logits in soft mode."""

    rng_state: str | None = None
    """JSON text of the numpy bit generator state."""

    extra: dict[str, Any] = Field(default_factory=dict)
    """Run context: cube name, split file, class count."""


@dataclass
class Checkpoint:
    meta: CheckpointMeta
    state: dict[str, np.ndarray]
    optimizer: dict[str, np.ndarray] = field(default_factory=dict)

    def build(self) -> LGCNet:
        """A network holding the stored parameters, buffers, selection mode and temperature."""
        model = build_model(self.meta.model, np.random.default_rng(0))
        model.load_state_dict(self.state)
        model.set_mode(self.meta.mode)
        model.set_temperature(self.meta.temperature)
        return model

    def rng(self) -> np.random.Generator:
        rng = np.random.default_rng()
        if self.meta.rng_state is not None:
            rng.bit_generator.state = json.loads(self.meta.rng_state)
        return rng


def save_checkpoint(
    path: str | Path,
    model: LGCNet,
    *,
    train: dict[str, Any] | None = None,
    epoch: int = 0,
    best_val_oa: float = 0.0,
    rng: np.random.Generator | None = None,
    optimizer: RMSProp | None = None,
    extra: dict[str, Any] | None = None,
) -> CheckpointMeta:
    meta = CheckpointMeta(
        model=model.config,
        train=train or {},
        epoch=epoch,
        best_val_oa=best_val_oa,
        mode=model.mode,
        temperature=model.temperature,
        rng_state=None if rng is None else json.dumps(rng.bit_generator.state),
        extra=extra or {},
    )
    arrays = dict(model.state_dict())
    if optimizer is not None:
        arrays.update({f"optim.{name}": value for name, value in optimizer.state_dict().items()})
    save_container(path, "checkpoint", arrays, meta.model_dump(mode="json"))
    logger.info("saved checkpoint of epoch %d (val OA %.4f) to %s", epoch, best_val_oa, path)
    return meta


def load_checkpoint(path: str | Path) -> Checkpoint:
    arrays, manifest = load_container(path, kind="checkpoint")
    try:
        meta = CheckpointMeta.model_validate(manifest.metadata)
    except ValueError as exc:
        raise CheckpointError(f"{path} has an invalid checkpoint manifest: {exc}") from exc
    state = {name: value for name, value in arrays.items() if not name.startswith("optim.")}
    optimizer = {name[len("optim.") :]: value for name, value in arrays.items() if name.startswith("optim.")}
    return Checkpoint(meta, state, optimizer)
