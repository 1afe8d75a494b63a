"""Training with RMSProp, best-on-validation checkpointing and evaluation."""

import logging
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from pydantic import BaseModel
from pydantic import Field
from pydantic import field_validator
from tqdm import tqdm

from .checkpoint import save_checkpoint
from .compiler import CompiledNetwork
from .compiler import FrozenNetwork
from .compiler import compile_network
from .compiler import run_compiled
from .compiler import run_frozen
from .densenet import LGCNet
from .densenet import ModelConfig
from .densenet import build_model
from .densenet import count_params
from .functional import cross_entropy
from .hsi import HsiCube
from .hsi import PatchSampler
from .hsi import SampleSplit
from .hsi import normalize
from .lgc import SelectionMode
from .metrics import MetricsReport
from .metrics import confusion_matrix
from .optim import RMSProp
from .utils import ConfigurationError
from .utils import EquivalenceError
from .utils import NonFiniteLossError

logger = logging.getLogger(__name__)

CHECKPOINT_FILE = "checkpoint.lgc"
HISTORY_FILE = "history.json"
METRICS_FILE = "metrics.json"
SUMMARY_FILE = "summary.json"


class TrainConfig(BaseModel):
    """Optimization settings of a run."""

    epochs: int = 100
    lr: float = 5e-4
    alpha: float = 0.99
    """RMSProp decay of the squared-gradient average."""

    eps: float = 1e-8
    batch_size: int = 32
    seed: int = 0
    regularizer_weight: float = 0.1
    """Weight of the empty-group penalty added to the loss."""

    temperature_anneal: bool = False
    temperature_max: float = 10.0
    normalize: bool = True
    """Standardize every band before extracting patches."""

    harden: bool = True
    """Switch the best model to hard selections and recalibrate its batch norms before the final save."""

    eval_batch_size: int = 256

    @field_validator("epochs", "batch_size", "eval_batch_size")
    @classmethod
    def _at_least_one(cls, value: int) -> int:
        if value < 1:
            raise ValueError("must be at least 1")
        return value

    @field_validator("lr", "eps", "temperature_max")
    @classmethod
    def _positive(cls, value: float) -> float:
        if value <= 0:
            raise ValueError("must be positive")
        return value


class EpochRecord(BaseModel):
    epoch: int
    train_loss: float
    val_oa: float
    temperature: float = 1.0
    saved: bool = False


class TrainingHistory(BaseModel):
    epochs: list[EpochRecord] = Field(default_factory=list)
    best_epoch: int = 0
    best_val_oa: float = 0.0


class RunRecord(BaseModel):
    """What ``metrics.json`` holds for one run."""

    dataset: str
    ratios: str
    patch_size: int
    config: str
    seed: int
    best_epoch: int
    best_val_oa: float
    params: int
    metrics: MetricsReport | None = None
    """Test metrics, absent when the test split is empty."""


class BestTracker:
    """Keep the state of the epoch with the strictly highest validation accuracy."""

    def __init__(self):
        self.best_val_oa = -math.inf
        self.best_epoch = 0
        self.state: dict[str, np.ndarray] | None = None
        self.temperature = 1.0

    def update(
        self, epoch: int, val_oa: float, state: dict[str, np.ndarray], temperature: float = 1.0
    ) -> bool:
        if val_oa <= self.best_val_oa:
            return False
        self.best_val_oa = val_oa
        self.best_epoch = epoch
        self.state = state
        self.temperature = temperature
        return True


def temperature_at(epoch: int, config: TrainConfig) -> float:
    """Selection temperature of a 1-indexed epoch, annealed linearly from 1 to ``temperature_max``."""
    if not config.temperature_anneal or config.epochs == 1:
        return 1.0
    return 1.0 + (config.temperature_max - 1.0) * (epoch - 1) / (config.epochs - 1)


def prepare_cube(cube: HsiCube, config: TrainConfig) -> HsiCube:
    return normalize(cube) if config.normalize else cube


def check_compatible(config: ModelConfig, cube: HsiCube) -> None:
    if config.num_classes != cube.num_classes:
        raise ConfigurationError(f"the network predicts {config.num_classes} classes, the cube has {cube.num_classes}")
    if config.bands != cube.bands:
        raise ConfigurationError(f"the network reads {config.bands} bands, the cube has {cube.bands}")


def predict(
    model: LGCNet | FrozenNetwork | CompiledNetwork,
    sampler: PatchSampler,
    coords: np.ndarray,
    batch_size: int = 256,
) -> np.ndarray:
    """Predicted 0-indexed classes of the patches centered on ``coords``."""
    predictions = []
    for batch in sampler.iter_batches(coords, batch_size):
        if isinstance(model, CompiledNetwork):
            predictions.append(np.argmax(run_compiled(batch.patches, model), axis=1))
        elif isinstance(model, FrozenNetwork):
            predictions.append(np.argmax(run_frozen(batch.patches, model), axis=1))
        else:
            predictions.append(model.predict(batch.patches, batch_size))
    return np.concatenate(predictions) if predictions else np.zeros(0, dtype=np.int64)


def accuracy_on(model: LGCNet, sampler: PatchSampler, coords: np.ndarray, batch_size: int) -> float:
    if len(coords) == 0:
        return 0.0
    labels = sampler.cube.labels[coords[:, 0], coords[:, 1]] - 1
    return float(np.mean(predict(model, sampler, coords, batch_size) == labels))


def evaluate(
    model: LGCNet,
    cube: HsiCube,
    coords: np.ndarray,
    compiled: bool = False,
    batch_size: int = 256,
) -> MetricsReport:
    """Metrics of ``model`` on the labeled pixels at ``coords``.

    With ``compiled`` the hardened network runs through the compiled plan and
    its confusion matrix must equal the uncompiled frozen network's.
    """
    check_compatible(model.config, cube)
    sampler = PatchSampler(cube, model.config.patch_size)
    coords = np.asarray(coords, dtype=np.int64).reshape(-1, 2)
    true = cube.labels[coords[:, 0], coords[:, 1]] - 1
    k = model.config.num_classes
    if not compiled:
        return MetricsReport.from_labels(true, predict(model, sampler, coords, batch_size), k)

    frozen = model.freeze()
    plan = compile_network(frozen)
    reference = confusion_matrix(true, predict(frozen, sampler, coords, batch_size), k)
    matrix = confusion_matrix(true, predict(plan, sampler, coords, batch_size), k)
    if not np.array_equal(reference, matrix):
        raise EquivalenceError("compiled and uncompiled inference produced different confusion matrices")
    return MetricsReport.from_matrix(matrix)


@dataclass
class TrainResult:
    model: LGCNet
    history: TrainingHistory
    record: RunRecord
    run_dir: Path | None = None


def train(
    cube: HsiCube,
    split: SampleSplit,
    model_config: ModelConfig,
    config: TrainConfig | None = None,
    run_dir: str | Path | None = None,
    progress: bool = False,
) -> TrainResult:
    """Train a network, keep the best model on the validation split and evaluate it on the test split.

    With ``run_dir`` the checkpoint is rewritten whenever the validation
    accuracy strictly improves, and the final hardened model, the history and
    the test metrics are written there.
    """
    config = config or TrainConfig()
    check_compatible(model_config, cube)
    cube = prepare_cube(cube, config)
    run_dir = Path(run_dir) if run_dir is not None else None
    checkpoint_path = run_dir / CHECKPOINT_FILE if run_dir is not None else None
    logger.info("training %s for %d epochs: %s", model_config.name, config.epochs, config.model_dump())

    rng = np.random.default_rng(config.seed)
    model = build_model(model_config, rng)
    optimizer = RMSProp(model.named_parameters(), lr=config.lr, alpha=config.alpha, eps=config.eps)
    sampler = PatchSampler(cube, model_config.patch_size)
    train_coords, val_coords, test_coords = split.coords("train"), split.coords("val"), split.coords("test")
    if len(train_coords) == 0:
        raise ConfigurationError("the training split is empty")
    extra = {"cube": cube.name, "ratios": list(split.ratios), "split_seed": split.seed}

    history = TrainingHistory()
    tracker = BestTracker()
    for epoch in tqdm(range(1, config.epochs + 1), desc="epochs", disable=not progress):
        temperature = temperature_at(epoch, config)
        model.set_temperature(temperature)
        total, seen = 0.0, 0
        for batch_index, batch in enumerate(sampler.iter_batches(train_coords, config.batch_size, rng)):
            optimizer.zero_grad()
            loss = cross_entropy(model(batch.patches, training=True), batch.labels)
            if config.regularizer_weight:
                loss = loss + config.regularizer_weight * model.regularizer()
            value = loss.item()
            if not math.isfinite(value):
                raise NonFiniteLossError(f"loss became {value} at epoch {epoch}, batch {batch_index}")
            loss.backward()
            optimizer.step()
            total += value * len(batch.labels)
            seen += len(batch.labels)

        val_oa = accuracy_on(model, sampler, val_coords, config.eval_batch_size)
        saved = tracker.update(epoch, val_oa, model.state_dict(), temperature)
        if saved and checkpoint_path is not None:
            save_checkpoint(
                checkpoint_path,
                model,
                train=config.model_dump(),
                epoch=epoch,
                best_val_oa=val_oa,
                rng=rng,
                optimizer=optimizer,
                extra=extra,
            )
        history.epochs.append(
            EpochRecord(epoch=epoch, train_loss=total / seen, val_oa=val_oa, temperature=temperature, saved=saved)
        )
        logger.info("epoch %d: loss %.5f, val OA %.4f%s", epoch, total / seen, val_oa, " (saved)" if saved else "")

    assert tracker.state is not None
    model.load_state_dict(tracker.state)
    model.set_temperature(tracker.temperature)
    history.best_epoch = tracker.best_epoch
    history.best_val_oa = tracker.best_val_oa
    if config.harden:
        model.set_mode(SelectionMode.HARD)
        model.recalibrate(batch.patches for batch in sampler.iter_batches(train_coords, config.batch_size))

    metrics = (
        evaluate(model, cube, test_coords, batch_size=config.eval_batch_size) if len(test_coords) else None
    )
    record = RunRecord(
        dataset=cube.name,
        ratios=":".join(str(r) for r in split.ratios),
        patch_size=model_config.patch_size,
        config=model_config.name,
        seed=config.seed,
        best_epoch=tracker.best_epoch,
        best_val_oa=tracker.best_val_oa,
        params=count_params(model).without_selection,
        metrics=metrics,
    )
    if run_dir is not None and checkpoint_path is not None:
        run_dir.mkdir(parents=True, exist_ok=True)
        save_checkpoint(
            checkpoint_path,
            model,
            train=config.model_dump(),
            epoch=tracker.best_epoch,
            best_val_oa=tracker.best_val_oa,
            rng=rng,
            optimizer=optimizer,
            extra=extra,
        )
        (run_dir / HISTORY_FILE).write_text(history.model_dump_json(indent=2))
        (run_dir / METRICS_FILE).write_text(record.model_dump_json(indent=2))
    logger.info("best epoch %d, val OA %.4f", tracker.best_epoch, tracker.best_val_oa)
    if metrics is not None:
        logger.info("test OA %.4f, AA %.4f, kappa %.4f", metrics.overall_accuracy, metrics.average_accuracy, metrics.kappa)
    return TrainResult(model=model, history=history, record=record, run_dir=run_dir)


class MetricSummary(BaseModel):
    mean: float
    std: float


class RunsSummary(BaseModel):
    runs: list[RunRecord]
    overall_accuracy: MetricSummary
    average_accuracy: MetricSummary
    kappa: MetricSummary


def summarize(records: list[RunRecord]) -> RunsSummary:
    evaluated = [r.metrics for r in records if r.metrics is not None]
    if not evaluated:
        raise ConfigurationError("no run has test metrics to summarize")

    def stats(values: list[float]) -> MetricSummary:
        return MetricSummary(mean=float(np.mean(values)), std=float(np.std(values)))

    return RunsSummary(
        runs=records,
        overall_accuracy=stats([m.overall_accuracy for m in evaluated]),
        average_accuracy=stats([m.average_accuracy for m in evaluated]),
        kappa=stats([m.kappa for m in evaluated]),
    )


def train_runs(
    cube: HsiCube,
    split: SampleSplit,
    model_config: ModelConfig,
    config: TrainConfig,
    runs: int,
    run_dir: str | Path | None = None,
    progress: bool = False,
) -> RunsSummary:
    """Repeat training ``runs`` times with seeds ``seed, seed + 1, ...`` and report mean and std of the test metrics."""
    if runs < 1:
        raise ConfigurationError(f"runs must be at least 1, got {runs}")
    records = []
    for index in range(runs):
        seeded = config.model_copy(update={"seed": config.seed + index})
        sub_dir = None if run_dir is None else Path(run_dir) / f"run{index}"
        records.append(train(cube, split, model_config, seeded, sub_dir, progress).record)
    summary = summarize(records)
    if run_dir is not None:
        Path(run_dir).mkdir(parents=True, exist_ok=True)
        (Path(run_dir) / SUMMARY_FILE).write_text(summary.model_dump_json(indent=2))
    return summary
