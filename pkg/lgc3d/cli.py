"""The ``lgc3d`` command line.

Results go to stdout, logs and errors to stderr. Every command accepts
``--json``; an engine error exits with status 1 after a single
``error: <ErrorClass>: <message>`` line (or a one-line JSON object).
"""

import functools
import json
import logging
import sys
from pathlib import Path
from typing import Any

import click
from pydantic import BaseModel

from .checker import check_engine
from .checkpoint import load_checkpoint
from .compiler import bench
from .compiler import compile_network
from .compiler import load_plan
from .compiler import save_plan
from .config import load_config
from .config import read_config_file
from .config import validate_config
from .densenet import ModelConfig
from .densenet import build_model
from .densenet import predefined_configs
from .hsi import HsiCube
from .hsi import SampleSplit
from .hsi import convert as convert_cube
from .hsi import indian_pines_removed_bands
from .hsi import load_cube
from .hsi import parse_ratios
from .hsi import remove_bands
from .hsi import save_cube
from .hsi import stratified_split
from .hsi import synth_cube
from .reporting import cost_report
from .reporting import render_map
from .reporting import report_tables
from .training import TrainConfig
from .training import evaluate
from .training import prepare_cube
from .training import train as train_model
from .training import train_runs
from .utils import CheckConfig
from .utils import ConfigurationError
from .utils import LGCError
from .utils import Status

logger = logging.getLogger(__name__)


class ClickHandler(logging.Handler):
    """Write log records to the current stderr through click."""

    def emit(self, record: logging.LogRecord) -> None:
        try:
            click.echo(self.format(record), err=True)
        except Exception:
            self.handleError(record)


def configure_logging(verbosity: int) -> None:
    level = logging.WARNING if verbosity <= 0 else logging.INFO if verbosity == 1 else logging.DEBUG
    package = logging.getLogger("lgc3d")
    package.setLevel(level)
    if not any(isinstance(handler, ClickHandler) for handler in package.handlers):
        handler = ClickHandler()
        handler.setFormatter(logging.Formatter("%(levelname)s %(name)s: %(message)s"))
        package.addHandler(handler)


def _jsonable(payload: Any) -> Any:
    if isinstance(payload, BaseModel):
        return payload.model_dump(mode="json")
    if isinstance(payload, list):
        return [_jsonable(item) for item in payload]
    if isinstance(payload, dict):
        return {key: _jsonable(value) for key, value in payload.items()}
    return payload


def emit(as_json: bool, payload: Any, text: str) -> None:
    """Print ``payload`` as JSON, or ``text`` for humans."""
    click.echo(json.dumps(_jsonable(payload), indent=2) if as_json else text)


def report_error(exc: Exception, message: str, as_json: bool) -> None:
    if as_json:
        click.echo(json.dumps({"error": type(exc).__name__, "message": message}), err=True)
    else:
        click.echo(f"error: {type(exc).__name__}: {message}", err=True)


def command(group: click.Group, name: str | None = None):
    """Register a subcommand taking ``--json`` and reporting engine and file system errors on a single line."""

    def decorator(func):
        @group.command(name=name or func.__name__.replace("_", "-"))
        @click.option("--json", "as_json", is_flag=True, help="Print machine-readable JSON on stdout.")
        @functools.wraps(func)
        def wrapped(*args, as_json: bool, **kwargs):
            try:
                return func(*args, as_json=as_json, **kwargs)
            except LGCError as exc:
                report_error(exc, exc.message, as_json)
                raise click.exceptions.Exit(1) from exc
            except OSError as exc:
                report_error(exc, str(exc), as_json)
                raise click.exceptions.Exit(1) from exc

        return wrapped

    return decorator


def progress_enabled(as_json: bool) -> bool:
    return not as_json and sys.stderr.isatty()


def parse_shape(text: str | None) -> tuple[int, int, int] | None:
    if text is None:
        return None
    try:
        shape = tuple(int(part) for part in text.replace("x", ",").split(","))
    except ValueError as exc:
        raise ConfigurationError(f"shape must look like 145,145,220, got {text!r}") from exc
    if len(shape) != 3 or min(shape) < 1:
        raise ConfigurationError(f"shape needs three positive dims (height, width, bands), got {text!r}")
    return shape  # type: ignore[return-value]


def parse_bands(text: str | None) -> list[int]:
    if not text:
        return []
    if text == "indian-pines":
        return indian_pines_removed_bands()
    try:
        return [int(part) for part in text.split(",") if part.strip()]
    except ValueError as exc:
        raise ConfigurationError(f"bands to remove must be 'indian-pines' or comma separated indices, got {text!r}") from exc


def resolve_model_config(config: str, overrides: dict[str, Any]) -> ModelConfig:
    """A predefined size by name, or a TOML/JSON file, with command-line overrides."""
    predefined = predefined_configs()
    if config in predefined:
        data = predefined[config].model_dump()
        data.update({key: value for key, value in overrides.items() if value is not None})
        return validate_config(ModelConfig, data, source=f"{config} configuration")
    if not Path(config).exists():
        raise ConfigurationError(f"{config!r} is neither a predefined size ({', '.join(predefined)}) nor a file")
    return load_config(ModelConfig, config, overrides)


def cube_summary(cube: HsiCube, path: Path) -> dict[str, Any]:
    return {
        "cube": cube.name,
        "path": str(path),
        "height": cube.height,
        "width": cube.width,
        "bands": cube.bands,
        "classes": cube.num_classes,
        "labeled": int((cube.labels > 0).sum()),
    }


def checkpoint_cube(cube_path: Path, train_config: dict[str, Any]) -> HsiCube:
    """The cube as the checkpointed run saw it."""
    return prepare_cube(load_cube(cube_path), TrainConfig.model_validate(train_config))


@click.group()
@click.option("-v", "--verbose", count=True, help="Log progress (-v) or debugging details (-vv) on stderr.")
@click.version_option(package_name="lgc3d")
def cli(verbose: int):
    """Learnable 3D group convolution networks for hyperspectral image classification."""
    configure_logging(verbose)


@command(cli)
@click.option("--data", "data_path", type=click.Path(exists=True, path_type=Path), required=True)
@click.option("--labels", "labels_path", type=click.Path(exists=True, path_type=Path), required=True)
@click.option("--shape", help="Height,width,bands of raw dumps.")
@click.option("--name", help="Cube name, defaults to the data file stem.")
@click.option("--data-key", help="Variable holding the data in a .mat file.")
@click.option("--labels-key", help="Variable holding the labels in a .mat file.")
@click.option("--remove-bands", "bands", help="'indian-pines' or comma separated 0-based band indices.")
@click.option("--out", type=click.Path(path_type=Path), required=True)
def convert(data_path, labels_path, shape, name, data_key, labels_key, bands, out, as_json):
    """Convert a data array and a label raster into a cube file."""
    cube = convert_cube(data_path, labels_path, parse_shape(shape), name, data_key, labels_key)
    cube = remove_bands(cube, parse_bands(bands))
    save_cube(cube, out)
    summary = cube_summary(cube, out)
    emit(as_json, summary, f"wrote {cube.height}x{cube.width}x{cube.bands} cube with {cube.num_classes} classes to {out}")


@command(cli)
@click.option("--size", default=48, show_default=True)
@click.option("--bands", default=16, show_default=True)
@click.option("--classes", default=4, show_default=True)
@click.option("--noise", default=0.1, show_default=True)
@click.option("--seed", default=0, show_default=True)
@click.option("--out", type=click.Path(path_type=Path), required=True)
def synth(size, bands, classes, noise, seed, out, as_json):
    """Generate a synthetic cube of Voronoi regions with smooth class spectra."""
    cube = synth_cube(size, bands, classes, noise, seed)
    save_cube(cube, out)
    emit(as_json, cube_summary(cube, out), f"wrote {cube.name} to {out}")


@command(cli)
@click.option("--cube", "cube_path", type=click.Path(exists=True, path_type=Path), required=True)
@click.option("--ratios", default="6:1:3", show_default=True, help="Train:val:test ratios.")
@click.option("--seed", default=0, show_default=True)
@click.option("--out", type=click.Path(path_type=Path), required=True)
def split(cube_path, ratios, seed, out, as_json):
    """Split the labeled pixels of a cube per class into train, validation and test sets."""
    cube = load_cube(cube_path)
    sample_split = stratified_split(cube, parse_ratios(ratios), seed)
    sample_split.save(out)
    counts = {part: len(getattr(sample_split, part)) for part in ("train", "val", "test")}
    emit(
        as_json,
        {"split": str(out), "ratios": ratios, "seed": seed, **counts},
        f"wrote {counts['train']}/{counts['val']}/{counts['test']} train/val/test pixels to {out}",
    )


@command(cli)
@click.option("--cube", "cube_path", type=click.Path(exists=True, path_type=Path), required=True)
@click.option("--split", "split_path", type=click.Path(exists=True, path_type=Path), required=True)
@click.option("--config", default="small", show_default=True, help="small, base, larger or a TOML/JSON file.")
@click.option("--train-config", type=click.Path(exists=True, path_type=Path), help="TOML/JSON training settings.")
@click.option("--patch", type=int, help="Patch size, overrides the configuration.")
@click.option("--groups", type=int, help="Group count of every stage, overrides the configuration.")
@click.option("--epochs", type=int)
@click.option("--lr", type=float)
@click.option("--batch-size", type=int)
@click.option("--seed", type=int)
@click.option("--runs", default=1, show_default=True, help="Independent runs with consecutive seeds.")
@click.option("--out", type=click.Path(path_type=Path), required=True, help="Run directory.")
def train(cube_path, split_path, config, train_config, patch, groups, epochs, lr, batch_size, seed, runs, out, as_json):
    """Train a network and keep the best model on the validation split."""
    cube = load_cube(cube_path)
    sample_split = SampleSplit.load(split_path)
    model_config = resolve_model_config(
        config,
        {"bands": cube.bands, "num_classes": cube.num_classes, "patch_size": patch, "groups": groups},
    )
    overrides = {"epochs": epochs, "lr": lr, "batch_size": batch_size, "seed": seed}
    settings = read_config_file(train_config) if train_config else {}
    settings.update({key: value for key, value in overrides.items() if value is not None})
    train_settings = validate_config(TrainConfig, settings, source="training configuration")
    logger.info("model configuration: %s", model_config.model_dump())
    progress = progress_enabled(as_json)

    if runs == 1:
        record = train_model(cube, sample_split, model_config, train_settings, out, progress).record
        metrics = record.metrics
        text = f"best epoch {record.best_epoch}, val OA {record.best_val_oa:.4f}"
        if metrics is not None:
            text += f", test OA {metrics.overall_accuracy:.4f} AA {metrics.average_accuracy:.4f} kappa {metrics.kappa:.4f}"
        emit(as_json, record, text)
        return

    summary = train_runs(cube, sample_split, model_config, train_settings, runs, out, progress)
    emit(
        as_json,
        summary,
        f"{runs} runs: OA {summary.overall_accuracy.mean:.4f} ± {summary.overall_accuracy.std:.4f}, "
        f"AA {summary.average_accuracy.mean:.4f} ± {summary.average_accuracy.std:.4f}, "
        f"kappa {summary.kappa.mean:.4f} ± {summary.kappa.std:.4f}",
    )


@command(cli, name="eval")
@click.option("--checkpoint", "checkpoint_path", type=click.Path(exists=True, path_type=Path), required=True)
@click.option("--cube", "cube_path", type=click.Path(exists=True, path_type=Path), required=True)
@click.option("--split", "split_path", type=click.Path(exists=True, path_type=Path), required=True)
@click.option("--part", type=click.Choice(["train", "val", "test"]), default="test", show_default=True)
@click.option("--compiled", is_flag=True, help="Run the compiled plan and require the uncompiled result.")
@click.option("--batch-size", default=256, show_default=True)
def evaluate_command(checkpoint_path, cube_path, split_path, part, compiled, batch_size, as_json):
    """Evaluate a checkpoint on a split."""
    checkpoint = load_checkpoint(checkpoint_path)
    cube = checkpoint_cube(cube_path, checkpoint.meta.train)
    coords = SampleSplit.load(split_path).coords(part)
    report = evaluate(checkpoint.build(), cube, coords, compiled=compiled, batch_size=batch_size)
    emit(
        as_json,
        report,
        f"{part}: {report.samples} samples, OA {report.overall_accuracy:.4f}, "
        f"AA {report.average_accuracy:.4f}, kappa {report.kappa:.4f}",
    )


@command(cli, name="compile")
@click.option("--checkpoint", "checkpoint_path", type=click.Path(exists=True, path_type=Path), required=True)
@click.option("--out", type=click.Path(path_type=Path), required=True)
def compile_command(checkpoint_path, out, as_json):
    """Freeze a checkpoint and write its compiled inference plan."""
    checkpoint = load_checkpoint(checkpoint_path)
    plan = compile_network(checkpoint.build().freeze())
    save_plan(out, plan)
    layers = plan.conv_layers()
    emit(
        as_json,
        {
            "plan": str(out),
            "layers": len(layers),
            "reordered_layers": sum(not layer.merged_index.is_identity for layer in layers),
            "source_hash": plan.metadata.get("source_hash"),
        },
        f"wrote a {len(layers)}-layer plan to {out}",
    )


@command(cli, name="bench")
@click.option("--plan", "plan_path", type=click.Path(exists=True, path_type=Path), required=True)
@click.option("--reps", default=30, show_default=True, help="Timed repetitions per input size.")
@click.option("--batch", "batches", type=int, multiple=True, default=(1, 8), show_default=True)
@click.option("--seed", default=0, show_default=True)
def bench_command(plan_path, reps, batches, seed, as_json):
    """Compare naive and compiled inference of a plan."""
    plan = load_plan(plan_path)
    model = plan.metadata.get("model")
    if model is None:
        raise ConfigurationError(f"{plan_path} does not record the input dims of its network")
    config = ModelConfig.model_validate(model)
    shapes = [(batch, plan.in_channels, *config.input_dims) for batch in batches]
    report = bench(plan, shapes, repetitions=reps, seed=seed)
    lines = [
        f"{tuple(row.input_shape)}: naive {row.naive_ms:.2f} ms ({row.naive_gathers} gathers), "
        f"compiled {row.compiled_ms:.2f} ms ({row.compiled_gathers} gathers), max diff {row.max_abs_diff:.2e}"
        for row in report.rows
    ]
    emit(as_json, report, "\n".join(lines))


@command(cli)
@click.option("--config", default="small", show_default=True, help="small, base, larger or a TOML/JSON file.")
@click.option("--bands", type=int, default=200, show_default=True)
@click.option("--patch", type=int, default=15, show_default=True)
@click.option("--classes", type=int, help="Class count, overrides the configuration.")
@click.option("--grouping", type=click.Choice(["balanced", "learned", "dense"]), default="balanced", show_default=True)
def flops(config, bands, patch, classes, grouping, as_json):
    """Count the parameters and multiply-adds of a network."""
    model_config = resolve_model_config(config, {"bands": bands, "patch_size": patch, "num_classes": classes})
    report = cost_report(build_model(model_config), grouping)
    payload = {
        "config": report.config,
        "bands": report.bands,
        "patch_size": report.patch_size,
        "params": report.params.without_selection,
        "params_with_selection": report.params.total,
        "inference_params": report.params.inference,
        "madds": report.madds.total,
        "grouping": grouping,
        "published": report.published,
        "layers": {
            "params": report.params.layers,
            "madds": report.madds.layers,
        },
    }
    text = f"{report.config}: {report.params.without_selection:,} params, {report.madds.total:,} multiply-adds"
    if report.published is not None:
        text += (
            f" (reported {report.published.params:,} params {report.published.params_delta_percent:+.1f}%, "
            f"{report.published.flops:,} flops {report.published.flops_delta_percent:+.1f}%)"
        )
    emit(as_json, payload, text)


@command(cli, name="map")
@click.option("--checkpoint", "checkpoint_path", type=click.Path(exists=True, path_type=Path), required=True)
@click.option("--cube", "cube_path", type=click.Path(exists=True, path_type=Path), required=True)
@click.option("--out", type=click.Path(path_type=Path), required=True, help="Output PPM image.")
@click.option("--all-pixels", is_flag=True, help="Also classify unlabeled pixels.")
def map_command(checkpoint_path, cube_path, out, all_pixels, as_json):
    """Render the classification map of a cube."""
    checkpoint = load_checkpoint(checkpoint_path)
    cube = checkpoint_cube(cube_path, checkpoint.meta.train)
    image = render_map(checkpoint.build(), cube, out, include_unlabeled=all_pixels)
    emit(
        as_json,
        {"map": str(out), "height": image.shape[0], "width": image.shape[1]},
        f"wrote {image.shape[0]}x{image.shape[1]} map to {out}",
    )


@command(cli)
@click.option("--runs", "root", type=click.Path(exists=True, file_okay=False, path_type=Path), required=True)
@click.option("--out", type=click.Path(file_okay=False, path_type=Path), help="Defaults to the runs directory.")
def report(root, out, as_json):
    """Aggregate run metrics into CSV and JSON tables."""
    rows = report_tables(root, out)
    lines = [
        f"{row.dataset} {row.ratios} patch {row.patch_size} {row.config}: "
        f"OA {row.oa:.4f} ± {row.oa_std:.4f} over {row.runs} runs"
        for row in rows
    ]
    emit(as_json, rows, "\n".join(lines) or "no runs found")


@command(cli)
@click.option(
    "--instances",
    default=CheckConfig.instances,
    show_default=True,
    help="Random instances of the gradient, continuity and multiply-add checks.",
)
@click.option("--layers", default=CheckConfig.layers, show_default=True, help="Random layers of the decomposition check.")
@click.option("--chains", default=CheckConfig.chains, show_default=True, help="Random layer chains to compile.")
@click.option("--inputs", default=CheckConfig.inputs, show_default=True, help="Random inputs per compiled network.")
@click.option("--seed", default=0, show_default=True)
def verify(instances, layers, chains, inputs, seed, as_json):
    """Run the numerical checks of the engine on random layers, networks and inputs."""
    conf = CheckConfig(seed=seed, instances=instances, layers=layers, chains=chains, inputs=inputs)
    results = check_engine(conf)
    payload = [
        {"title": result.title, "status": result.status.name, "reason": result.reason} for result in results
    ]
    lines = []
    for result in results:
        lines.append(f"{result.status.name} {result.title}")
        if result.reason:
            lines.append(f"   {result.reason}")
    emit(as_json, payload, "\n".join(lines))
    if any(result.status == Status.ERROR for result in results):
        raise click.exceptions.Exit(1)


def main() -> None:  # pragma: no cover
    cli()


if __name__ == "__main__":  # pragma: no cover
    main()
