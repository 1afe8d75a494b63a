"""Classification maps, experiment tables and cost reports."""

import csv
import logging
from pathlib import Path

import numpy as np
from pydantic import BaseModel
from pydantic import TypeAdapter
from pydantic import ValidationError

from .densenet import PUBLISHED_COSTS
from .densenet import Grouping
from .densenet import LGCNet
from .densenet import MaddsReport
from .densenet import ParamReport
from .densenet import count_madds
from .densenet import count_params
from .hsi import HsiCube
from .hsi import PatchSampler
from .training import METRICS_FILE
from .training import RunRecord
from .training import check_compatible
from .training import predict
from .utils import ConfigurationError

logger = logging.getLogger(__name__)

PALETTE = np.array(
    [
        (255, 0, 0),
        (0, 255, 0),
        (0, 0, 255),
        (255, 255, 0),
        (0, 255, 255),
        (255, 0, 255),
        (192, 192, 192),
        (128, 128, 128),
        (128, 0, 0),
        (128, 128, 0),
        (0, 128, 0),
        (128, 0, 128),
        (0, 128, 128),
        (0, 0, 128),
        (255, 165, 0),
        (255, 215, 180),
    ],
    dtype=np.uint8,
)
"""Colors of classes 1..16; further classes cycle through it with a fixed shift."""


def class_colors(num_classes: int) -> np.ndarray:
    """RGB color of every class id; row 0 (unlabeled) is black."""
    colors = np.zeros((num_classes + 1, 3), dtype=np.uint8)
    for k in range(1, num_classes + 1):
        base = PALETTE[(k - 1) % len(PALETTE)].astype(np.int64)
        shift = 37 * ((k - 1) // len(PALETTE))
        colors[k] = ((base + shift) % 256).astype(np.uint8)
    return colors


def write_ppm(path: str | Path, rgb: np.ndarray) -> None:
    """Binary portable pixmap (P6) of an (height, width, 3) uint8 image."""
    rgb = np.ascontiguousarray(rgb, dtype=np.uint8)
    if rgb.ndim != 3 or rgb.shape[2] != 3:
        raise ConfigurationError(f"a pixmap needs an (height, width, 3) image, got {rgb.shape}")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(b"P6\n%d %d\n255\n" % (rgb.shape[1], rgb.shape[0]) + rgb.tobytes())


def render_map(
    model: LGCNet,
    cube: HsiCube,
    path: str | Path,
    include_unlabeled: bool = False,
    batch_size: int = 256,
) -> np.ndarray:
    """Render the predicted class of every labeled pixel; unlabeled pixels stay black unless ``include_unlabeled``."""
    check_compatible(model.config, cube)
    if include_unlabeled:
        coords = np.argwhere(np.ones((cube.height, cube.width), dtype=bool))
    else:
        coords = cube.labeled_coords()
    classes = np.zeros((cube.height, cube.width), dtype=np.int64)
    if len(coords):
        predicted = predict(model, PatchSampler(cube, model.config.patch_size), coords, batch_size)
        classes[coords[:, 0], coords[:, 1]] = predicted + 1
    rgb = class_colors(model.config.num_classes)[classes]
    write_ppm(path, rgb)
    logger.info("wrote %dx%d classification map to %s", cube.height, cube.width, path)
    return rgb


class ReportRow(BaseModel):
    dataset: str
    ratios: str
    patch_size: int
    config: str
    runs: int
    params: int
    oa: float
    oa_std: float
    aa: float
    aa_std: float
    kappa: float
    kappa_std: float


def _ratio_key(ratios: str) -> tuple[int, ...]:
    return tuple(int(part) for part in ratios.split(":"))


def collect_runs(root: str | Path) -> list[RunRecord]:
    records = []
    for path in sorted(Path(root).rglob(METRICS_FILE)):
        try:
            records.append(RunRecord.model_validate_json(path.read_text()))
        except ValidationError:
            logger.warning("skipping %s, it is not a run metrics file", path)
    return records


def report_tables(root: str | Path, out: str | Path | None = None) -> list[ReportRow]:
    """Aggregate every ``metrics.json`` under ``root`` into rows keyed by dataset, ratios, patch size and config.

    Writes ``report.csv`` and ``report.json`` into ``out`` (default ``root``).
    """
    groups: dict[tuple[str, str, int, str], list[RunRecord]] = {}
    for record in collect_runs(root):
        if record.metrics is None:
            continue
        groups.setdefault((record.dataset, record.ratios, record.patch_size, record.config), []).append(record)

    rows = []
    for (dataset, ratios, patch, config), records in sorted(
        groups.items(), key=lambda item: (item[0][0], _ratio_key(item[0][1]), item[0][2], item[0][3])
    ):
        oa = [r.metrics.overall_accuracy for r in records if r.metrics]
        aa = [r.metrics.average_accuracy for r in records if r.metrics]
        kappa = [r.metrics.kappa for r in records if r.metrics]
        rows.append(
            ReportRow(
                dataset=dataset,
                ratios=ratios,
                patch_size=patch,
                config=config,
                runs=len(records),
                params=records[0].params,
                oa=float(np.mean(oa)),
                oa_std=float(np.std(oa)),
                aa=float(np.mean(aa)),
                aa_std=float(np.std(aa)),
                kappa=float(np.mean(kappa)),
                kappa_std=float(np.std(kappa)),
            )
        )

    out = Path(out or root)
    out.mkdir(parents=True, exist_ok=True)
    fields = list(ReportRow.model_fields)
    with (out / "report.csv").open("w", newline="") as fd:
        writer = csv.DictWriter(fd, fieldnames=fields)
        writer.writeheader()
        for row in rows:
            writer.writerow(row.model_dump())
    (out / "report.json").write_bytes(TypeAdapter(list[ReportRow]).dump_json(rows, indent=2))
    logger.info("wrote %d report rows to %s", len(rows), out)
    return rows


class PublishedCost(BaseModel):
    params: int
    flops: int
    params_delta_percent: float
    flops_delta_percent: float


class CostReport(BaseModel):
    config: str
    bands: int
    patch_size: int
    params: ParamReport
    madds: MaddsReport
    published: PublishedCost | None = None
    """Reported costs of the same size, present for the predefined sizes on 200 bands and 15x15 patches."""


def _delta(value: int, reference: int) -> float:
    return 100.0 * (value - reference) / reference


def cost_report(model: LGCNet, grouping: Grouping = "balanced") -> CostReport:
    config = model.config
    params = count_params(model)
    madds = count_madds(model, grouping=grouping)
    published = None
    if config.name in PUBLISHED_COSTS and config.bands == 200 and config.patch_size == 15:
        ref_params, ref_flops = PUBLISHED_COSTS[config.name]
        published = PublishedCost(
            params=ref_params,
            flops=ref_flops,
            params_delta_percent=_delta(params.without_selection, ref_params),
            flops_delta_percent=_delta(madds.total, ref_flops),
        )
    return CostReport(
        config=config.name,
        bands=config.bands,
        patch_size=config.patch_size,
        params=params,
        madds=madds,
        published=published,
    )
