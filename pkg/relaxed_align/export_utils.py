"""
Export utilities for relaxed-align
CSV and JSON readers/writers for distributions, datasets, latent dumps and run metrics
"""
import csv
import json
import logging
import math
from pathlib import Path
from typing import Dict, List, Sequence

import numpy as np

from relaxed_align.distributions import Dataset, DiscreteDistribution, make_discrete

logger = logging.getLogger(__name__)

SCHEMA_VERSION = 1


def header_line(kind: str) -> str:
    return f"# relaxed-align {kind} v{SCHEMA_VERSION}"


def _write_rows(path: Path, kind: str, columns: Sequence[str], rows) -> int:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    count = 0
    with open(path, 'w', newline='', encoding='utf-8') as csvfile:
        csvfile.write(header_line(kind) + "\n")
        writer = csv.writer(csvfile, lineterminator="\n")
        writer.writerow(columns)
        for row in rows:
            writer.writerow(row)
            count += 1
    logger.debug(f"Wrote {count} {kind} rows to {path}")
    return count


def write_distribution_csv(path: Path, dist: DiscreteDistribution) -> int:
    columns = [f"x{i + 1}" for i in range(dist.dim)] + ['mass']
    rows = ([*map(float, atom), float(m)] for atom, m in zip(dist.atoms, dist.mass))
    return _write_rows(path, "distribution", columns, rows)


def read_distribution_csv(path: Path) -> DiscreteDistribution:
    """Rows of point coordinates followed by a mass; '#' lines and a name header are skipped"""
    points: List[List[float]] = []
    masses: List[float] = []
    try:
        with open(path, 'r', encoding='utf-8') as csvfile:
            for line_no, row in enumerate(csv.reader(csvfile), start=1):
                if not row or row[0].lstrip().startswith('#'):
                    continue
                try:
                    values = [float(v) for v in row]
                except ValueError:
                    if not points:
                        continue  # column names
                    raise ValueError(f"{path}:{line_no}: non-numeric value in {row!r}") from None
                if len(values) < 2:
                    raise ValueError(f"{path}:{line_no}: need coordinates and a mass")
                if points and len(values) - 1 != len(points[0]):
                    raise ValueError(f"{path}:{line_no}: expected {len(points[0])} coordinates")
                points.append(values[:-1])
                masses.append(values[-1])
    except OSError as e:
        raise ValueError(f"cannot read {path}: {e}") from e
    if not points:
        raise ValueError(f"{path} holds no atoms")
    return make_discrete(np.array(points), masses)


def write_dataset_csv(path: Path, data: Dataset) -> int:
    d = data.x.shape[1]
    rows = ([*map(float, x), int(y), str(dom)] for x, y, dom in zip(data.x, data.labels, data.domains))
    return _write_rows(path, "dataset", [f"x{i + 1}" for i in range(d)] + ['label', 'domain'], rows)


def write_latent_csv(path: Path, latents: np.ndarray, labels: np.ndarray, domains: np.ndarray) -> int:
    d = latents.shape[1]
    rows = ([*map(float, z), int(y), str(dom)] for z, y, dom in zip(latents, labels, domains))
    return _write_rows(path, "latent", [f"x{i + 1}" for i in range(d)] + ['label', 'domain'], rows)


def write_metrics_csv(path: Path, rows: Sequence[Sequence]) -> int:
    return _write_rows(path, "metrics", ['step', 'source_loss', 'distance', 'critic_loss'], rows)


def _jsonable(value):
    if isinstance(value, dict):
        return {str(k): _jsonable(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_jsonable(v) for v in value]
    if isinstance(value, np.ndarray):
        return _jsonable(value.tolist())
    if isinstance(value, (np.integer,)):
        return int(value)
    if isinstance(value, (float, np.floating)):
        return float(value) if math.isfinite(value) else None
    return value


def write_json(path: Path, data: Dict):
    """Sorted keys, NaN/Inf stored as null"""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, 'w', encoding='utf-8') as f:
        json.dump(_jsonable(data), f, indent=2, sort_keys=True)
        f.write("\n")
