"""CSV tables and the JSON run manifest."""
from __future__ import annotations

import csv
import hashlib
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Sequence

import numpy as np

from .. import __version__
from ..flatconfig import format_value
from .config import ExperimentConfig

MANIFEST = "manifest.json"


@dataclass
class Table:
    columns: Sequence[str]
    rows: list[dict] = field(default_factory=list)


def _cell(v: Any) -> str:
    if isinstance(v, (bool, np.bool_)):
        return "true" if v else "false"
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def write_csv(path: str | Path, table: Table) -> None:
    """Header row plus one line per row; floats at full precision, LF endings."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(table.columns)
        for row in table.rows:
            w.writerow([_cell(row.get(c, "")) for c in table.columns])


def read_csv(path: str | Path) -> list[dict[str, str]]:
    with open(path, newline="", encoding="utf-8") as fh:
        return list(csv.DictReader(fh))


def sha256(path: str | Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _jsonable(v: Any) -> Any:
    if isinstance(v, dict):
        return {str(k): _jsonable(x) for k, x in v.items()}
    if isinstance(v, (list, tuple)):
        return [_jsonable(x) for x in v]
    if isinstance(v, (bool, np.bool_)):
        return bool(v)
    if isinstance(v, (int, np.integer)):
        return int(v)
    if isinstance(v, (float, np.floating)):
        v = float(v)
        return v if math.isfinite(v) else None
    return v


def emit_report(out_dir: str | Path, experiment: str, cfg: ExperimentConfig, tables: dict[str, Table],
                wall_time: float, results: dict | None = None, extra_files: Sequence[str] = ()) -> Path:
    """Write each table to ``<name>.csv`` and a manifest with the full config,
    seed, package version, wall time and a SHA-256 of every output file."""
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create output directory {out}: {exc}") from exc
    files = {}
    for name, table in tables.items():
        path = out / f"{name}.csv"
        write_csv(path, table)
        files[path.name] = sha256(path)
    for name in extra_files:
        files[name] = sha256(out / name)
    manifest = {
        "experiment": experiment,
        "version": __version__,
        "seed": cfg.seed,
        "config": {k: format_value(v) for k, v in cfg.to_flat().items() if v is not None},
        "wall_time_s": wall_time,
        "files": dict(sorted(files.items())),
        "results": _jsonable(results or {}),
    }
    path = out / MANIFEST
    path.write_text(json.dumps(manifest, indent=2, sort_keys=False) + "\n", encoding="utf-8")
    return path
