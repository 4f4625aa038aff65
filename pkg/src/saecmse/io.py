"""CSV/JSON input and output for the command-line interface.

Input schema (one header row, UTF-8): ``area_id,n,y,x1,...,xp``.  For the
discrete families a ``z`` column (counts) may replace ``y``, in which case
y = z/n; for the gaussian family a ``d`` column (sampling variance D_i)
may replace ``n``, in which case n = 1/d.  Covariate columns must be named
x1..xp contiguously; intercept-only data carries a single constant x1.

Every command writes a manifest JSON next to its output file recording the
resolved configuration, seed, package versions, input digests and timings.
"""

from __future__ import annotations

import csv
import hashlib
import json
import platform
from pathlib import Path

import numpy as np

from .families import DomainError, FamilyKind
from .model import AreaObservation, Dataset

__all__ = ["SchemaError", "load_dataset_csv", "write_csv", "write_json", "write_manifest"]


class SchemaError(ValueError):
    """The input file does not match the documented schema."""


def _parse_float(value: str, column: str, row: int) -> float:
    try:
        return float(value)
    except (TypeError, ValueError):
        raise SchemaError(
            f"row {row}: column {column!r} has non-numeric value {value!r}"
        ) from None


def load_dataset_csv(path: str | Path, family: FamilyKind) -> Dataset:
    """Read an area-level CSV into a Dataset, with row-numbered diagnostics."""
    path = Path(path)
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None:
            raise SchemaError("empty file: missing header row")
        fields = [f.strip() for f in reader.fieldnames]

        if "area_id" not in fields:
            raise SchemaError("missing required column 'area_id'")
        has_n, has_d = "n" in fields, "d" in fields
        if not (has_n or has_d):
            raise SchemaError("missing required column 'n' (or 'd' for gaussian data)")
        if has_d and not has_n and family is not FamilyKind.GAUSSIAN:
            raise SchemaError("column 'd' may replace 'n' only for the gaussian family")
        has_y, has_z = "y" in fields, "z" in fields
        if not (has_y or has_z):
            raise SchemaError("missing required column 'y' (or 'z' for count data)")
        if has_z and not has_y and family is FamilyKind.GAUSSIAN:
            raise SchemaError("column 'z' may replace 'y' only for the discrete families")

        x_cols = []
        k = 1
        while f"x{k}" in fields:
            x_cols.append(f"x{k}")
            k += 1
        if not x_cols:
            raise SchemaError(
                "missing covariate columns x1..xp (intercept-only data needs a "
                "constant x1 column)"
            )
        stray = [
            f for f in fields
            if f.startswith("x") and f[1:].isdigit() and f not in x_cols
        ]
        if stray:
            raise SchemaError(f"covariate columns must be contiguous x1..xp; found {stray}")

        areas = []
        for i, rec in enumerate(reader, start=2):  # header is row 1
            area_id = (rec.get("area_id") or "").strip()
            if not area_id:
                raise SchemaError(f"row {i}: empty area_id")
            if has_n and rec.get("n") not in (None, ""):
                n = _parse_float(rec["n"], "n", i)
            else:
                d = _parse_float(rec["d"], "d", i)
                if d <= 0:
                    raise SchemaError(f"row {i}: column 'd' must be > 0, got {d}")
                n = 1.0 / d
            if has_y and rec.get("y") not in (None, ""):
                y = _parse_float(rec["y"], "y", i)
            else:
                if n <= 0:
                    raise SchemaError(f"row {i}: column 'n' must be > 0, got {n}")
                y = _parse_float(rec["z"], "z", i) / n
            x = [_parse_float(rec[c], c, i) for c in x_cols]
            try:
                areas.append(AreaObservation(area_id, y, n, np.array(x)))
            except DomainError as exc:
                raise SchemaError(f"row {i}: {exc}") from exc
        if not areas:
            raise SchemaError("no data rows")
    try:
        return Dataset(areas, family)
    except (DomainError, ValueError) as exc:
        raise SchemaError(str(exc)) from exc


# ------------------------------------------------------------------ #
# Output
# ------------------------------------------------------------------ #


def fmt(value) -> str:
    """Deterministic scalar formatting for CSV cells."""
    if isinstance(value, float):
        return format(value, ".12g")
    return str(value)


def write_csv(path: str | Path, header: list[str], rows: list[list]) -> None:
    path = Path(path)
    with path.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        for row in rows:
            writer.writerow([fmt(v) for v in row])


def _json_default(obj):
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.floating,)):
        return float(obj)
    if isinstance(obj, (np.bool_,)):
        return bool(obj)
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    raise TypeError(f"not JSON serializable: {type(obj).__name__}")


def write_json(path: str | Path, payload: dict) -> None:
    Path(path).write_text(
        json.dumps(payload, indent=2, sort_keys=True, default=_json_default) + "\n",
        encoding="utf-8",
    )


def _sha256(path: Path) -> str:
    h = hashlib.sha256()
    h.update(path.read_bytes())
    return h.hexdigest()


def write_manifest(
    out_path: str | Path,
    command: str,
    config: dict,
    seed: int | None,
    input_paths: list[str | Path],
    wall_seconds: float,
) -> None:
    """Sidecar manifest <out>.manifest.json; timings are informational only
    (the primary output, not the manifest, is under the byte-identical
    determinism contract)."""
    out_path = Path(out_path)
    manifest = {
        "command": command,
        "config": config,
        "seed": seed,
        "inputs": {str(p): _sha256(Path(p)) for p in input_paths},
        "output": out_path.name,
        "versions": {
            "python": platform.python_version(),
            "numpy": np.__version__,
            "scipy": __import__("scipy").__version__,
            "saecmse": __import__("saecmse").__version__,
        },
        "timings": {"wall_seconds": round(wall_seconds, 3)},
    }
    write_json(out_path.with_name(out_path.name + ".manifest.json"), manifest)
