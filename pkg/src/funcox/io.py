"""Flat-file dataset format: one CSV of subjects plus a JSON grid sidecar.

Columns are ``id, L, R, x1..xp, z_0..z_{G-1}``; an empty R cell encodes a
right-censored subject.  The functional grid is declared once in a sidecar
JSON (``{"grid": [s_0, ..., s_{G-1}]}``) and is affinely rescaled to [0, 1]
at ingestion.  Censoring endpoints are canonicalized to 12 significant
digits at first ingestion so endpoint ties are deterministic; emitted files
round-trip exactly.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .data import Observation
from .kernel import FunctionalCurve

__all__ = ["Dataset", "SchemaError", "load_dataset", "save_dataset", "sidecar_path"]


class SchemaError(ValueError):
    """Input file violates the dataset schema; message carries line numbers."""


@dataclass
class Dataset:
    """Subjects plus their shared (rescaled) functional grid."""

    subjects: list
    grid: np.ndarray
    x_names: list = field(default_factory=list)

    @property
    def n(self) -> int:
        return len(self.subjects)

    @property
    def p(self) -> int:
        return self.subjects[0].x.size if self.subjects else 0

    def curves(self) -> list:
        return [o.z for o in self.subjects]


def round_sig(x: float, digits: int = 12) -> float:
    """Round to a fixed number of significant digits."""
    return float(f"{x:.{digits}g}")


def sidecar_path(csv_path) -> Path:
    return Path(csv_path).with_suffix(".json")


def _fail(line: int | None, msg: str):
    where = f"line {line}: " if line is not None else ""
    raise SchemaError(where + msg)


def _parse_float(text: str, line: int, what: str) -> float:
    try:
        value = float(text)
    except ValueError:
        _fail(line, f"{what} is not a number: {text!r}")
    if not math.isfinite(value):
        _fail(line, f"{what} must be finite, got {text!r}")
    return value


def load_dataset(csv_path) -> Dataset:
    """Read and validate a dataset, canonicalizing endpoints and the grid."""
    csv_path = Path(csv_path)
    grid_path = sidecar_path(csv_path)
    try:
        with open(grid_path) as fh:
            meta = json.load(fh)
    except json.JSONDecodeError as exc:
        raise SchemaError(f"sidecar {grid_path.name}: invalid JSON ({exc})") from exc
    raw_grid = np.asarray(meta.get("grid", []), dtype=float)
    if raw_grid.ndim != 1 or raw_grid.size < 2:
        raise SchemaError(f"sidecar {grid_path.name}: grid needs >= 2 points")
    if np.any(np.diff(raw_grid) <= 0.0):
        raise SchemaError(f"sidecar {grid_path.name}: grid must strictly increase")
    span = raw_grid[-1] - raw_grid[0]
    grid = (raw_grid - raw_grid[0]) / span
    G = grid.size

    subjects = []
    seen_ids: set[str] = set()
    with open(csv_path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            _fail(1, "empty file")
        header = [h.strip() for h in header]
        if header[:3] != ["id", "L", "R"]:
            _fail(1, "header must start with id,L,R")
        x_names = [h for h in header[3:] if h.startswith("x")]
        z_names = header[3 + len(x_names) :]
        if any(not z.startswith("z_") for z in z_names):
            _fail(1, "covariate columns x* must precede curve columns z_*")
        if len(z_names) != G:
            _fail(1, f"found {len(z_names)} z columns but the grid has {G} points")
        p = len(x_names)

        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != 3 + p + G:
                _fail(lineno, f"expected {3 + p + G} fields, found {len(row)}")
            ident = row[0].strip()
            if not ident:
                _fail(lineno, "empty subject id")
            if ident in seen_ids:
                _fail(lineno, f"duplicate subject id {ident!r}")
            seen_ids.add(ident)
            L = round_sig(_parse_float(row[1], lineno, "L"))
            r_text = row[2].strip()
            R = math.inf if r_text == "" else round_sig(_parse_float(row[2], lineno, "R"))
            if L < 0.0:
                _fail(lineno, f"subject {ident!r}: L must be nonnegative")
            if not L < R:
                _fail(lineno, f"subject {ident!r}: need L < R")
            if L == 0.0 and math.isinf(R):
                _fail(
                    lineno,
                    f"subject {ident!r} has L = 0 and no finite R: "
                    "no censoring information",
                )
            x = np.array(
                [_parse_float(row[3 + j], lineno, x_names[j]) for j in range(p)]
            )
            z = np.array(
                [_parse_float(row[3 + p + g], lineno, z_names[g]) for g in range(G)]
            )
            subjects.append(
                Observation(
                    id=ident, L=L, R=R, x=x, z=FunctionalCurve(grid=grid, values=z)
                )
            )
    if not subjects:
        raise SchemaError("dataset has no subjects")
    return Dataset(subjects=subjects, grid=grid, x_names=x_names)


def save_dataset(dataset: Dataset, csv_path) -> None:
    """Write the CSV plus grid sidecar; floats use round-trip repr."""
    csv_path = Path(csv_path)
    G = dataset.grid.size
    p = dataset.p
    x_names = dataset.x_names or [f"x{j + 1}" for j in range(p)]
    with open(csv_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["id", "L", "R", *x_names, *[f"z_{g}" for g in range(G)]])
        for o in dataset.subjects:
            r_field = "" if math.isinf(o.R) else repr(o.R)
            writer.writerow(
                [o.id, repr(o.L), r_field]
                + [repr(float(v)) for v in o.x]
                + [repr(float(v)) for v in o.z.values]
            )
    with open(sidecar_path(csv_path), "w") as fh:
        json.dump({"grid": [float(g) for g in dataset.grid]}, fh)
        fh.write("\n")


def write_json(path, payload: dict) -> None:
    """Deterministic JSON: sorted keys, two-space indent, repr floats."""
    with open(path, "w") as fh:
        json.dump(payload, fh, sort_keys=True, indent=2)
        fh.write("\n")


def write_curve_csv(path, columns: dict) -> None:
    """Write named columns of equal length as CSV with repr floats."""
    names = list(columns)
    arrays = [np.asarray(columns[k]) for k in names]
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(names)
        for row in zip(*arrays):
            writer.writerow([repr(float(v)) for v in row])
