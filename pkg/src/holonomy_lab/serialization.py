"""Binary field files and CSV export.

A field file is one line of minified JSON (the header) followed by the raw
little-endian float64 values, point-major: for every grid point the
coefficients of all components are contiguous, in header order.
"""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from math import comb
from pathlib import Path
from typing import Union

import numpy as np

from .fields import TorusGrid

FORMAT = "holonomy-lab-field"
VERSION = 1


class FieldFormatError(ValueError):
    """A field file is malformed or does not match what the caller expects."""


@dataclass
class FieldBundle:
    """Named component arrays on a common grid.

    ``components`` maps a name to ``(degree, values)``; ``values`` has shape
    grid + extra + (C(k, degree),) where ``extra`` is e.g. (3,) for a coframe.
    """

    kind: str
    grid: TorusGrid
    components: dict
    meta: dict = field(default_factory=dict)

    def header(self) -> dict:
        comps = []
        for name, (deg, vals) in self.components.items():
            extra = list(vals.shape[self.grid.dim:-1])
            comps.append({"name": name, "degree": int(deg), "extra": extra,
                          "size": int(np.prod(extra, dtype=int)) * comb(self.grid.dim, deg)})
        return {
            "format": FORMAT, "version": VERSION, "kind": self.kind,
            "dim": self.grid.dim, "resolution": list(self.grid.resolution),
            "period": list(self.grid.period), "stencil": self.grid.stencil,
            "layout": "point-major", "dtype": "<f8", "components": comps, "meta": self.meta,
        }


def write_bundle(path: Union[str, Path], bundle: FieldBundle) -> None:
    grid = bundle.grid
    parts = []
    for name, (deg, vals) in bundle.components.items():
        vals = np.asarray(vals, dtype=float)
        if vals.shape[:grid.dim] != grid.shape or vals.shape[-1] != comb(grid.dim, deg):
            raise FieldFormatError(f"component {name!r} does not match the grid and degree")
        parts.append(vals.reshape(grid.shape + (-1,)))
    data = np.concatenate(parts, axis=-1).astype("<f8")
    head = json.dumps(bundle.header(), separators=(",", ":"), sort_keys=True)
    with open(path, "wb") as fh:
        fh.write(head.encode("utf-8") + b"\n")
        fh.write(data.tobytes(order="C"))


def read_bundle(path: Union[str, Path], kind: str = None) -> FieldBundle:
    with open(path, "rb") as fh:
        line = fh.readline()
        raw = fh.read()
    try:
        head = json.loads(line.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FieldFormatError(f"{path}: header is not JSON") from exc
    if head.get("format") != FORMAT or head.get("version") != VERSION:
        raise FieldFormatError(f"{path}: not a {FORMAT} v{VERSION} file")
    if head.get("layout") != "point-major" or head.get("dtype") != "<f8":
        raise FieldFormatError(f"{path}: unsupported layout or dtype")
    if kind is not None and head.get("kind") != kind:
        raise FieldFormatError(f"{path}: holds {head.get('kind')!r}, expected {kind!r}")
    try:
        grid = TorusGrid(tuple(head["resolution"]), tuple(head["period"]), head["stencil"])
        comps = head["components"]
        width = sum(int(c["size"]) for c in comps)
    except (KeyError, TypeError, ValueError) as exc:
        raise FieldFormatError(f"{path}: bad header ({exc})") from exc
    if len(raw) != grid.npoints * width * 8:
        raise FieldFormatError(f"{path}: payload has {len(raw)} bytes, expected {grid.npoints * width * 8}")
    data = np.frombuffer(raw, dtype="<f8").reshape(grid.shape + (width,)).astype(float)
    out, start = {}, 0
    for c in comps:
        size = int(c["size"])
        shape = grid.shape + tuple(c["extra"]) + (comb(grid.dim, int(c["degree"])),)
        out[c["name"]] = (int(c["degree"]), data[..., start:start + size].reshape(shape))
        start += size
    return FieldBundle(head["kind"], grid, out, head.get("meta", {}))


def write_scalar_csv(path: Union[str, Path], grid: TorusGrid, values: np.ndarray, name: str = "value") -> None:
    """One row per grid point: integer indices, coordinates and the value."""
    values = np.asarray(values, dtype=float)
    if values.shape != grid.shape:
        raise FieldFormatError("scalar field does not match the grid")
    idx = np.indices(grid.shape).reshape(grid.dim, -1).T
    h = np.array(grid.spacing)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow([f"i{a + 1}" for a in range(grid.dim)] + [f"x{a + 1}" for a in range(grid.dim)] + [name])
        for row, v in zip(idx, values.ravel()):
            w.writerow(list(row) + [repr(float(x)) for x in row * h] + [repr(float(v))])
