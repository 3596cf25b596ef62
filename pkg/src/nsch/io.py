"""Field snapshots, diagnostics CSV and checkpoints.

Snapshot layout (one file per time level)::

    NSCH-FIELD v1
    nx ny dx dy time bc
    field <name> <rows> <cols> <text|binary>
    <values, row-major>
    field ...

Text values are written one row per line with ``%.17g``.  Binary values are
``rows*cols`` IEEE-754 float64 little-endian numbers followed by a newline.
"""
from __future__ import annotations

import csv
import os
from pathlib import Path

import numpy as np

from .grid import Grid

MAGIC = "NSCH-FIELD v1"
DIAG_COLUMNS = ("t", "E_total", "E_kin", "E_int", "E_bulk", "D_visc", "D_mix", "mass", "cont_res", "energy_res")


class SnapshotError(IOError):
    pass


def write_snapshot(path, grid: Grid, time, fields: dict, binary=False):
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(f"{MAGIC}\n".encode())
        fh.write(f"{grid.nx} {grid.ny} {grid.dx!r} {grid.dy!r} {float(time)!r} {grid.bc}\n".encode())
        for name, arr in fields.items():
            arr = np.atleast_2d(np.asarray(arr, dtype=float))
            rows, cols = arr.shape
            kind = "binary" if binary else "text"
            fh.write(f"field {name} {rows} {cols} {kind}\n".encode())
            if binary:
                fh.write(arr.astype("<f8").tobytes(order="C"))
                fh.write(b"\n")
            else:
                for row in arr:
                    fh.write((" ".join("%.17g" % x for x in row) + "\n").encode())
    os.replace(tmp, path)


def read_snapshot(path):
    """Return (header dict, {name: array})."""
    with open(path, "rb") as fh:
        data = fh.read()
    pos = 0

    def line():
        nonlocal pos
        end = data.find(b"\n", pos)
        if end < 0:
            raise SnapshotError(f"{path}: truncated snapshot")
        out = data[pos:end].decode()
        pos = end + 1
        return out

    if line().strip() != MAGIC:
        raise SnapshotError(f"{path}: not an {MAGIC} file")
    parts = line().split()
    if len(parts) != 6:
        raise SnapshotError(f"{path}: malformed grid header")
    header = dict(nx=int(parts[0]), ny=int(parts[1]), dx=float(parts[2]), dy=float(parts[3]),
                  time=float(parts[4]), bc=parts[5])
    fields = {}
    while pos < len(data):
        spec = line().split()
        if not spec:
            continue
        if len(spec) != 5 or spec[0] != "field":
            raise SnapshotError(f"{path}: malformed field header {spec}")
        name, rows, cols, kind = spec[1], int(spec[2]), int(spec[3]), spec[4]
        if kind == "binary":
            nbytes = 8 * rows * cols
            arr = np.frombuffer(data[pos:pos + nbytes], dtype="<f8").reshape(rows, cols).copy()
            pos += nbytes + 1
        elif kind == "text":
            arr = np.array([[float(x) for x in line().split()] for _ in range(rows)])
            if arr.shape != (rows, cols):
                raise SnapshotError(f"{path}: field {name} has wrong size")
        else:
            raise SnapshotError(f"{path}: unknown encoding {kind!r}")
        fields[name] = arr
    return header, fields


def grid_from_header(header) -> Grid:
    return Grid(header["nx"], header["ny"], header["nx"] * header["dx"], header["ny"] * header["dy"], header["bc"])


class DiagnosticsWriter:
    """Append-only CSV with the fixed diagnostics columns."""

    def __init__(self, path, append=False):
        self.path = Path(path)
        new = not (append and self.path.exists())
        self._fh = open(self.path, "a" if not new else "w", newline="")
        self._w = csv.writer(self._fh, lineterminator="\n")
        if new:
            self._w.writerow(DIAG_COLUMNS)

    def write(self, rec):
        self._w.writerow(["%.17g" % getattr(rec, c) for c in DIAG_COLUMNS])
        self._fh.flush()

    def close(self):
        self._fh.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def truncate_diagnostics(path, upto_time):
    """Drop rows with t > upto_time (used when resuming from a checkpoint)."""
    path = Path(path)
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    keep = [rows[0]] + [r for r in rows[1:] if float(r[0]) <= upto_time * (1 + 1e-12) + 1e-300]
    with open(path, "w", newline="") as fh:
        csv.writer(fh, lineterminator="\n").writerows(keep)


def read_diagnostics(path):
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if tuple(rows[0]) != DIAG_COLUMNS:
        raise SnapshotError(f"{path}: unexpected diagnostics header")
    return {c: np.array([float(r[i]) for r in rows[1:]]) for i, c in enumerate(DIAG_COLUMNS)}


def save_checkpoint(path, step, state, config_text):
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp.npz")
    np.savez(tmp, step=step, t=state.t, v=state.v, phi=state.phi, mu=state.mu, pi=state.pi,
             config=np.array(config_text))
    os.replace(tmp, path)


def load_checkpoint(path):
    with np.load(path, allow_pickle=False) as z:
        return {k: z[k] for k in z.files}
