"""Plain-text formats for fields (FLD1), boundary traces (TRC1) and matrices (MAT1)."""
from __future__ import annotations

import csv
import os
from typing import Optional, Union

import numpy as np

from .wave import BoundaryTrace

__all__ = [
    "FormatError",
    "write_field",
    "read_field",
    "write_trace",
    "read_trace",
    "write_matrix",
    "read_matrix",
    "field_to_csv",
    "csv_to_field",
    "trace_to_csv",
]

PathLike = Union[str, os.PathLike]


class FormatError(ValueError):
    """Malformed input file."""


def _fmt(v: float) -> str:
    return "%.17g" % v


def write_field(path: PathLike, values: np.ndarray, spacing) -> None:
    """``FLD1 <n> <n1> [n2 [n3]] <h1> [h2 [h3]]`` then one value per line, row-major."""
    values = np.asarray(values, dtype=float)
    n = values.ndim
    head = ["FLD1", str(n)] + [str(s) for s in values.shape] + [_fmt(h) for h in spacing]
    with open(path, "w") as fh:
        fh.write(" ".join(head) + "\n")
        fh.write("\n".join(_fmt(v) for v in values.ravel()))
        fh.write("\n")


def read_field(path: PathLike) -> tuple[np.ndarray, tuple]:
    """Return ``(values, spacing)``."""
    with open(path) as fh:
        head = fh.readline().split()
        if not head or head[0] != "FLD1":
            raise FormatError(f"{path}: missing FLD1 header")
        try:
            n = int(head[1])
            shape = tuple(int(s) for s in head[2 : 2 + n])
            spacing = tuple(float(h) for h in head[2 + n : 2 + 2 * n])
        except (IndexError, ValueError) as exc:
            raise FormatError(f"{path}: bad FLD1 header") from exc
        if len(shape) != n or len(spacing) != n:
            raise FormatError(f"{path}: bad FLD1 header")
        data = np.array([float(t) for t in fh.read().split()])
    if data.size != int(np.prod(shape)):
        raise FormatError(f"{path}: expected {int(np.prod(shape))} values, found {data.size}")
    return data.reshape(shape), spacing


def write_trace(path: PathLike, trace: BoundaryTrace) -> None:
    """``TRC1 <Nt> <dt> <nGamma> [0.5]`` then one row per time level.

    The optional fifth token marks staggered traces, which carry ``Nt``
    rows instead of ``Nt + 1``.
    """
    head = ["TRC1", str(trace.nt), _fmt(trace.dt), str(trace.n_gamma)]
    if trace.offset != 0.0:
        head.append(_fmt(trace.offset))
    with open(path, "w") as fh:
        fh.write(" ".join(head) + "\n")
        for row in trace.values:
            fh.write(" ".join(_fmt(v) for v in row) + "\n")


def read_trace(path: PathLike) -> BoundaryTrace:
    with open(path) as fh:
        head = fh.readline().split()
        if not head or head[0] != "TRC1" or len(head) not in (4, 5):
            raise FormatError(f"{path}: missing or malformed TRC1 header")
        nt, dt, ng = int(head[1]), float(head[2]), int(head[3])
        offset = float(head[4]) if len(head) == 5 else 0.0
        rows = nt + 1 if offset == 0.0 else nt
        data = np.array([float(t) for t in fh.read().split()])
    if data.size != rows * ng:
        raise FormatError(f"{path}: expected {rows} rows of {ng} values")
    return BoundaryTrace(dt, data.reshape(rows, ng), offset)


def write_matrix(path: PathLike, matrix: np.ndarray, gram: Optional[np.ndarray] = None) -> None:
    """``MAT1 <rows> <cols>`` then rows; a Gram matrix goes to ``<path>.gram``."""
    matrix = np.atleast_2d(np.asarray(matrix, dtype=float))
    with open(path, "w") as fh:
        fh.write(f"MAT1 {matrix.shape[0]} {matrix.shape[1]}\n")
        for row in matrix:
            fh.write(" ".join(_fmt(v) for v in row) + "\n")
    if gram is not None:
        g = np.asarray(gram, dtype=float)
        write_matrix(str(path) + ".gram", np.diag(g) if g.ndim == 1 else g)


def read_matrix(path: PathLike) -> np.ndarray:
    with open(path) as fh:
        head = fh.readline().split()
        if len(head) != 3 or head[0] != "MAT1":
            raise FormatError(f"{path}: missing MAT1 header")
        r, c = int(head[1]), int(head[2])
        data = np.array([float(t) for t in fh.read().split()])
    if data.size != r * c:
        raise FormatError(f"{path}: expected {r * c} values")
    return data.reshape(r, c)


def field_to_csv(path: PathLike, values: np.ndarray, spacing) -> int:
    """Rows ``x, y[, z], value`` in row-major node order; returns the row count."""
    values = np.asarray(values, dtype=float)
    names = ["x", "y", "z"][: values.ndim]
    axes = [np.arange(s) * h for s, h in zip(values.shape, spacing)]
    X = np.meshgrid(*axes, indexing="ij")
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(names + ["value"])
        for idx in np.ndindex(values.shape):
            w.writerow([_fmt(Xi[idx]) for Xi in X] + [_fmt(values[idx])])
    return values.size


def csv_to_field(path: PathLike, shape) -> np.ndarray:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))[1:]
    return np.array([float(r[-1]) for r in rows]).reshape(shape)


def trace_to_csv(path: PathLike, trace: BoundaryTrace) -> int:
    """Rows ``t, node, value`` ordered by time then node; returns the row count."""
    times = trace.times()
    count = 0
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["t", "node", "value"])
        for k, row in enumerate(trace.values):
            for j, v in enumerate(row):
                w.writerow([_fmt(times[k]), j, _fmt(v)])
                count += 1
    return count
