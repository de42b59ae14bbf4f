"""CSV and JSON readers/writers for encodings, batches, checkpoints and traces.

Floats are written with ``%.17g`` so every value reads back bit-for-bit.
"""
from __future__ import annotations

import csv
import json
from pathlib import Path

import numpy as np

from .encoding import PosEncoding
from .errors import ShapeError
from .model import ModelParams
from .task import Batch, sts_target


def fmt(x) -> str:
    if isinstance(x, (bool, np.bool_)):
        return str(int(x))
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    return "%.17g" % float(x)


def _write_rows(path, header, rows):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        if header is not None:
            w.writerow(header)
        for r in rows:
            w.writerow([v if isinstance(v, str) else fmt(v) for v in r])


def _read_rows(path):
    with Path(path).open(newline="") as fh:
        return list(csv.reader(fh))


# --- encodings ----------------------------------------------------------------

def write_pe_csv(path, pe: PosEncoding):
    """Header row ``d_e,T,kind,delta`` then the matrix row by row."""
    _write_rows(path, None, [[pe.d_e, pe.T, pe.kind, pe.delta], *pe.E.tolist()])


def read_pe_csv(path) -> PosEncoding:
    rows = _read_rows(path)
    d_e, T, kind, delta = int(rows[0][0]), int(rows[0][1]), rows[0][2], float(rows[0][3])
    E = np.array(rows[1:], dtype=np.float64)
    if E.shape != (d_e, T):
        raise ShapeError(f"encoding CSV declares {d_e}x{T} but holds {E.shape}")
    return PosEncoding(kind, E, delta)


# --- batches --------------------------------------------------------------------

def write_batch_csv(path, batch: Batch):
    """One row per sample: the q indices, then X flattened row-major."""
    n, d, T = batch.X.shape
    q = batch.Y.shape[1]
    header = [f"y{i}" for i in range(q)] + [f"x{r}_{c}" for r in range(d) for c in range(T)]
    rows = [list(batch.Y[i]) + batch.X[i].ravel().tolist() for i in range(n)]
    _write_rows(path, header, rows)


def read_batch_csv(path) -> Batch:
    rows = _read_rows(path)
    header = rows[0]
    q = sum(1 for h in header if h.startswith("y"))
    last = header[-1][1:].split("_")
    d, T = int(last[0]) + 1, int(last[1]) + 1
    data = rows[1:]
    Y = np.array([[int(v) for v in r[:q]] for r in data], dtype=np.int64).reshape(-1, q)
    X = np.array([[float(v) for v in r[q:]] for r in data]).reshape(-1, d, T)
    return Batch(X, Y, sts_target(X, Y))


# --- checkpoints -------------------------------------------------------------------

def write_matrix_csv(path, M):
    _write_rows(path, None, np.atleast_2d(M).tolist())


def read_matrix_csv(path) -> np.ndarray:
    return np.array(_read_rows(path), dtype=np.float64)


def save_checkpoint(directory, params: ModelParams, pe_kind: str, step: int):
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    write_matrix_csv(d / "W.csv", params.W)
    write_matrix_csv(d / "V.csv", params.V)
    meta = {"d": params.d, "d_e": params.d_e, "pe_kind": pe_kind, "step": int(step)}
    (d / "header.json").write_text(json.dumps(meta, indent=2) + "\n")


def load_checkpoint(directory):
    """Returns (params, header dict)."""
    d = Path(directory)
    meta = json.loads((d / "header.json").read_text())
    params = ModelParams(read_matrix_csv(d / "W.csv"), read_matrix_csv(d / "V.csv"))
    params.check()
    if params.d != meta["d"] or params.d_e != meta["d_e"]:
        raise ShapeError(f"checkpoint matrices do not match header {meta}")
    return params, meta


# --- traces and generic tables --------------------------------------------------------

def write_table_csv(path, columns, rows):
    _write_rows(path, list(columns), rows)


def read_table_csv(path):
    """Returns (columns, rows) with every cell parsed as float."""
    rows = _read_rows(path)
    return tuple(rows[0]), [tuple(float(v) for v in r) for r in rows[1:]]


def write_trace_csv(path, trace):
    write_table_csv(path, trace.columns, trace.rows)


def read_trace_csv(path):
    from .trainer import TrainTrace
    cols, rows = read_table_csv(path)
    return TrainTrace(cols, [(int(r[0]),) + r[1:] for r in rows])


def write_json(path, obj):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True, default=_json_default) + "\n")


def _json_default(o):
    if isinstance(o, np.integer):
        return int(o)
    if isinstance(o, np.floating):
        return float(o)
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(f"not JSON serialisable: {type(o).__name__}")
