"""File formats: binary value functions, JSONL datasets, JSON policies, CSV reports.

Value-function layout (little-endian)::

    b"SGVF" | u32 version | u32 naxes
    per axis: f64 lo | f64 hi | u64 n | u8 periodic
    u64 nlevels | f64 * nlevels
    u64 metadata length | UTF-8 JSON metadata
    f64 payload: slices outermost, then state axes row-major (last fastest)
"""

from __future__ import annotations

import csv
import io
import json
import math
import os
import struct
import tempfile
from pathlib import Path

import numpy as np

from .envmodels import model_from_dict
from .gridcore import Axis, Field, Grid

MAGIC = b"SGVF"
VERSION = 1


class FormatError(ValueError):
    pass


class BadMagicError(FormatError):
    pass


class TruncatedPayloadError(FormatError):
    pass


class UnknownVersionError(FormatError):
    pass


class MalformedRecordError(FormatError):
    def __init__(self, line: int, message: str):
        super().__init__(f"line {line}: {message}")
        self.line = line


def atomic_write(path, data: bytes | str) -> None:
    """Write via a temporary file in the same directory, then rename."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    mode = "wb" if isinstance(data, bytes) else "w"
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, mode) as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


# --- value functions ---------------------------------------------------------

def vf_to_bytes(vf) -> bytes:
    out = io.BytesIO()
    grid = vf.grid
    out.write(MAGIC)
    out.write(struct.pack("<II", VERSION, grid.ndim))
    for ax in grid.axes:
        out.write(struct.pack("<ddQB", ax.lo, ax.hi, ax.n, 1 if ax.periodic else 0))
    levels = np.asarray(vf.dbar_levels, dtype="<f8")
    out.write(struct.pack("<Q", len(levels)))
    out.write(levels.tobytes())
    meta = json.dumps(vf.metadata, sort_keys=True).encode("utf-8")
    out.write(struct.pack("<Q", len(meta)))
    out.write(meta)
    out.write(np.ascontiguousarray(vf.values(), dtype="<f8").tobytes())
    return out.getvalue()


def vf_from_bytes(buf: bytes):
    from .reach import ValueFunction

    def take(n):
        nonlocal pos
        if pos + n > len(buf):
            raise TruncatedPayloadError("file ends inside the header")
        chunk = buf[pos:pos + n]
        pos += n
        return chunk

    pos = 0
    if buf[:4] != MAGIC:
        raise BadMagicError(f"bad magic {buf[:4]!r}")
    pos = 4
    version, naxes = struct.unpack("<II", take(8))
    if version != VERSION:
        raise UnknownVersionError(f"unsupported format version {version}")
    axes = []
    for _ in range(naxes):
        lo, hi, n, per = struct.unpack("<ddQB", take(25))
        axes.append(Axis(lo, hi, int(n), bool(per)))
    grid = Grid(axes)
    (nlev,) = struct.unpack("<Q", take(8))
    levels = np.frombuffer(take(8 * nlev), dtype="<f8").astype(float)
    (mlen,) = struct.unpack("<Q", take(8))
    meta = json.loads(take(mlen).decode("utf-8"))
    expected = grid.size * nlev * 8
    payload = buf[pos:]
    if len(payload) != expected:
        raise TruncatedPayloadError(f"payload has {len(payload)} bytes, expected {expected}")
    data = np.frombuffer(payload, dtype="<f8").astype(float).reshape((nlev,) + grid.shape)
    slices = [Field(grid, data[i]) for i in range(nlev)]
    model = model_from_dict(meta["model"]) if "model" in meta else None
    return ValueFunction(grid, levels, slices, model=model, metadata=meta)


def save_vf(vf, path) -> None:
    atomic_write(path, vf_to_bytes(vf))


def load_vf(path, env=None):
    """Read a value function; with ``env`` also check ``V <= l`` at every node."""
    vf = vf_from_bytes(Path(path).read_bytes())
    v = vf.values()
    if len(v) > 1 and np.any(v[:-1] < v[1:] - 1e-9):
        raise FormatError("value function is not monotone in the disturbance bound")
    if env is not None:
        l = np.asarray(env.target(vf.grid.points())).reshape(vf.grid.shape)
        if np.any(v > l + 1e-9):
            raise FormatError("value function exceeds the target function")
    return vf


# --- datasets -----------------------------------------------------------------

RECORD_KEYS = ("demo", "t", "x", "u_expert", "u_applied", "dbar", "v_safe", "flag")


def _num(v):
    return None if v is None or (isinstance(v, float) and math.isnan(v)) else v


def record_to_json(rec) -> str:
    return json.dumps({
        "demo": rec.demo_id,
        "t": rec.t,
        "x": [float(c) for c in rec.x],
        "u_expert": rec.u_expert,
        "u_applied": rec.u_applied,
        "dbar": rec.dbar,
        "v_safe": _num(rec.v_safe),
        "flag": rec.flag,
    })


def save_dataset(ds, path) -> None:
    path = Path(path)
    lines = "".join(record_to_json(r) + "\n" for r in ds.records)
    atomic_write(path, lines)
    atomic_write(manifest_path(path), json.dumps(ds.provenance, sort_keys=True, indent=1) + "\n")


def manifest_path(path) -> Path:
    path = Path(path)
    return path.with_name(path.name + ".manifest.json")


def load_dataset(path):
    from .collect import Dataset, DemoRecord

    path = Path(path)
    records = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise MalformedRecordError(lineno, f"invalid JSON ({exc.msg})") from None
            if not isinstance(obj, dict) or set(obj) != set(RECORD_KEYS):
                raise MalformedRecordError(lineno, f"expected keys {sorted(RECORD_KEYS)}")
            try:
                rec = DemoRecord(int(obj["demo"]), float(obj["t"]), np.asarray(obj["x"], dtype=float),
                                 float(obj["u_expert"]), float(obj["u_applied"]), float(obj["dbar"]),
                                 float("nan") if obj["v_safe"] is None else float(obj["v_safe"]),
                                 str(obj["flag"]))
            except (TypeError, ValueError) as exc:
                raise MalformedRecordError(lineno, str(exc)) from None
            records.append(rec)
    mpath = manifest_path(path)
    provenance = json.loads(mpath.read_text()) if mpath.exists() else {}
    ds = Dataset(records, provenance)
    ds.validate()
    return ds


# --- policies -------------------------------------------------------------------

def save_policy(policy, path) -> None:
    atomic_write(path, json.dumps(policy.to_dict(), indent=None) + "\n")


def load_policy(path):
    from .policy import MlpPolicy

    return MlpPolicy.from_dict(json.loads(Path(path).read_text()))


# --- reports ----------------------------------------------------------------------

REPORT_COLUMNS = (
    "method", "K", "seed", "failure_rate", "safe_cost", "centerline_msd", "final_abs_px",
    "n_starts", "n_goal", "n_failure", "n_timeout", "filter_engagements", "dataset_records",
    "expert_failure_rate", "v_safe_mean", "dbar_max", "env_hash", "error",
)


def _fmt(v):
    if v is None:
        return ""
    if isinstance(v, float):
        return "" if math.isnan(v) else repr(v)
    return str(v)


def report_rows_to_csv(rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(REPORT_COLUMNS)
    for r in rows:
        w.writerow([_fmt(r.get(c)) for c in REPORT_COLUMNS])
    return buf.getvalue()


def write_report(rows, path) -> None:
    atomic_write(path, report_rows_to_csv(rows))


def read_report(path) -> list[dict]:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames or ()) != REPORT_COLUMNS:
            raise FormatError(f"{path}: unexpected report columns")
        rows = []
        for r in reader:
            row = {}
            for k, v in r.items():
                if k in ("method", "env_hash", "error"):
                    row[k] = v
                elif k in ("K", "seed", "n_starts", "n_goal", "n_failure", "n_timeout",
                           "filter_engagements", "dataset_records"):
                    row[k] = int(v) if v else None
                else:
                    row[k] = float(v) if v else float("nan")
            rows.append(row)
    if not rows:
        raise FormatError(f"{path}: report has no rows")
    return rows
