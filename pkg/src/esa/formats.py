"""Binary and JSON artifact formats: calibration dumps, projection files, manifests.

All binary payloads are little-endian float32/uint32 with fixed 8-byte magic
prefixes so a wrong file is rejected up front instead of producing garbage
downstream. Readers raise FormatError naming the offending path.
"""

from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path

import numpy as np

from .compression import CalibrationSet, ProjectionPair
from .errors import FormatError

CALIBRATION_MAGIC = b"ESACAL1\0"
PROJECTION_MAGIC = b"ESAPROJ1"
MANIFEST_FORMAT = "esa-manifest-v1"
SNAPSHOT_MAGIC = "esa-cache-v1"


def _read_exact(f, count: int, path: Path, what: str) -> bytes:
    buf = f.read(count)
    if len(buf) != count:
        raise FormatError(f"{path}: truncated while reading {what}")
    return buf


def _read_f32(f, count: int, path: Path, what: str) -> np.ndarray:
    raw = _read_exact(f, count * 4, path, what)
    return np.frombuffer(raw, dtype="<f4").astype(np.float32, copy=True)


def write_calibration(path: str | Path, calib: CalibrationSet) -> None:
    """Dump one layer's calibration queries and keys."""
    path = Path(path)
    n, d_h = calib.queries.shape
    with open(path, "wb") as f:
        f.write(CALIBRATION_MAGIC)
        f.write(struct.pack("<III", n, d_h, calib.layer_index))
        f.write(np.ascontiguousarray(calib.queries, dtype="<f4").tobytes())
        f.write(np.ascontiguousarray(calib.keys, dtype="<f4").tobytes())


def read_calibration(path: str | Path) -> CalibrationSet:
    path = Path(path)
    with open(path, "rb") as f:
        magic = _read_exact(f, 8, path, "magic")
        if magic != CALIBRATION_MAGIC:
            raise FormatError(f"{path}: bad magic {magic!r}, not a calibration dump")
        n, d_h, layer_index = struct.unpack("<III", _read_exact(f, 12, path, "header"))
        if n < 2 or d_h < 1:
            raise FormatError(f"{path}: implausible header N={n}, d_H={d_h}")
        queries = _read_f32(f, n * d_h, path, "queries").reshape(n, d_h)
        keys = _read_f32(f, n * d_h, path, "keys").reshape(n, d_h)
        if f.read(1):
            raise FormatError(f"{path}: trailing bytes after payload")
    return CalibrationSet(layer_index=layer_index, queries=queries, keys=keys, source=str(path))


def write_projection(path: str | Path, pair: ProjectionPair) -> None:
    """Store a trained projection pair: dims then w_q, b_q, w_k, b_k."""
    path = Path(path)
    with open(path, "wb") as f:
        f.write(PROJECTION_MAGIC)
        f.write(struct.pack("<III", pair.d_prime, pair.d_h, pair.layer_index))
        for arr in (pair.w_q, pair.b_q, pair.w_k, pair.b_k):
            f.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def read_projection(path: str | Path) -> ProjectionPair:
    path = Path(path)
    with open(path, "rb") as f:
        magic = _read_exact(f, 8, path, "magic")
        if magic != PROJECTION_MAGIC:
            raise FormatError(f"{path}: bad magic {magic!r}, not a projection file")
        d_prime, d_h, layer_index = struct.unpack("<III", _read_exact(f, 12, path, "header"))
        if d_prime < 1 or d_h < 1 or d_prime > d_h:
            raise FormatError(f"{path}: implausible dims d'={d_prime}, d_H={d_h}")
        w_q = _read_f32(f, d_prime * d_h, path, "w_q").reshape(d_prime, d_h)
        b_q = _read_f32(f, d_prime, path, "b_q")
        w_k = _read_f32(f, d_prime * d_h, path, "w_k").reshape(d_prime, d_h)
        b_k = _read_f32(f, d_prime, path, "b_k")
        if f.read(1):
            raise FormatError(f"{path}: trailing bytes after payload")
    return ProjectionPair(layer_index, w_q, b_q, w_k, b_k)


def config_hash(payload: dict) -> str:
    """Short stable hash of a JSON-serializable config, for output headers."""
    canon = json.dumps(payload, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canon.encode()).hexdigest()[:12]


def write_manifest(path: str | Path, seeds: dict, config: dict, artifacts: dict) -> None:
    """Record the seeds, config, and artifact paths of one experiment run."""
    doc = {
        "format": MANIFEST_FORMAT,
        "seeds": seeds,
        "config": config,
        "config_hash": config_hash(config),
        "artifacts": artifacts,
    }
    Path(path).write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def read_manifest(path: str | Path) -> dict:
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise FormatError(f"{path}: not valid JSON ({exc})") from exc
    if not isinstance(doc, dict) or doc.get("format") != MANIFEST_FORMAT:
        raise FormatError(f"{path}: missing or unknown manifest format tag")
    return doc


def write_snapshot(path: str | Path, header: dict, arrays: dict[str, np.ndarray]) -> None:
    """Cache snapshot: one JSON header line, then raw <f4 payloads in header order."""
    path = Path(path)
    meta = {
        "magic": SNAPSHOT_MAGIC,
        "header": header,
        "arrays": [{"name": k, "shape": list(v.shape)} for k, v in arrays.items()],
    }
    with open(path, "wb") as f:
        f.write(json.dumps(meta, sort_keys=True).encode() + b"\n")
        for v in arrays.values():
            f.write(np.ascontiguousarray(v, dtype="<f4").tobytes())


def read_snapshot(path: str | Path) -> tuple[dict, dict[str, np.ndarray]]:
    path = Path(path)
    with open(path, "rb") as f:
        line = f.readline()
        try:
            meta = json.loads(line)
        except (json.JSONDecodeError, UnicodeDecodeError) as exc:
            raise FormatError(f"{path}: unreadable snapshot header ({exc})") from exc
        if not isinstance(meta, dict) or meta.get("magic") != SNAPSHOT_MAGIC:
            raise FormatError(f"{path}: bad snapshot magic")
        arrays: dict[str, np.ndarray] = {}
        for spec_entry in meta["arrays"]:
            shape = tuple(int(s) for s in spec_entry["shape"])
            count = int(np.prod(shape)) if shape else 1
            arrays[spec_entry["name"]] = _read_f32(
                f, count, path, spec_entry["name"]
            ).reshape(shape)
        if f.read(1):
            raise FormatError(f"{path}: trailing bytes after payload")
    return meta["header"], arrays
