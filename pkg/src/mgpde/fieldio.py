"""Binary field files and dataset manifests.

Field file layout: ``b"MGPD"``, a little-endian uint32 header length, a UTF-8
JSON header ``{version, kind, rank, resolution, dtype, ...}``, then the
row-major little-endian float64 payload.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

FIELD_MAGIC = b"MGPD"
FIELD_VERSION = 1
KINDS = ("nu", "u", "diff")


class FormatError(ValueError):
    """Malformed, truncated or incompatible file."""


def write_field(path: str | Path, field: np.ndarray, kind: str, **meta) -> None:
    a = np.asarray(field, dtype=np.float64)
    if kind not in KINDS:
        raise ValueError(f"kind must be one of {KINDS}, got {kind!r}")
    if a.ndim not in (2, 3) or len(set(a.shape)) != 1:
        raise ValueError(f"field must be a square 2D or cubic 3D array, got shape {a.shape}")
    header = {
        "version": FIELD_VERSION,
        "kind": kind,
        "rank": a.ndim,
        "resolution": a.shape[0],
        "dtype": "f64le",
    }
    for k, v in meta.items():
        if v is None:
            continue
        header[k] = [float(x) for x in np.ravel(v)] if k == "omega" else v
    blob = json.dumps(header, sort_keys=True).encode()
    payload = np.ascontiguousarray(a, dtype="<f8").tobytes()
    Path(path).write_bytes(FIELD_MAGIC + struct.pack("<I", len(blob)) + blob + payload)


def read_field(path: str | Path) -> tuple[np.ndarray, dict]:
    raw = Path(path).read_bytes()
    if len(raw) < 8:
        raise FormatError(f"{path}: truncated (no header)")
    if raw[:4] != FIELD_MAGIC:
        raise FormatError(f"{path}: bad magic {raw[:4]!r}")
    (hlen,) = struct.unpack("<I", raw[4:8])
    if len(raw) < 8 + hlen:
        raise FormatError(f"{path}: truncated header")
    try:
        header = json.loads(raw[8 : 8 + hlen].decode())
    except (UnicodeDecodeError, ValueError) as exc:
        raise FormatError(f"{path}: corrupt header ({exc})") from exc
    if header.get("version") != FIELD_VERSION:
        raise FormatError(f"{path}: unsupported version {header.get('version')}")
    if header.get("dtype") != "f64le":
        raise FormatError(f"{path}: unsupported dtype {header.get('dtype')}")
    shape = (header["resolution"],) * header["rank"]
    nbytes = 8 * int(np.prod(shape))
    payload = raw[8 + hlen :]
    if len(payload) != nbytes:
        raise FormatError(f"{path}: payload is {len(payload)} bytes, expected {nbytes}")
    return np.frombuffer(payload, dtype="<f8").astype(np.float64).reshape(shape), header


def write_manifest(path: str | Path, omegas: np.ndarray, seed) -> None:
    with open(path, "w") as fh:
        for i, w in enumerate(np.asarray(omegas)):
            fh.write(json.dumps({"schema_version": 1, "index": i, "seed": seed, "omega": [float(x) for x in w]}) + "\n")


def read_manifest(path: str | Path) -> np.ndarray:
    rows = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                rows.append((rec["index"], rec["omega"]))
            except (ValueError, KeyError) as exc:
                raise FormatError(f"{path}:{lineno}: bad manifest line ({exc})") from exc
    rows.sort()
    return np.array([w for _, w in rows], dtype=np.float64)
