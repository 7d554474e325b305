"""Content-addressed checkpoint store and append-only run manifest.

Artifact container layout (little-endian):

    magic "CWM1" | u16 schema_version | u16 kind_len + kind utf8
    u32 meta_len + canonical-JSON metadata
    u32 n_arrays, then per array: u16 name_len + name, u8 ndim, ndim*u32 dims,
    u8 dtype code (0 = float32)
    raw float32 payloads, concatenated in index order

The artifact's content address is the sha256 of the full byte stream; it is
re-verified on load, so write-then-read is bit-identical by construction.
"""

from __future__ import annotations

import hashlib
import json
import struct
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .config import canonical_json
from .errors import ValidationError

MAGIC = b"CWM1"
STORE_SCHEMA_VERSION = 1
_DTYPE_CODES = {0: np.dtype("<f4")}


def serialize_artifact(kind: str, meta: dict, arrays: dict[str, np.ndarray]) -> bytes:
    out = bytearray()
    out += MAGIC
    out += struct.pack("<H", STORE_SCHEMA_VERSION)
    kind_b = kind.encode()
    out += struct.pack("<H", len(kind_b)) + kind_b
    meta_b = canonical_json(meta).encode()
    out += struct.pack("<I", len(meta_b)) + meta_b
    names = sorted(arrays)
    out += struct.pack("<I", len(names))
    payload = bytearray()
    for name in names:
        arr = np.ascontiguousarray(arrays[name], dtype="<f4")
        name_b = name.encode()
        out += struct.pack("<H", len(name_b)) + name_b
        out += struct.pack("<B", arr.ndim)
        for d in arr.shape:
            out += struct.pack("<I", d)
        out += struct.pack("<B", 0)
        payload += arr.tobytes()
    out += payload
    return bytes(out)


def deserialize_artifact(blob: bytes) -> tuple[str, dict, dict[str, np.ndarray]]:
    view = memoryview(blob)
    if bytes(view[:4]) != MAGIC:
        raise ValidationError("bad artifact magic")
    off = 4
    (version,) = struct.unpack_from("<H", view, off)
    off += 2
    if version != STORE_SCHEMA_VERSION:
        raise ValidationError(f"unsupported artifact schema version {version}")
    (kind_len,) = struct.unpack_from("<H", view, off)
    off += 2
    kind = bytes(view[off : off + kind_len]).decode()
    off += kind_len
    (meta_len,) = struct.unpack_from("<I", view, off)
    off += 4
    meta = json.loads(bytes(view[off : off + meta_len]).decode())
    off += meta_len
    (n_arrays,) = struct.unpack_from("<I", view, off)
    off += 4
    index = []
    for _ in range(n_arrays):
        (name_len,) = struct.unpack_from("<H", view, off)
        off += 2
        name = bytes(view[off : off + name_len]).decode()
        off += name_len
        (ndim,) = struct.unpack_from("<B", view, off)
        off += 1
        shape = struct.unpack_from(f"<{ndim}I", view, off)
        off += 4 * ndim
        (code,) = struct.unpack_from("<B", view, off)
        off += 1
        index.append((name, shape, _DTYPE_CODES[code]))
    arrays = {}
    for name, shape, dtype in index:
        count = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(view, dtype=dtype, count=count, offset=off).reshape(shape)
        off += count * dtype.itemsize
        arrays[name] = arr.copy()
    return kind, meta, arrays


class CheckpointStore:
    """Directory of content-addressed artifacts."""

    def __init__(self, root: str | Path):
        self.root = Path(root)
        (self.root / "objects").mkdir(parents=True, exist_ok=True)

    def _path(self, digest: str) -> Path:
        return self.root / "objects" / f"{digest}.cwm"

    def put(self, kind: str, meta: dict, arrays: dict[str, np.ndarray]) -> str:
        blob = serialize_artifact(kind, meta, arrays)
        digest = hashlib.sha256(blob).hexdigest()
        path = self._path(digest)
        if not path.exists():
            tmp = path.with_suffix(".tmp")
            tmp.write_bytes(blob)
            tmp.rename(path)
        return digest

    def get(self, digest: str) -> tuple[str, dict, dict[str, np.ndarray]]:
        path = self._path(digest)
        if not path.exists():
            raise ValidationError(f"artifact {digest} not in store")
        blob = path.read_bytes()
        actual = hashlib.sha256(blob).hexdigest()
        if actual != digest:
            raise ValidationError(f"artifact {digest} failed hash verification")
        return deserialize_artifact(blob)

    def has(self, digest: str) -> bool:
        return self._path(digest).exists()


@dataclass
class StageRecord:
    stage: str
    status: str  # completed | skipped
    config_hash: str
    inputs: dict[str, str]
    outputs: dict[str, str]
    metrics_path: str | None
    wall_time_s: float


class RunManifest:
    """Append-only record of stage executions for one run directory."""

    def __init__(self, run_dir: str | Path, run_id: str):
        self.run_dir = Path(run_dir)
        self.run_dir.mkdir(parents=True, exist_ok=True)
        self.path = self.run_dir / "manifest.json"
        self.run_id = run_id
        if self.path.exists():
            data = json.loads(self.path.read_text())
            if data["run_id"] != run_id:
                raise ValidationError(
                    f"manifest belongs to run {data['run_id']}, not {run_id}"
                )
            self.records = [StageRecord(**r) for r in data["records"]]
        else:
            self.records = []
            self._flush()

    def _flush(self) -> None:
        data = {
            "run_id": self.run_id,
            "records": [r.__dict__ for r in self.records],
        }
        self.path.write_text(json.dumps(data, indent=2, sort_keys=True))

    def append(self, record: StageRecord) -> None:
        self.records.append(record)
        self._flush()

    def completed(self, stage: str) -> StageRecord | None:
        for rec in reversed(self.records):
            if rec.stage == stage and rec.status == "completed":
                return rec
        return None

    def artifact(self, stage: str, name: str) -> str | None:
        rec = self.completed(stage)
        if rec is None:
            return None
        return rec.outputs.get(name)


class StageTimer:
    def __enter__(self):
        self.t0 = time.monotonic()
        return self

    def __exit__(self, *exc):
        self.elapsed = time.monotonic() - self.t0
        return False
