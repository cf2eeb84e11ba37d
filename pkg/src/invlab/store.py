"""On-disk embedding store.

Layout of a store directory::

    manifest.json               modality + one entry per shard
    <model>__<layer>.embs       64-byte header, then count x length float32 (little endian)
    <model>__<layer>.idx        one "subject_id<TAB>sample_id" line per row

Header: magic ``EMBS``, version (u16), length (u32), count (u64), zero padded to 64 bytes.
"""

from __future__ import annotations

import json
import re
import struct
from pathlib import Path

import numpy as np
from filelock import FileLock

from .core import EmbeddingBatch, Modality
from .errors import FormatError, InvalidInput, LengthMismatch

MAGIC = b"EMBS"
VERSION = 1
HEADER_SIZE = 64
_HEADER = struct.Struct("<4sHIQ")


def _safe(name: str) -> str:
    return re.sub(r"[^A-Za-z0-9._-]", "_", name)


def shard_name(model_id: str, layer_id: str) -> str:
    return f"{_safe(model_id)}__{_safe(layer_id)}"


def pack_header(length: int, count: int) -> bytes:
    return _HEADER.pack(MAGIC, VERSION, length, count).ljust(HEADER_SIZE, b"\0")


def unpack_header(raw: bytes):
    if len(raw) < HEADER_SIZE:
        raise FormatError("truncated shard header")
    magic, version, length, count = _HEADER.unpack_from(raw)
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r}")
    if version != VERSION:
        raise FormatError(f"unsupported shard version {version}")
    return length, count


class EmbeddingStore:
    """Directory-backed store; many readers, one appending writer per shard."""

    def __init__(self, root, modality=Modality.GENERIC):
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)
        manifest = self.root / "manifest.json"
        if manifest.exists():
            self._manifest = json.loads(manifest.read_text())
        else:
            self._manifest = {"modality": Modality(modality).value, "shards": []}
            self._write_manifest()

    @property
    def modality(self) -> Modality:
        return Modality(self._manifest["modality"])

    def _reload(self):
        path = self.root / "manifest.json"
        if path.exists():
            self._manifest = json.loads(path.read_text())

    def _write_manifest(self):
        tmp = self.root / "manifest.json.tmp"
        tmp.write_text(json.dumps(self._manifest, indent=2, sort_keys=True))
        tmp.replace(self.root / "manifest.json")

    def _entry(self, model_id, layer_id):
        for entry in self._manifest["shards"]:
            if entry["model_id"] == model_id and entry["layer_id"] == layer_id:
                return entry
        return None

    def shards(self):
        self._reload()
        return [(e["model_id"], e["layer_id"]) for e in self._manifest["shards"]]

    def append(self, batch: EmbeddingBatch):
        """Append a batch to its (model, layer) shard, creating it if needed."""
        name = shard_name(batch.source_model_id, batch.layer_id)
        data_path = self.root / f"{name}.embs"
        index_path = self.root / f"{name}.idx"
        for ident in batch.subject_ids + batch.sample_ids:
            if "\t" in ident or "\n" in ident:
                raise InvalidInput(f"identifier {ident!r} contains a tab or newline")
        with FileLock(str(self.root / f"{name}.lock")):
            self._reload()
            entry = self._entry(batch.source_model_id, batch.layer_id)
            if entry is None:
                with open(data_path, "wb") as fh:
                    fh.write(pack_header(batch.length, 0))
                index_path.write_bytes(b"")
                entry = {"model_id": batch.source_model_id, "layer_id": batch.layer_id,
                         "length": batch.length, "count": 0, "file": f"{name}.embs"}
            if entry["length"] != batch.length:
                raise LengthMismatch(f"shard length {entry['length']} != batch length {batch.length}")
            rows = np.ascontiguousarray(batch.vectors, dtype="<f4")
            with open(data_path, "r+b") as fh:
                length, count = unpack_header(fh.read(HEADER_SIZE))
                fh.seek(HEADER_SIZE + count * length * 4)
                fh.write(rows.tobytes())
                fh.truncate()
                fh.seek(0)
                fh.write(pack_header(length, count + len(batch)))
            with open(index_path, "a", encoding="utf-8") as fh:
                for subj, samp in zip(batch.subject_ids, batch.sample_ids):
                    fh.write(f"{subj}\t{samp}\n")
            with FileLock(str(self.root / "manifest.lock")):
                self._reload()
                current = self._entry(batch.source_model_id, batch.layer_id)
                if current is None:
                    self._manifest["shards"].append(entry)
                    current = entry
                current["count"] = count + len(batch)
                self._write_manifest()

    def read(self, model_id: str, layer_id: str) -> EmbeddingBatch:
        self._reload()
        entry = self._entry(model_id, layer_id)
        if entry is None:
            raise KeyError(f"no shard for {model_id}:{layer_id}")
        name = shard_name(model_id, layer_id)
        raw = (self.root / f"{name}.embs").read_bytes()
        length, count = unpack_header(raw[:HEADER_SIZE])
        expected = HEADER_SIZE + count * length * 4
        if len(raw) < expected:
            raise FormatError("shard shorter than its header declares")
        vectors = np.frombuffer(raw, dtype="<f4", count=count * length, offset=HEADER_SIZE)
        vectors = vectors.reshape(count, length).astype(np.float32)
        lines = (self.root / f"{name}.idx").read_text(encoding="utf-8").splitlines()
        if len(lines) != count:
            raise FormatError(f"index has {len(lines)} rows, shard has {count}")
        subjects, samples = zip(*(line.split("\t") for line in lines)) if lines else ((), ())
        return EmbeddingBatch(vectors, model_id, layer_id, subjects, samples, self.modality)
