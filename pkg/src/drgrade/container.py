"""Binary interchange container for embeddings, feature maps and model parameters.

Layout (all integers little-endian):

    magic      4 bytes   b"GFE1"
    version    u32       currently 1
    header_len u32
    header     UTF-8 JSON: {"meta": {...}, "payload_bytes": int,
                            "entries": [{"id", "kind", "dims", "offset", "length"}, ...]}
    payload    concatenated float32 little-endian arrays
    crc32      u32       over every byte before the footer

Offsets are relative to the payload start, so any entry is reachable by seek
without scanning the payload. The prompt-embedding file reuses the same frame
with magic b"GPE1" and prompt texts recorded verbatim in the header.
"""

from __future__ import annotations

import json
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import (BadMagicError, ChecksumMismatchError, ContainerError,
                     TruncatedContainerError, VersionMismatchError)

MAGIC = b"GFE1"
PROMPT_MAGIC = b"GPE1"
VERSION = 1

KIND_GLOBAL = "global"
KIND_FEATMAP = "featmap"
KIND_PARAM = "param"


@dataclass
class Entry:
    entry_id: str
    kind: str
    data: np.ndarray

    @property
    def dims(self):
        return list(self.data.shape)


def _pack_container(magic, entries, meta):
    records = []
    payload = bytearray()
    seen = set()
    for e in entries:
        if e.entry_id in seen:
            raise ContainerError(f"duplicate entry id {e.entry_id!r}")
        seen.add(e.entry_id)
        raw = np.ascontiguousarray(e.data, dtype="<f4").tobytes()
        records.append({"id": e.entry_id, "kind": e.kind, "dims": list(e.data.shape),
                        "offset": len(payload), "length": len(raw)})
        payload.extend(raw)
    header = json.dumps({"meta": meta or {}, "payload_bytes": len(payload),
                         "entries": records}, sort_keys=True).encode("utf-8")
    body = magic + struct.pack("<II", VERSION, len(header)) + header + bytes(payload)
    return body + struct.pack("<I", zlib.crc32(body) & 0xFFFFFFFF)


def write_container(path, entries, meta=None):
    """Write entries to a container file; returns the path."""
    Path(path).write_bytes(_pack_container(MAGIC, list(entries), meta))
    return Path(path)


def _parse_frame(blob, magic, path):
    if len(blob) < 12 or blob[:4] != magic:
        raise BadMagicError(f"{path}: not a {magic.decode()} container")
    version, header_len = struct.unpack_from("<II", blob, 4)
    if version != VERSION:
        raise VersionMismatchError(f"{path}: unsupported container version {version}")
    header_end = 12 + header_len
    if len(blob) < header_end:
        raise TruncatedContainerError(f"{path}: truncated before end of header")
    try:
        header = json.loads(blob[12:header_end].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ContainerError(f"{path}: malformed header JSON: {exc}") from exc
    payload_bytes = header.get("payload_bytes", 0)
    expected = header_end + payload_bytes + 4
    if len(blob) < expected:
        raise TruncatedContainerError(
            f"{path}: file has {len(blob)} bytes, expected {expected}")
    stored = struct.unpack_from("<I", blob, expected - 4)[0]
    actual = zlib.crc32(blob[:expected - 4]) & 0xFFFFFFFF
    if stored != actual:
        raise ChecksumMismatchError(
            f"{path}: checksum mismatch (stored {stored:#010x}, computed {actual:#010x})")
    return header, blob[header_end:header_end + payload_bytes]


class ContainerReader:
    """Random access to container entries by id without scanning the payload."""

    def __init__(self, path):
        self.path = Path(path)
        blob = self.path.read_bytes()
        header, self._payload = _parse_frame(blob, MAGIC, self.path)
        self.meta = header.get("meta", {})
        self._index = {}
        for rec in header["entries"]:
            dims = rec["dims"]
            size = int(np.prod(dims)) * 4 if dims else 4
            if size != rec["length"]:
                raise ContainerError(
                    f"{self.path}: entry {rec['id']!r} declares dims {dims} "
                    f"({size} bytes) but length {rec['length']}")
            if rec["offset"] + rec["length"] > len(self._payload):
                raise TruncatedContainerError(
                    f"{self.path}: entry {rec['id']!r} extends past the payload")
            self._index[rec["id"]] = rec

    @property
    def ids(self):
        return list(self._index)

    def __contains__(self, entry_id):
        return entry_id in self._index

    def __len__(self):
        return len(self._index)

    def kind(self, entry_id):
        return self._index[entry_id]["kind"]

    def get(self, entry_id):
        try:
            rec = self._index[entry_id]
        except KeyError:
            raise ContainerError(f"{self.path}: no entry with id {entry_id!r}") from None
        arr = np.frombuffer(self._payload, dtype="<f4", count=rec["length"] // 4,
                            offset=rec["offset"])
        return arr.reshape(rec["dims"]).copy()

    def entries(self):
        for rec in self._index.values():
            yield Entry(rec["id"], rec["kind"], self.get(rec["id"]))


def read_container(path):
    """Load every entry of a container; returns {entry_id: Entry}."""
    reader = ContainerReader(path)
    return {e.entry_id: e for e in reader.entries()}


# ---------------------------------------------------------------------------
# Prompt embedding file
# ---------------------------------------------------------------------------

def write_prompt_file(path, texts, embeddings):
    """Write the 5 grade-prompt embeddings with their texts recorded verbatim."""
    texts = list(texts)
    embeddings = np.asarray(embeddings)
    if len(texts) != 5 or embeddings.shape[0] != 5 or embeddings.ndim != 2:
        raise ContainerError(f"prompt file needs exactly 5 rows, got {len(texts)} texts "
                             f"and embedding shape {embeddings.shape}")
    norms = np.linalg.norm(embeddings.astype(np.float64), axis=1)
    if np.any(norms == 0.0):
        raise ContainerError("prompt embeddings must have nonzero rows")
    entries = [Entry(f"grade{g}", KIND_GLOBAL, embeddings[g]) for g in range(5)]
    meta = {"prompts": texts, "dim": int(embeddings.shape[1])}
    Path(path).write_bytes(_pack_container(PROMPT_MAGIC, entries, meta))
    return Path(path)


def read_prompt_file(path):
    """Read a prompt file; returns (texts, embeddings 5xD float32)."""
    path = Path(path)
    header, payload = _parse_frame(path.read_bytes(), PROMPT_MAGIC, path)
    texts = header["meta"]["prompts"]
    rows = []
    for rec in header["entries"]:
        arr = np.frombuffer(payload, dtype="<f4", count=rec["length"] // 4,
                            offset=rec["offset"]).reshape(rec["dims"])
        rows.append(arr)
    embeddings = np.stack(rows)
    if embeddings.shape[0] != 5:
        raise ContainerError(f"{path}: prompt file carries {embeddings.shape[0]} rows, expected 5")
    if np.any(np.linalg.norm(embeddings.astype(np.float64), axis=1) == 0.0):
        raise ContainerError(f"{path}: prompt file has a zero row")
    return texts, embeddings.copy()


# ---------------------------------------------------------------------------
# Shard manifest
# ---------------------------------------------------------------------------

def write_shard_manifest(path, container_paths):
    Path(path).write_text(json.dumps({"containers": [str(p) for p in container_paths]},
                                     indent=2) + "\n", encoding="utf-8")
    return Path(path)


class ShardedReader:
    """Resolve entries across the containers listed in a shard-manifest JSON."""

    def __init__(self, manifest_path):
        manifest_path = Path(manifest_path)
        spec = json.loads(manifest_path.read_text(encoding="utf-8"))
        base = manifest_path.parent
        self.readers = []
        for p in spec["containers"]:
            p = Path(p)
            self.readers.append(ContainerReader(p if p.is_absolute() else base / p))

    def get(self, entry_id):
        for r in self.readers:
            if entry_id in r:
                return r.get(entry_id)
        raise ContainerError(f"no shard carries entry {entry_id!r}")

    def __contains__(self, entry_id):
        return any(entry_id in r for r in self.readers)


# ---------------------------------------------------------------------------
# Synthetic embeddings
# ---------------------------------------------------------------------------

@dataclass
class ClusterSpec:
    """Per-grade Gaussian clusters: larger separation/noise ratio = easier task."""

    separation: float = 4.0
    noise: float = 1.0
    kind: str = KIND_GLOBAL
    channels: int = 16  # featmap kind only
    height: int = 4
    width: int = 4


def class_means(dim, separation, seed):
    """Five orthonormal directions scaled by `separation` (deterministic per seed)."""
    if dim < 5:
        raise ValueError(f"need dim >= 5 for orthonormal class means, got {dim}")
    rng = np.random.default_rng(seed)
    q, _ = np.linalg.qr(rng.standard_normal((dim, 5)))
    return (q.T * separation).astype(np.float64)


def synth_embeddings(manifest, dim, spec=None, seed=0):
    """Deterministic per-grade Gaussian cluster embeddings for every manifest record.

    Returns (entries, means) where means is the 5 x dim (or 5 x channels) array
    of cluster centers, usable directly as a synthetic prompt bank.
    """
    if dim < 2:
        raise ValueError(f"embedding dim must be >= 2, got {dim}")
    spec = spec or ClusterSpec()
    rng = np.random.default_rng(seed)
    if spec.kind == KIND_GLOBAL:
        means = class_means(dim, spec.separation, seed)
        entries = []
        for rec in manifest:
            vec = means[rec.grade] + spec.noise * rng.standard_normal(dim)
            entries.append(Entry(rec.image_id, KIND_GLOBAL, vec))
        return entries, means
    if spec.kind == KIND_FEATMAP:
        means = class_means(spec.channels, spec.separation, seed)
        shape = (spec.channels, spec.height, spec.width)
        entries = []
        for rec in manifest:
            base = means[rec.grade][:, None, None]
            fmap = base + spec.noise * rng.standard_normal(shape)
            entries.append(Entry(rec.image_id, KIND_FEATMAP, fmap))
        return entries, means
    raise ValueError(f"unknown synthetic embedding kind {spec.kind!r}")
