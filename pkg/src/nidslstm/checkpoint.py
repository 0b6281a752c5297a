"""Binary container for named tensors plus a JSON text section.

Layout (all integers little-endian)::

    magic            8 bytes
    version          u32
    schema hash      32 bytes (sha256 digest)
    text length      u64, followed by UTF-8 JSON
    tensor count     u32
    per tensor:      u16 name length, name, u8 dtype code, u8 ndim,
                     ndim x u64 dims, row-major payload
    crc32            u32 over everything before it

The same container backs model checkpoints and the preprocessed-data cache.
"""

from __future__ import annotations

import io
import json
import struct
import zlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .data import FeatureSchema, NormalizationStats, RecordTable, Vocabulary
from .layers import ModelParams, ModelSpec, tensor_shapes

FORMAT_VERSION = 1
CHECKPOINT_MAGIC = b"NIDSCKPT"
CACHE_MAGIC = b"NIDSDATA"

_DTYPES = {1: np.dtype("<f4"), 2: np.dtype("<f8"), 3: np.dtype("<i8")}
_CODES = {np.dtype("float32"): 1, np.dtype("float64"): 2, np.dtype("int64"): 3}


class CheckpointError(ValueError):
    pass


def write_container(path, magic: bytes, schema_hash: str, meta: dict, tensors: dict[str, np.ndarray]) -> None:
    buf = io.BytesIO()
    buf.write(magic)
    buf.write(struct.pack("<I", FORMAT_VERSION))
    buf.write(bytes.fromhex(schema_hash))
    text = json.dumps(meta, sort_keys=True).encode("utf-8")
    buf.write(struct.pack("<Q", len(text)))
    buf.write(text)
    buf.write(struct.pack("<I", len(tensors)))
    for name, arr in tensors.items():
        arr = np.ascontiguousarray(arr)
        code = _CODES.get(arr.dtype)
        if code is None:
            raise TypeError(f"{name}: unsupported dtype {arr.dtype}")
        encoded = name.encode("utf-8")
        buf.write(struct.pack("<H", len(encoded)))
        buf.write(encoded)
        buf.write(struct.pack("<BB", code, arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        buf.write(arr.astype(_DTYPES[code], copy=False).tobytes(order="C"))
    payload = buf.getvalue()
    Path(path).write_bytes(payload + struct.pack("<I", zlib.crc32(payload)))


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise CheckpointError("file is truncated")
        out = self.data[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def read_container(path, magic: bytes) -> tuple[str, dict, dict[str, np.ndarray]]:
    data = Path(path).read_bytes()
    if len(data) < len(magic) + 4:
        raise CheckpointError(f"{path}: file is truncated")
    if data[: len(magic)] != magic:
        raise CheckpointError(f"{path}: bad magic bytes {data[:len(magic)]!r}, expected {magic!r}")
    body, crc = data[:-4], struct.unpack("<I", data[-4:])[0]
    r = _Reader(body)
    r.take(len(magic))
    (version,) = r.unpack("<I")
    if version != FORMAT_VERSION:
        raise CheckpointError(f"{path}: format version {version}, this build reads {FORMAT_VERSION}")
    if zlib.crc32(body) != crc:
        raise CheckpointError(f"{path}: checksum mismatch (file is truncated or corrupted)")
    schema_hash = r.take(32).hex()
    (text_len,) = r.unpack("<Q")
    meta = json.loads(r.take(text_len).decode("utf-8"))
    (count,) = r.unpack("<I")
    tensors = {}
    for _ in range(count):
        (name_len,) = r.unpack("<H")
        name = r.take(name_len).decode("utf-8")
        code, ndim = r.unpack("<BB")
        if code not in _DTYPES:
            raise CheckpointError(f"{path}: tensor {name!r} has unknown dtype code {code}")
        shape = r.unpack(f"<{ndim}Q")
        dtype = _DTYPES[code]
        n = int(np.prod(shape, dtype=np.int64))
        arr = np.frombuffer(r.take(n * dtype.itemsize), dtype=dtype).reshape(shape)
        tensors[name] = arr.astype(dtype.newbyteorder("="))
    if r.pos != len(body):
        raise CheckpointError(f"{path}: {len(body) - r.pos} trailing bytes")
    return schema_hash, meta, tensors


@dataclass
class Checkpoint:
    params: ModelParams
    config: dict
    vocabs: dict[str, Vocabulary]
    stats: NormalizationStats
    schema_hash: str


def _spec_to_dict(spec: ModelSpec) -> dict:
    d = dict(spec.__dict__)
    for key in ("vocab_sizes", "embed_dims", "cat_names"):
        d[key] = list(d[key])
    return d


def _spec_from_dict(d: dict) -> ModelSpec:
    d = dict(d)
    for key in ("vocab_sizes", "embed_dims", "cat_names"):
        d[key] = tuple(d[key])
    return ModelSpec(**d)


def save_checkpoint(
    path,
    params: ModelParams,
    config: dict,
    vocabs: dict[str, Vocabulary],
    stats: NormalizationStats,
    schema: FeatureSchema,
    dtype=np.float32,
) -> None:
    schema_hash = schema.schema_hash()
    meta = {
        "kind": "checkpoint",
        "spec": _spec_to_dict(params.spec),
        "config": config,
        "vocabularies": {name: list(v.tokens) for name, v in vocabs.items()},
        "normalization": {
            "mean": [float(x) for x in stats.mean],
            "std": [float(x) for x in stats.std],
            "passthrough": [bool(x) for x in stats.passthrough],
        },
    }
    tensors = {name: t.astype(dtype) for name, t in params.tensors.items()}
    write_container(path, CHECKPOINT_MAGIC, schema_hash, meta, tensors)


def load_checkpoint(path, schema: FeatureSchema | None = None) -> Checkpoint:
    """Read a checkpoint; tensors come back as float64."""
    schema_hash, meta, tensors = read_container(path, CHECKPOINT_MAGIC)
    if schema is not None and schema.schema_hash() != schema_hash:
        raise CheckpointError(
            f"{path}: checkpoint was written for feature schema {schema_hash[:12]}..., "
            f"but the current schema hashes to {schema.schema_hash()[:12]}... "
            "(column set, order or label columns differ)"
        )
    spec = _spec_from_dict(meta["spec"])
    expected = tensor_shapes(spec)
    if set(expected) != set(tensors):
        raise CheckpointError(f"{path}: tensor set does not match the stored model description")
    for name, shape in expected.items():
        if tensors[name].shape != shape:
            raise CheckpointError(f"{path}: {name} has shape {tensors[name].shape}, expected {shape}")
    params = ModelParams(spec, {name: tensors[name].astype(np.float64) for name in expected})
    norm = meta["normalization"]
    stats = NormalizationStats(
        mean=np.array(norm["mean"], dtype=np.float64),
        std=np.array(norm["std"], dtype=np.float64),
        passthrough=np.array(norm["passthrough"], dtype=bool),
    )
    vocabs = {name: Vocabulary(name, tuple(tokens)) for name, tokens in meta["vocabularies"].items()}
    return Checkpoint(params, meta["config"], vocabs, stats, schema_hash)


def _source_stamp(source) -> dict:
    st = Path(source).stat()
    return {"name": Path(source).name, "size": st.st_size, "mtime_ns": st.st_mtime_ns}


def save_record_cache(path, table: RecordTable, source) -> None:
    """Cache parsed CSV records; category strings are stored as codes into a per-feature token list."""
    tensors = {
        "continuous": np.asarray(table.continuous, dtype=np.float64),
        "multi": np.asarray(table.multi, dtype=np.int64),
        "binary": np.asarray(table.binary, dtype=np.int64),
    }
    tokens = {}
    for name, values in table.categorical.items():
        uniq, codes = np.unique(values.astype(str), return_inverse=True)
        tokens[name] = [str(u) for u in uniq]
        tensors[f"cat.{name}"] = codes.astype(np.int64).reshape(-1)
    meta = {"kind": "records", "source": _source_stamp(source), "tokens": tokens}
    write_container(path, CACHE_MAGIC, table.schema.schema_hash(), meta, tensors)


def load_record_cache(path, schema: FeatureSchema, source) -> RecordTable | None:
    """Cached records, or None when the cache is missing or stale."""
    if not Path(path).exists():
        return None
    try:
        schema_hash, meta, tensors = read_container(path, CACHE_MAGIC)
    except CheckpointError:
        return None
    if schema_hash != schema.schema_hash() or meta.get("source") != _source_stamp(source):
        return None
    categorical = {
        name: np.array(toks, dtype=object)[tensors[f"cat.{name}"]] if toks else np.array([], dtype=object)
        for name, toks in meta["tokens"].items()
    }
    return RecordTable(schema, tensors["continuous"], categorical, tensors["multi"], tensors["binary"])
