"""Checkpoint directories: ``manifest.json`` plus a raw little-endian f32 blob."""
from __future__ import annotations

import json
import os
from pathlib import Path
from typing import NamedTuple

import numpy as np

from .corpus import LabelCatalog, Vocabulary
from .encoder import Encoder, EncoderConfig, Task, head_names
from .errors import CheckpointError

FORMAT = "mlkd-checkpoint"
VERSION = 1
MANIFEST = "manifest.json"
BLOB = "params.bin"
_F32 = np.dtype("<f4")


class Checkpoint(NamedTuple):
    model: Encoder
    catalog: LabelCatalog
    vocab: Vocabulary
    meta: dict


def _atomic_write(path: Path, data: bytes):
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(data)
    os.replace(tmp, path)


def save_checkpoint(path, model: Encoder, catalog: LabelCatalog, vocab: Vocabulary, meta=None) -> Path:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    tensors, chunks, offset = {}, [], 0
    for name, arr in model.params.items():
        raw = np.ascontiguousarray(arr, dtype=_F32).tobytes()
        tensors[name] = {"shape": list(arr.shape), "dtype": "f32", "offset": offset, "length": len(raw)}
        chunks.append(raw)
        offset += len(raw)
    manifest = {
        "format": FORMAT,
        "version": VERSION,
        "config": model.config.to_dict(),
        "heads": {t.value: {"n_classes": k} for t, k in model.heads.items()},
        "catalog": catalog.to_dict(),
        "vocabulary": list(vocab.words),
        "meta": meta or {},
        "tensors": tensors,
    }
    _atomic_write(path / BLOB, b"".join(chunks))
    _atomic_write(path / MANIFEST, json.dumps(manifest, indent=1).encode("utf-8"))
    return path


def read_manifest(path) -> dict:
    path = Path(path)
    try:
        manifest = json.loads((path / MANIFEST).read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise CheckpointError(f"{path}: no {MANIFEST}") from None
    except json.JSONDecodeError as exc:
        raise CheckpointError(f"{path}: corrupt manifest ({exc.msg})") from None
    if manifest.get("format") != FORMAT:
        raise CheckpointError(f"{path}: not an {FORMAT} directory")
    if manifest.get("version") != VERSION:
        raise CheckpointError(
            f"{path}: checkpoint format version {manifest.get('version')} unsupported (expected {VERSION})"
        )
    return manifest


def load_checkpoint(path, expect_config: EncoderConfig | None = None) -> Checkpoint:
    path = Path(path)
    manifest = read_manifest(path)
    try:
        config = EncoderConfig(**manifest["config"])
    except TypeError as exc:
        raise CheckpointError(f"{path}: bad encoder config in manifest ({exc})") from None
    if expect_config is not None and config != expect_config:
        diff = {k: (v, getattr(config, k)) for k, v in expect_config.to_dict().items() if getattr(config, k) != v}
        raise CheckpointError(f"{path}: config mismatch (expected, found): {diff}")
    try:
        blob = (path / BLOB).read_bytes()
    except FileNotFoundError:
        raise CheckpointError(f"{path}: no {BLOB}") from None

    table = manifest["tensors"]
    expected = Encoder(
        EncoderConfig(**{**config.to_dict(), "vocab_size": 1, "max_len": 1})
    ).backbone_names()
    for task in manifest["heads"]:
        expected += list(head_names(Task(task)))
    missing = [n for n in expected if n not in table]
    if missing:
        raise CheckpointError(f"{path}: manifest lacks tensors {missing}")
    extra = [n for n in table if n not in expected]
    if extra:
        raise CheckpointError(f"{path}: manifest lists unknown tensors {extra}")

    params = {}
    for name in expected:
        entry = table[name]
        start, length = entry["offset"], entry["length"]
        if entry.get("dtype") != "f32":
            raise CheckpointError(f"{path}: tensor {name} has unsupported dtype {entry.get('dtype')}")
        if start + length > len(blob):
            raise CheckpointError(f"{path}: tensor {name} absent from {BLOB} (truncated file?)")
        shape = tuple(entry["shape"])
        if int(np.prod(shape)) * _F32.itemsize != length:
            raise CheckpointError(f"{path}: tensor {name} length disagrees with shape {shape}")
        params[name] = np.frombuffer(blob, dtype=_F32, count=length // 4, offset=start).reshape(shape).astype(np.float32)
    end = max((e["offset"] + e["length"] for e in table.values()), default=0)
    if end != len(blob):
        raise CheckpointError(f"{path}: {BLOB} has {len(blob) - end} unexpected trailing bytes")

    model = Encoder(config, params=params)
    for task, spec in manifest["heads"].items():
        if model.heads.get(Task(task)) != spec["n_classes"]:
            raise CheckpointError(f"{path}: head {task} size disagrees with manifest")
    catalog = LabelCatalog(**manifest["catalog"])
    vocab = Vocabulary(tuple(manifest["vocabulary"]))
    if len(vocab) != config.vocab_size:
        raise CheckpointError(f"{path}: vocabulary size {len(vocab)} != config vocab_size {config.vocab_size}")
    return Checkpoint(model, catalog, vocab, manifest.get("meta", {}))
