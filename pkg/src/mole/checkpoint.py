"""MOLE1 single-file checkpoints.

Layout (all integers little-endian)::

    b"MOLE1"                 5-byte magic
    uint64                   header length H
    H bytes                  UTF-8 JSON header
    payload                  raw row-major tensor bytes

The header's ``tensors`` directory lists ``{name, dtype, shape, offset,
length}`` with offsets relative to the payload start. Expert files use the
same container with ``kind: "expert"`` and only ``expert/{lang}/...`` tensors.
"""
from __future__ import annotations

import datetime as _dt
import json
import os
import struct
from pathlib import Path

import numpy as np

from .data.bpe import Vocabulary
from .model import Model, ModelConfig

MAGIC = b"MOLE1"
FORMAT_VERSION = 1
_DTYPES = {"<f4": np.dtype("<f4"), "<f8": np.dtype("<f8")}


class CheckpointError(ValueError):
    """Malformed or incompatible checkpoint content."""


def _write(path, header: dict, tensors: dict[str, np.ndarray]) -> None:
    directory, blobs, offset = [], [], 0
    for name in sorted(tensors):
        arr = np.asarray(tensors[name])
        dt = arr.dtype.newbyteorder("<")
        if dt.str not in _DTYPES:
            raise CheckpointError(f"{name}: unsupported dtype {arr.dtype}")
        raw = np.ascontiguousarray(arr, dtype=dt).tobytes()
        directory.append({"name": name, "dtype": dt.str, "shape": list(arr.shape),
                          "offset": offset, "length": len(raw)})
        blobs.append(raw)
        offset += len(raw)
    header = dict(header, format_version=FORMAT_VERSION, tensors=directory)
    head = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(head)))
        fh.write(head)
        for b in blobs:
            fh.write(b)
    os.replace(tmp, path)


def read(path) -> tuple[dict, dict[str, np.ndarray]]:
    """Header and tensors of any MOLE1 file, with full layout validation."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:5] != MAGIC:
        raise CheckpointError(f"{path}: not a MOLE1 file")
    if len(blob) < 13:
        raise CheckpointError(f"{path}: truncated header")
    (hlen,) = struct.unpack("<Q", blob[5:13])
    if 13 + hlen > len(blob):
        raise CheckpointError(f"{path}: header length {hlen} beyond end of file")
    try:
        header = json.loads(blob[13:13 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: bad header JSON ({exc})") from None
    if header.get("format_version") != FORMAT_VERSION:
        raise CheckpointError(f"{path}: unsupported format version {header.get('format_version')}")
    payload = memoryview(blob)[13 + hlen:]
    tensors: dict[str, np.ndarray] = {}
    spans = []
    for ent in header.get("tensors", []):
        try:
            name, dts, shape = ent["name"], ent["dtype"], tuple(ent["shape"])
            off, length = int(ent["offset"]), int(ent["length"])
        except (KeyError, TypeError, ValueError):
            raise CheckpointError(f"{path}: malformed directory entry {ent!r}") from None
        if dts not in _DTYPES:
            raise CheckpointError(f"{path}: {name}: unsupported dtype {dts}")
        dt = _DTYPES[dts]
        if any(s < 0 for s in shape) or length != int(np.prod(shape)) * dt.itemsize:
            raise CheckpointError(f"{path}: {name}: length {length} does not match shape {shape}")
        if off < 0 or off + length > len(payload):
            raise CheckpointError(f"{path}: {name}: bytes [{off}, {off + length}) out of bounds")
        if name in tensors:
            raise CheckpointError(f"{path}: duplicate tensor {name}")
        spans.append((off, off + length, name))
        tensors[name] = np.frombuffer(payload[off:off + length], dtype=dt).reshape(shape).copy()
    spans.sort()
    for (s0, e0, n0), (s1, e1, n1) in zip(spans, spans[1:]):
        if s1 < e0:
            raise CheckpointError(f"{path}: tensors {n0} and {n1} overlap")
    return header, tensors


def _now() -> str:
    return _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds")


def save(path, model: Model, vocab: Vocabulary | None = None, metadata: dict | None = None,
         dtype=None) -> None:
    """Write ``model`` (f32 by default; ``dtype=np.float64`` for verification dumps)."""
    state = model.state()
    if dtype is not None:
        state = {k: v.astype(dtype) for k, v in state.items()}
    header = {
        "kind": "model",
        "model_config": model.config.to_json(),
        "split_plan": model.config.plan.to_json(),
        "registry": model.config.registry.to_json(),
        "mode": model.mode,
        "nl_expert": model.nl_expert,
        "vocabulary": vocab.to_json() if vocab is not None else None,
        "metadata": dict(metadata or {}, created=(metadata or {}).get("created", _now())),
    }
    _write(path, header, state)


def load(path, dtype=None) -> tuple[Model, Vocabulary | None, dict]:
    header, tensors = read(path)
    if header.get("kind") != "model":
        raise CheckpointError(f"{path}: expected a model checkpoint, got {header.get('kind')!r}")
    try:
        config = ModelConfig.from_json(header["model_config"])
        dt = dtype or next(iter(tensors.values())).dtype
        model = Model(config, header["mode"], tensors, nl_expert=header.get("nl_expert", False),
                      dtype=dt)
    except (KeyError, ValueError, TypeError, StopIteration) as exc:
        raise CheckpointError(f"{path}: cannot build model ({exc})") from None
    vocab = Vocabulary.from_json(header["vocabulary"]) if header.get("vocabulary") else None
    return model, vocab, header


def expert_prefix(lang: str) -> str:
    return f"expert/{lang}/"


def export_expert(model_path, lang: str, out_path) -> int:
    """Copy one language's expert tensors into a standalone file; returns count."""
    header, tensors = read(model_path)
    if header.get("kind") != "model" or header.get("mode") != "mole":
        raise CheckpointError(f"{model_path}: expert export needs a MoLE model checkpoint")
    names = header["registry"]["names"]
    if lang not in names:
        raise CheckpointError(f"language {lang!r} not in registry {names}")
    pre = expert_prefix(lang)
    part = {k: v for k, v in tensors.items() if k.startswith(pre)}
    _write(out_path, {"kind": "expert", "lang": lang, "model_config": header["model_config"],
                      "metadata": {"source": str(model_path), "created": _now()}}, part)
    return len(part)


def import_expert(model_path, expert_path, out_path) -> int:
    """Write ``model_path`` with one expert replaced from ``expert_path``."""
    header, tensors = read(model_path)
    eh, et = read(expert_path)
    if eh.get("kind") != "expert":
        raise CheckpointError(f"{expert_path}: not an expert file")
    lang = eh["lang"]
    if header.get("mode") != "mole" or lang not in header["registry"]["names"]:
        raise CheckpointError(f"{model_path}: no slot for expert {lang!r}")
    pre = expert_prefix(lang)
    want = {k for k in tensors if k.startswith(pre)}
    if set(et) != want:
        raise CheckpointError(f"{expert_path}: tensor set does not match the model's {lang} expert")
    for k, v in et.items():
        if v.shape != tensors[k].shape or v.dtype != tensors[k].dtype:
            raise CheckpointError(f"{k}: {v.dtype}{v.shape} vs model {tensors[k].dtype}"
                                  f"{tensors[k].shape}")
    tensors.update(et)
    meta = dict(header.get("metadata", {}))
    meta.setdefault("imported_experts", []).append(lang)
    header = {k: v for k, v in header.items() if k not in ("tensors", "format_version")}
    header["metadata"] = meta
    _write(out_path, header, tensors)
    return len(et)
