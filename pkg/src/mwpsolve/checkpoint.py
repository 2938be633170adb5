"""Deterministic binary checkpoints.

Layout: magic, 8-byte little-endian header length, UTF-8 JSON header (sorted
keys), then the raw C-order little-endian float64 array payloads back to
back. No timestamps anywhere, so identical state serializes byte-identically
and loads back bit-exactly.

The header carries the model config, the vocabulary, and arbitrary JSON
extras (epoch counters, optimizer scalars, discovered equations, ...); every
numpy array travels in the payload section under its dotted name.
"""

from __future__ import annotations

import json
from dataclasses import asdict

import numpy as np

from .autodiff import Parameter
from .corpus import Vocab
from .model import ModelConfig, PolicyParams

MAGIC = b"MWPSOLVE1\n"
FORMAT_VERSION = 1


def _array_payload(arrays: dict[str, np.ndarray]):
    manifest = []
    blobs = []
    offset = 0
    for name in sorted(arrays):
        arr = np.ascontiguousarray(arrays[name], dtype="<f8")
        manifest.append({"name": name, "shape": list(arr.shape), "offset": offset})
        blob = arr.tobytes()
        blobs.append(blob)
        offset += len(blob)
    return manifest, b"".join(blobs)


def save_bundle(path, arrays: dict[str, np.ndarray], meta: dict) -> None:
    manifest, payload = _array_payload(arrays)
    header = dict(meta)
    header["format_version"] = FORMAT_VERSION
    header["arrays"] = manifest
    head = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(len(head).to_bytes(8, "little"))
        fh.write(head)
        fh.write(payload)


def load_bundle(path) -> tuple[dict[str, np.ndarray], dict]:
    with open(path, "rb") as fh:
        if fh.read(len(MAGIC)) != MAGIC:
            raise ValueError(f"{path} is not a checkpoint file")
        head_len = int.from_bytes(fh.read(8), "little")
        header = json.loads(fh.read(head_len).decode("utf-8"))
        payload = fh.read()
    if header.get("format_version") != FORMAT_VERSION:
        raise ValueError(f"unsupported checkpoint version {header.get('format_version')}")
    arrays = {}
    for entry in header.pop("arrays"):
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        start = entry["offset"]
        arr = np.frombuffer(payload, dtype="<f8", count=count, offset=start)
        arrays[entry["name"]] = arr.reshape(shape).copy()
    return arrays, header


def save_model(path, params: PolicyParams, vocab: Vocab, extra: dict | None = None) -> None:
    arrays = {name: p.data for name, p in params.parameters().items()}
    meta = {
        "model_config": asdict(params.config),
        "vocab": vocab.token_to_id,
        "extra": extra or {},
    }
    save_bundle(path, arrays, meta)


def load_model(path) -> tuple[PolicyParams, Vocab, dict]:
    arrays, header = load_bundle(path)
    config = ModelConfig(**header["model_config"])
    params = PolicyParams.init(config, seed=0)
    for name, p in params.parameters().items():
        if name not in arrays:
            raise ValueError(f"checkpoint missing array {name!r}")
        if arrays[name].shape != p.data.shape:
            raise ValueError(f"checkpoint array {name!r} has shape "
                             f"{arrays[name].shape}, expected {p.data.shape}")
        p.data = arrays[name]
    vocab = Vocab({tok: int(i) for tok, i in header["vocab"].items()})
    return params, vocab, header.get("extra", {})
