"""Versioned binary checkpoints.

Layout::

    b"PRCK" | u32 version | u64 header_len | header (UTF-8 JSON) | payload

The JSON header carries the model config, a stage label, seed lineage, a
CRC-32 of the payload and a directory of ``name / dtype / shape / offset /
nbytes`` entries.  Tensors are little-endian IEEE-754, f64 or f32.
"""

from __future__ import annotations

import json
import struct
import zlib
from pathlib import Path
from typing import Optional

import numpy as np

from .autodiff import Tensor
from .errors import (BadMagicError, ChecksumError, DirectoryMismatchError,
                     TruncatedCheckpointError, UnsupportedVersionError)
from .model import LayerWeights, ModelConfig, TransformerModel

MAGIC = b"PRCK"
VERSION = 1
_PREFIX = struct.Struct("<4sIQ")
_DTYPES = {"f64": np.dtype("<f8"), "f32": np.dtype("<f4")}


def save_checkpoint(model: TransformerModel, path, precision: str = "f64",
                    stage: str = "", lineage: Optional[dict] = None) -> None:
    if precision not in _DTYPES:
        raise ValueError(f"unknown precision {precision!r}")
    dt = _DTYPES[precision]
    directory, chunks, offset = [], [], 0
    for name, t in model.named_parameters():
        raw = np.ascontiguousarray(t.data, dtype=dt).tobytes()
        directory.append({"name": name, "dtype": precision, "shape": list(t.shape),
                          "offset": offset, "nbytes": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    payload = b"".join(chunks)
    header = {
        "format": "recprune-checkpoint",
        "model_config": model.config.to_dict(),
        "stage": stage,
        "lineage": lineage or {},
        "payload_bytes": len(payload),
        "payload_crc32": zlib.crc32(payload),
        "tensors": directory,
    }
    blob = json.dumps(header, indent=1, sort_keys=True).encode("utf-8")
    Path(path).write_bytes(_PREFIX.pack(MAGIC, VERSION, len(blob)) + blob + payload)


def _read_header(data: bytes, path) -> tuple[dict, int]:
    if len(data) < _PREFIX.size:
        if data[:4] != MAGIC[: len(data[:4])]:
            raise BadMagicError(f"{path}: not a checkpoint (bad magic)")
        raise TruncatedCheckpointError(f"{path}: file shorter than the fixed prefix")
    magic, version, hlen = _PREFIX.unpack_from(data)
    if magic != MAGIC:
        raise BadMagicError(f"{path}: bad magic {magic!r}")
    if version != VERSION:
        raise UnsupportedVersionError(f"{path}: unsupported format version {version}")
    end = _PREFIX.size + hlen
    if len(data) < end:
        raise TruncatedCheckpointError(f"{path}: header truncated")
    try:
        header = json.loads(data[_PREFIX.size:end].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise DirectoryMismatchError(f"{path}: unreadable header ({exc})") from None
    return header, end


def inspect_checkpoint(path) -> dict:
    data = Path(path).read_bytes()
    header, _ = _read_header(data, path)
    return header


def load_checkpoint(path) -> TransformerModel:
    data = Path(path).read_bytes()
    header, start = _read_header(data, path)
    payload = data[start:]
    expected = header.get("payload_bytes")
    if expected is None or len(payload) < expected:
        raise TruncatedCheckpointError(f"{path}: payload truncated ({len(payload)} of {expected} bytes)")
    if len(payload) > expected:
        raise DirectoryMismatchError(f"{path}: {len(payload) - expected} trailing bytes")
    if zlib.crc32(payload) != header.get("payload_crc32"):
        raise ChecksumError(f"{path}: payload checksum mismatch")

    tensors: dict[str, np.ndarray] = {}
    for entry in header["tensors"]:
        dt = _DTYPES.get(entry.get("dtype"))
        if dt is None:
            raise DirectoryMismatchError(f"{path}: unknown dtype {entry.get('dtype')!r}")
        shape = tuple(entry["shape"])
        n = int(np.prod(shape)) * dt.itemsize
        off = entry["offset"]
        if n != entry["nbytes"] or off < 0 or off + n > len(payload):
            raise DirectoryMismatchError(f"{path}: entry {entry['name']} inconsistent with payload")
        arr = np.frombuffer(payload, dtype=dt, count=n // dt.itemsize, offset=off).reshape(shape)
        tensors[entry["name"]] = arr.astype(np.float64)
    return _assemble(ModelConfig.from_dict(header["model_config"]), tensors, path)


def _assemble(cfg: ModelConfig, tensors: dict, path) -> TransformerModel:
    def take(name):
        if name not in tensors:
            raise DirectoryMismatchError(f"{path}: missing tensor {name}")
        return Tensor(tensors.pop(name), requires_grad=True)

    def maybe(name):
        return take(name) if name in tensors else None

    emb = take("token_embedding")
    layers = []
    for i in range(cfg.n_layers):
        p = f"layers.{i}."
        layers.append(LayerWeights(
            wq=take(p + "wq"), wk=take(p + "wk"), wv=take(p + "wv"), wo=take(p + "wo"),
            w_gate=take(p + "w_gate"), w_up=take(p + "w_up"), w_down=take(p + "w_down"),
            attn_norm=take(p + "attn_norm"), mlp_norm=take(p + "mlp_norm"),
            b_gate=maybe(p + "b_gate"), b_up=maybe(p + "b_up"), b_down=maybe(p + "b_down"),
        ))
    final = take("final_norm")
    head = None if cfg.tie_embeddings else take("lm_head")
    if tensors:
        raise DirectoryMismatchError(f"{path}: unexpected tensors {sorted(tensors)}")
    model = TransformerModel(config=cfg, token_embedding=emb, layers=layers,
                             final_norm=final, untied_lm_head=head)
    _check_shapes(model, path)
    return model


def _check_shapes(model: TransformerModel, path) -> None:
    cfg, d = model.config, model.d_model
    if model.token_embedding.shape != (cfg.vocab_size, cfg.d_model) or model.final_norm.shape != (d,):
        raise DirectoryMismatchError(f"{path}: embedding/norm shapes disagree with config")
    for i, layer in enumerate(model.layers):
        inner, dff = layer.wq.shape[1], layer.w_up.shape[1]
        ok = (inner % cfg.d_k == 0 and inner > 0
              and layer.wq.shape == layer.wk.shape == layer.wv.shape == (d, inner)
              and layer.wo.shape == (inner, d)
              and layer.w_gate.shape == layer.w_up.shape == (d, dff)
              and layer.w_down.shape == (dff, d)
              and layer.attn_norm.shape == layer.mlp_norm.shape == (d,))
        if ok and layer.b_up is not None:
            ok = layer.b_gate.shape == layer.b_up.shape == (dff,) and layer.b_down.shape == (d,)
        if not ok:
            raise DirectoryMismatchError(f"{path}: layer {i} shapes are inconsistent")
    if model.untied_lm_head is not None and model.untied_lm_head.shape != (d, cfg.vocab_size):
        raise DirectoryMismatchError(f"{path}: lm_head shape disagrees with config")
