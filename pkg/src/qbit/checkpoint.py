"""Versioned binary checkpoint container.

Byte layout (all integers little-endian):

    magic   4 bytes  b"QBCK"
    version u32      currently 1
    meta    u32 length + UTF-8 JSON (model config, quant spec, site flags)
    section model tensors
    section quantizer tensors

    section := u32 entry count, then per entry:
        u16 name length + UTF-8 name
        u8  ndim, then ndim * u32 dims
        raw float64 data (row-major, 8 * prod(dims) bytes)

Writing is deterministic: same parameters in, identical bytes out.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict
from pathlib import Path

import numpy as np

from .model import ModelParams, TransformerConfig, init_params
from .quantizers import ElasticParams, QuantSpec

MAGIC = b"QBCK"
VERSION = 1


def _pack_section(entries: list[tuple[str, np.ndarray]]) -> bytes:
    chunks = [struct.pack("<I", len(entries))]
    for name, data in entries:
        encoded = name.encode("utf-8")
        # asarray keeps 0-d scalars 0-d (ascontiguousarray would promote)
        arr = np.asarray(data, dtype="<f8", order="C")
        chunks.append(struct.pack("<H", len(encoded)))
        chunks.append(encoded)
        chunks.append(struct.pack("<B", arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        chunks.append(arr.tobytes())
    return b"".join(chunks)


def _unpack_section(buf: bytes, offset: int) -> tuple[dict[str, np.ndarray], int]:
    (count,) = struct.unpack_from("<I", buf, offset)
    offset += 4
    entries: dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = struct.unpack_from("<H", buf, offset)
        offset += 2
        name = buf[offset:offset + name_len].decode("utf-8")
        offset += name_len
        (ndim,) = struct.unpack_from("<B", buf, offset)
        offset += 1
        shape = struct.unpack_from(f"<{ndim}I", buf, offset)
        offset += 4 * ndim
        size = int(np.prod(shape)) if ndim else 1
        data = np.frombuffer(buf, dtype="<f8", count=size, offset=offset)
        offset += 8 * size
        entries[name] = data.reshape(shape).astype(np.float64)
    return entries, offset


def save_checkpoint(path, params: ModelParams, cfg: TransformerConfig,
                    spec: QuantSpec) -> None:
    meta = {
        "model": asdict(cfg),
        "quant": asdict(spec),
        "sites_initialized": {
            site: p.initialized
            for site, p in {**params.weight_quant, **params.act_quant}.items()
            if isinstance(p, ElasticParams)},
    }
    meta_blob = json.dumps(meta, sort_keys=True).encode("utf-8")
    payload = b"".join([
        MAGIC,
        struct.pack("<I", VERSION),
        struct.pack("<I", len(meta_blob)),
        meta_blob,
        _pack_section([(n, t.data) for n, t in params.tensors.items()]),
        _pack_section([(n, t.data) for n, t in params.named_quant_tensors()]),
    ])
    Path(path).write_bytes(payload)


def load_checkpoint(path) -> tuple[ModelParams, TransformerConfig, QuantSpec]:
    buf = Path(path).read_bytes()
    if buf[:4] != MAGIC:
        raise ValueError(f"{path}: not a checkpoint (bad magic)")
    (version,) = struct.unpack_from("<I", buf, 4)
    if version != VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    (meta_len,) = struct.unpack_from("<I", buf, 8)
    meta = json.loads(buf[12:12 + meta_len].decode("utf-8"))
    cfg = TransformerConfig(**meta["model"])
    spec = QuantSpec(**meta["quant"])

    model_tensors, offset = _unpack_section(buf, 12 + meta_len)
    quant_tensors, _ = _unpack_section(buf, offset)

    params = init_params(cfg, spec)
    if set(model_tensors) != set(params.tensors):
        raise ValueError(f"{path}: tensor names do not match the config")
    for name, data in model_tensors.items():
        params.tensors[name].assign_(data)
    expected_quant = {name for name, _ in params.named_quant_tensors()}
    if set(quant_tensors) != expected_quant:
        raise ValueError(f"{path}: quantizer state does not match the spec")
    for name, tensor in params.named_quant_tensors():
        tensor.assign_(quant_tensors[name])
    for site, initialized in meta["sites_initialized"].items():
        target = params.weight_quant.get(site) or params.act_quant.get(site)
        if isinstance(target, ElasticParams):
            target.initialized = bool(initialized)
    return params, cfg, spec
