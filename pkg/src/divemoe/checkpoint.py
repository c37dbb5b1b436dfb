"""Single-file model checkpoints: canonical JSON header + raw float32 payload.

Layout: 8-byte magic, uint64 little-endian header length, the header JSON
(sorted keys, compact separators), then every tensor's bytes concatenated in
ascending parameter-name order. The canonical form makes save(load(f)) == f
byte for byte.
"""

import json
import os
import struct

import numpy as np

from . import tensor as T
from .errors import CompatibilityError, FormatError, ParameterError
from .model import DenseModel, ModelConfig
from .moe import MoeModel
from .retrain import LoraAdapter

MAGIC = b"DIVECKPT"
FORMAT_VERSION = 1


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, np.floating):
        return float(obj)
    if isinstance(obj, np.ndarray):
        return [_jsonable(v) for v in obj.tolist()]
    return obj


def _header_bytes(header: dict) -> bytes:
    return json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")


def save_checkpoint(model, path):
    """Write a dense or MoE model (parameters, config, meta, adapters)."""
    params = model.parameters()
    names = sorted(params)
    tensors = {}
    blobs = []
    offset = 0
    for name in names:
        data = params[name].data
        if data.dtype != np.float32:
            raise ParameterError("parameter %s is %s, checkpoints hold float32" % (name, data.dtype))
        blob = np.ascontiguousarray(data, dtype="<f4").tobytes()
        tensors[name] = {"shape": list(data.shape), "dtype": "<f4", "offset": offset}
        blobs.append(blob)
        offset += len(blob)
    header = {
        "version": FORMAT_VERSION,
        "kind": "moe" if isinstance(model, MoeModel) else "dense",
        "config": _jsonable(model.config.to_dict()),
        "meta": _jsonable(model.meta),
        "tensors": tensors,
    }
    if isinstance(model, MoeModel):
        header["adapters"] = [
            {"target": ad.target, "rank": ad.rank, "alpha": ad.alpha, "dropout": ad.dropout}
            for _, ad in sorted(model.adapters.items())
        ]
    hb = _header_bytes(header)
    tmp = "%s.tmp.%d" % (path, os.getpid())
    with open(tmp, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(hb)))
        fh.write(hb)
        for blob in blobs:
            fh.write(blob)
    os.replace(tmp, path)


def read_header(path) -> dict:
    """Parse and validate just the header; cheap metadata peek."""
    with open(path, "rb") as fh:
        head = fh.read(16)
        if len(head) < 16 or head[:8] != MAGIC:
            raise FormatError("%s is not a checkpoint (bad magic)" % path)
        (hlen,) = struct.unpack("<Q", head[8:16])
        hb = fh.read(hlen)
    if len(hb) != hlen:
        raise FormatError("checkpoint header is truncated")
    try:
        header = json.loads(hb.decode("utf-8"))
    except (UnicodeDecodeError, ValueError) as e:
        raise FormatError("checkpoint header is not valid JSON: %s" % e) from e
    version = header.get("version")
    if version is None or "tensors" not in header or "kind" not in header:
        raise FormatError("checkpoint header is missing required fields")
    if version != FORMAT_VERSION:
        raise CompatibilityError(
            "checkpoint format version %r; this build reads version %d" % (version, FORMAT_VERSION)
        )
    if header["kind"] not in ("dense", "moe"):
        raise FormatError("unknown model kind %r" % header["kind"])
    return header


def load_checkpoint(path):
    """Rebuild the saved model; bitwise inverse of save_checkpoint."""
    header = read_header(path)
    with open(path, "rb") as fh:
        raw = fh.read()
    hlen = struct.unpack("<Q", raw[8:16])[0]
    payload = raw[16 + hlen :]

    try:
        config = ModelConfig(**header["config"])
    except (TypeError, ParameterError) as e:
        raise FormatError("invalid model config in header: %s" % e) from e

    cursor = 0
    params = {}
    for name in sorted(header["tensors"]):
        entry = header["tensors"][name]
        if entry.get("dtype") != "<f4":
            raise FormatError("tensor %s has unsupported dtype %r" % (name, entry.get("dtype")))
        if entry["offset"] != cursor:
            raise FormatError(
                "tensor %s at offset %d, canonical order requires %d" % (name, entry["offset"], cursor)
            )
        shape = tuple(int(s) for s in entry["shape"])
        nbytes = int(np.prod(shape, dtype=np.int64)) * 4 if shape else 4
        if cursor + nbytes > len(payload):
            raise FormatError("payload is truncated at tensor %s" % name)
        arr = np.frombuffer(payload, dtype="<f4", count=nbytes // 4, offset=cursor)
        params[name] = T.Tensor(arr.reshape(shape).copy(), requires_grad=True, name=name)
        cursor += nbytes
    if cursor != len(payload):
        raise FormatError(
            "payload holds %d bytes but the index accounts for %d" % (len(payload), cursor)
        )

    meta = header.get("meta") or {}
    if header["kind"] == "dense":
        return DenseModel(config, params, meta=meta)
    moe = MoeModel(config, params, meta=meta)
    for ad in header.get("adapters", []):
        target = ad["target"]
        if target + ".lora_a" not in params or target + ".lora_b" not in params:
            raise FormatError("adapter on %s has no lora tensors in the index" % target)
        moe.adapters[target] = LoraAdapter(
            target=target, rank=int(ad["rank"]), alpha=float(ad["alpha"]), dropout=float(ad["dropout"])
        )
    return moe
