"""Binary checkpoint format.

Layout (all integers little-endian)::

    b"GSHD1"
    u32 record_count
    record_count x (u32 byte_length, UTF-8 JSON text)   # record 0: header, then one per layer
    float64 blobs for every tensor, in manifest order

The header record holds ``input_shape``; each layer record holds ``kind``,
``name``, ``config`` and the ``[key, shape]`` list of its tensors.
"""

from __future__ import annotations

import io
import json
import os
import struct

import numpy as np

from ..errors import FormatError
from .model import LayerSpec, Model

MAGIC = b"GSHD1"
_U32 = struct.Struct("<I")


def write_records(buf, records) -> None:
    buf.write(_U32.pack(len(records)))
    for rec in records:
        data = json.dumps(rec, sort_keys=True, separators=(",", ":")).encode("utf-8")
        buf.write(_U32.pack(len(data)))
        buf.write(data)


def read_exact(buf, n: int, what: str) -> bytes:
    data = buf.read(n)
    if len(data) != n:
        raise FormatError(f"truncated file while reading {what} ({len(data)} of {n} bytes)")
    return data


def read_records(buf) -> list:
    (count,) = _U32.unpack(read_exact(buf, 4, "record count"))
    records = []
    for i in range(count):
        (length,) = _U32.unpack(read_exact(buf, 4, f"record {i} length"))
        raw = read_exact(buf, length, f"record {i}")
        try:
            records.append(json.loads(raw.decode("utf-8")))
        except (UnicodeDecodeError, json.JSONDecodeError) as e:
            raise FormatError(f"record {i} is not valid UTF-8 JSON: {e}") from None
    return records


def read_blob(buf, shape, what: str) -> np.ndarray:
    n = int(np.prod(shape, dtype=np.int64))
    raw = read_exact(buf, 8 * n, what)
    return np.frombuffer(raw, dtype="<f8").astype(np.float64).reshape(shape)


def checkpoint_bytes(model: Model) -> bytes:
    buf = io.BytesIO()
    buf.write(MAGIC)
    records = [{"input_shape": list(model.input_shape), "layer_count": len(model.layers)}]
    for spec in model.layers:
        keys = [spec.param_key(p) for p in spec.impl.params + spec.impl.buffers]
        records.append({
            "kind": spec.kind,
            "name": spec.name,
            "config": spec.config,
            "tensors": [[k, list(model.tensor(k).shape)] for k in keys],
        })
    write_records(buf, records)
    for key in model.tensor_keys():
        buf.write(np.ascontiguousarray(model.tensor(key), dtype="<f8").tobytes())
    return buf.getvalue()


def save_checkpoint(model: Model, path) -> None:
    with open(path, "wb") as fh:
        fh.write(checkpoint_bytes(model))


def read_manifest(source) -> tuple[dict, dict[str, np.ndarray]]:
    """Parse a checkpoint without building a Model (no consistency checks).

    ``source`` is a path or raw bytes. Returns ``(manifest, tensors)``.
    """
    if isinstance(source, (bytes, bytearray)):
        buf = io.BytesIO(source)
    else:
        with open(os.fspath(source), "rb") as fh:
            buf = io.BytesIO(fh.read())
    if read_exact(buf, len(MAGIC), "magic") != MAGIC:
        raise FormatError("not a GSHD1 checkpoint (bad magic)")
    records = read_records(buf)
    if not records or "input_shape" not in records[0]:
        raise FormatError("missing checkpoint header record")
    layers, tensor_list = [], []
    for rec in records[1:]:
        try:
            layers.append({"kind": rec["kind"], "name": rec["name"], "config": rec["config"]})
            tensor_list += [(k, tuple(s)) for k, s in rec["tensors"]]
        except (KeyError, TypeError) as e:
            raise FormatError(f"malformed layer record: {e}") from None
    tensors = {k: read_blob(buf, s, k) for k, s in tensor_list}
    if buf.read(1):
        raise FormatError("trailing bytes after tensor data")
    manifest = {
        "input_shape": records[0]["input_shape"],
        "layers": layers,
        "tensors": [[k, list(s)] for k, s in tensor_list],
    }
    return manifest, tensors


def load_checkpoint(source) -> Model:
    manifest, tensors = read_manifest(source)
    layers = tuple(LayerSpec(l["kind"], l["name"], l["config"]) for l in manifest["layers"])
    params, buffers = {}, {}
    try:
        for spec in layers:
            for p in spec.impl.params:
                params[spec.param_key(p)] = tensors[spec.param_key(p)]
            for p in spec.impl.buffers:
                buffers[spec.param_key(p)] = tensors[spec.param_key(p)]
    except KeyError as e:
        raise FormatError(f"checkpoint lacks tensor or layer kind {e}") from None
    return Model(layers, tuple(manifest["input_shape"]), params, buffers)
