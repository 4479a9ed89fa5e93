"""Single-file checkpoint container.

Layout::

    b"NDGRADCK"                 8-byte magic
    uint64 little-endian        header length in bytes
    header                      UTF-8 JSON (sorted keys)
    payload                     little-endian buffers in header order

The header lists every stored array as ``{"name", "section", "shape",
"dtype", "offset", "nbytes"}`` where ``section`` is ``param``, ``buffer``,
``adam.m``, ``adam.v`` or a caller-defined extra section.  Offsets are relative to the payload start.
"""
from __future__ import annotations

import hashlib
import json
import os
import struct
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from ..errors import DataError

MAGIC = b"NDGRADCK"
FORMAT_VERSION = 1


@dataclass
class Checkpoint:
    header: dict
    params: dict = field(default_factory=dict)
    buffers: dict = field(default_factory=dict)
    adam_m: dict = field(default_factory=dict)
    adam_v: dict = field(default_factory=dict)
    extra: dict = field(default_factory=dict)

    @property
    def meta(self) -> dict:
        return self.header.get("meta", {})


def _le(arr: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(arr, dtype=arr.dtype.newbyteorder("<"))


def save_checkpoint(path, model, optimizer=None, meta: Optional[dict] = None,
                    global_step: int = 0, rng_state: Optional[dict] = None,
                    extra: Optional[dict] = None) -> str:
    """Write ``model`` (and optional Adam state) to ``path``; returns its sha256.

    ``extra`` maps additional section names to ``{name: array}`` dicts.
    """
    entries, blobs, offset = [], [], 0

    def put(name, section, arr):
        nonlocal offset
        arr = _le(np.asarray(arr))
        raw = arr.tobytes()
        entries.append({"name": name, "section": section, "shape": list(arr.shape),
                        "dtype": arr.dtype.str, "offset": offset, "nbytes": len(raw)})
        blobs.append(raw)
        offset += len(raw)

    for name, p in model.named_parameters():
        put(name, "param", p.data)
    for name, b in model.named_buffers():
        put(name, "buffer", b)
    optim = None
    if optimizer is not None:
        for name, _ in optimizer.params:
            put(name, "adam.m", optimizer.m[name])
            put(name, "adam.v", optimizer.v[name])
        optim = optimizer.hyperparams()
    for section, arrays in (extra or {}).items():
        for name, arr in arrays.items():
            put(name, section, arr)
    header = {
        "format_version": FORMAT_VERSION,
        "tensors": entries,
        "param_shapes": {n: list(p.shape) for n, p in model.named_parameters()},
        "param_count": model.num_parameters(),
        "optimizer": optim,
        "global_step": int(global_step),
        "rng_state": rng_state,
        "meta": meta or {},
    }
    head = json.dumps(header, sort_keys=True).encode("utf-8")
    data = MAGIC + struct.pack("<Q", len(head)) + head + b"".join(blobs)
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(data)
    os.replace(tmp, path)
    return hashlib.sha256(data).hexdigest()


def load_checkpoint(path) -> Checkpoint:
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:8] != MAGIC:
        raise DataError("not a checkpoint file (bad magic)", path=path)
    (hlen,) = struct.unpack("<Q", data[8:16])
    header = json.loads(data[16:16 + hlen].decode("utf-8"))
    if header.get("format_version") != FORMAT_VERSION:
        raise DataError(f"unsupported checkpoint version {header.get('format_version')}", path=path)
    base = 16 + hlen
    ck = Checkpoint(header=header)
    sections = {"param": ck.params, "buffer": ck.buffers, "adam.m": ck.adam_m, "adam.v": ck.adam_v}
    for e in header["tensors"]:
        if e["section"] not in sections:
            sections[e["section"]] = ck.extra.setdefault(e["section"], {})
        start = base + e["offset"]
        arr = np.frombuffer(data, dtype=np.dtype(e["dtype"]), count=int(np.prod(e["shape"], dtype=np.int64)),
                            offset=start).reshape(e["shape"])
        sections[e["section"]][e["name"]] = arr.astype(arr.dtype.newbyteorder("="))
    return ck


def restore_model(model, ck: Checkpoint) -> None:
    state = dict(ck.params)
    state.update(ck.buffers)
    model.load_state_dict(state)
    if model.num_parameters() != ck.header["param_count"]:
        raise DataError("parameter count differs from checkpoint header", field="param_count")


def file_sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()
