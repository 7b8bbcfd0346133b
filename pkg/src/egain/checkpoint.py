"""Single-file checkpoint container.

Layout::

    b"EGAINCKP" | uint64 LE header length | JSON header | float32 LE payloads

The header holds the format version, kind, config snapshot, step counter and
a tensor directory (name, dtype, shape, byte offset into the payload). Header
JSON is written with sorted keys so identical bundles give identical bytes.
"""
from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np
import torch

from egain.errors import CheckpointCorruptError, CheckpointVersionError

MAGIC = b"EGAINCKP"
FORMAT_VERSION = 1
_LEN = struct.Struct("<Q")


def write_container(path, header: dict, tensors: dict[str, torch.Tensor]) -> None:
    directory = []
    payloads = []
    offset = 0
    for name in sorted(tensors):
        arr = tensors[name].detach().cpu().to(torch.float32).numpy()
        raw = np.ascontiguousarray(arr, dtype="<f4").tobytes()
        directory.append({"name": name, "dtype": "float32", "shape": list(arr.shape),
                          "offset": offset, "nbytes": len(raw)})
        payloads.append(raw)
        offset += len(raw)
    doc = dict(header, format_version=FORMAT_VERSION, tensors=directory)
    head = json.dumps(doc, sort_keys=True, separators=(",", ":")).encode("utf-8")
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(MAGIC)
        fh.write(_LEN.pack(len(head)))
        fh.write(head)
        for raw in payloads:
            fh.write(raw)
    tmp.replace(path)


def read_container(path) -> tuple[dict, dict[str, torch.Tensor]]:
    data = Path(path).read_bytes()
    if len(data) < len(MAGIC) + _LEN.size or data[: len(MAGIC)] != MAGIC:
        raise CheckpointCorruptError(f"{path}: not a checkpoint (bad magic or too short)")
    (hlen,) = _LEN.unpack_from(data, len(MAGIC))
    start = len(MAGIC) + _LEN.size
    if start + hlen > len(data):
        raise CheckpointCorruptError(f"{path}: truncated header")
    try:
        header = json.loads(data[start: start + hlen].decode("utf-8"))
    except ValueError as exc:
        raise CheckpointCorruptError(f"{path}: unreadable header: {exc}") from exc
    version = header.get("format_version")
    if version != FORMAT_VERSION:
        raise CheckpointVersionError(
            f"{path}: checkpoint format version {version}, this build reads {FORMAT_VERSION}"
        )
    body = memoryview(data)[start + hlen:]
    tensors = {}
    for entry in header["tensors"]:
        if entry["dtype"] != "float32":
            raise CheckpointCorruptError(f"{path}: unsupported dtype {entry['dtype']}")
        lo, n = entry["offset"], entry["nbytes"]
        count = int(np.prod(entry["shape"], dtype=np.int64))
        if lo + n > len(body) or n != 4 * count:
            raise CheckpointCorruptError(f"{path}: truncated payload for {entry['name']}")
        arr = np.frombuffer(body[lo: lo + n], dtype="<f4").reshape(entry["shape"])
        tensors[entry["name"]] = torch.from_numpy(arr.astype(np.float32))
    expected = sum(e["nbytes"] for e in header["tensors"])
    if len(body) != expected:
        raise CheckpointCorruptError(f"{path}: payload is {len(body)} bytes, directory says {expected}")
    return header, tensors
