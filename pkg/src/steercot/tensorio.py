"""Binary tensor files.

Layout: magic ``b"SCTF"``, a little-endian uint32 byte count, a UTF-8 JSON
header, then each tensor as row-major little-endian float32 in declared order.
The header lists names, shapes and byte offsets (relative to the data start); a
plain-text ``<file>.manifest.txt`` repeats that table.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .errors import InputError, SchemaError

MAGIC = b"SCTF"


def write_tensor_file(path: str | Path, header: dict, tensors: dict[str, np.ndarray]) -> None:
    path = Path(path)
    index = []
    offset = 0
    blobs = []
    for name, arr in tensors.items():
        a = np.ascontiguousarray(np.asarray(arr, dtype="<f4"))
        if not np.isfinite(a).all():
            raise InputError(f"tensor {name} has non-finite entries")
        blobs.append(a.tobytes())
        index.append({"name": name, "shape": list(a.shape), "offset": offset, "nbytes": a.nbytes})
        offset += a.nbytes
    head = json.dumps({**header, "tensors": index}, sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<I", len(head)))
        f.write(head)
        for b in blobs:
            f.write(b)
    with open(str(path) + ".manifest.txt", "w", encoding="utf-8") as f:
        f.write("name\tshape\toffset\tnbytes\n")
        for row in index:
            shape = "x".join(str(s) for s in row["shape"]) or "scalar"
            f.write(f"{row['name']}\t{shape}\t{row['offset']}\t{row['nbytes']}\n")


def read_tensor_file(path: str | Path) -> tuple[dict, dict[str, np.ndarray]]:
    data = Path(path).read_bytes()
    if data[:4] != MAGIC:
        raise SchemaError(f"{path}: not a tensor file")
    if len(data) < 8:
        raise SchemaError(f"{path}: truncated tensor file")
    (n,) = struct.unpack("<I", data[4:8])
    try:
        header = json.loads(data[8 : 8 + n].decode("utf-8"))
        index = header.pop("tensors")
    except (UnicodeDecodeError, json.JSONDecodeError, KeyError, AttributeError) as e:
        raise SchemaError(f"{path}: corrupt tensor header ({e})") from None
    base = 8 + n
    tensors = {}
    for row in index:
        start = base + row["offset"]
        if start + row["nbytes"] > len(data) or row["nbytes"] != 4 * int(np.prod(row["shape"], dtype=np.int64)):
            raise SchemaError(f"{path}: tensor {row['name']} is truncated or mis-sized")
        arr = np.frombuffer(data[start : start + row["nbytes"]], dtype="<f4").reshape(row["shape"])
        tensors[row["name"]] = arr.astype(np.float32)
    return header, tensors
