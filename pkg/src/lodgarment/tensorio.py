"""JSON header + little-endian binary blob persistence.

``save(path, header, tensors)`` writes ``path`` (JSON) and ``path.bin``.
Tensors are stored row-major, in the order given, each as little-endian
``<f8`` (floats) or ``<i8`` (integers). The JSON header records name,
dtype, shape and byte offset for every tensor.
"""
import json
from pathlib import Path

import numpy as np

_DTYPES = {"f8": "<f8", "i8": "<i8"}


def _kind(a):
    return "i8" if np.issubdtype(a.dtype, np.integer) else "f8"


def save(path, header: dict, tensors: dict):
    path = Path(path)
    blob_path = path.with_name(path.name + ".bin")
    entries = []
    offset = 0
    chunks = []
    for name, arr in tensors.items():
        arr = np.asarray(arr)
        kind = _kind(arr)
        raw = np.ascontiguousarray(arr, dtype=_DTYPES[kind]).tobytes()
        entries.append({"name": name, "dtype": kind, "shape": list(arr.shape), "offset": offset})
        chunks.append(raw)
        offset += len(raw)
    doc = {"header": header, "tensors": entries, "blob": blob_path.name, "nbytes": offset}
    tmp = blob_path.with_name(blob_path.name + ".tmp")
    tmp.write_bytes(b"".join(chunks))
    tmp.replace(blob_path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(json.dumps(doc, indent=2, sort_keys=True))
    tmp.replace(path)


def load(path):
    path = Path(path)
    doc = json.loads(path.read_text())
    blob = (path.parent / doc["blob"]).read_bytes()
    if len(blob) != doc["nbytes"]:
        raise ValueError(f"{path}: blob has {len(blob)} bytes, header says {doc['nbytes']}")
    tensors = {}
    for e in doc["tensors"]:
        dt = np.dtype(_DTYPES[e["dtype"]])
        count = int(np.prod(e["shape"])) if e["shape"] else 1
        arr = np.frombuffer(blob, dtype=dt, count=count, offset=e["offset"]).reshape(e["shape"])
        tensors[e["name"]] = arr.astype(dt.newbyteorder("="))
    return doc["header"], tensors
