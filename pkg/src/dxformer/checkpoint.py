"""On-disk checkpoints: a text manifest, one raw payload, one JSON metadata file.

Layout of a checkpoint directory::

    manifest.txt   header lines, then one tab-separated line per tensor:
                   name, dtype, shape (comma separated), byte offset, byte count
    payload.bin    all tensors back to back, little-endian, row-major
    meta.json      model config, normalization stats, training state

Nothing time-dependent is written, so equal tensors give equal bytes.
"""

from __future__ import annotations

import json
import os
import shutil
from pathlib import Path
from typing import Mapping

import numpy as np

from .errors import DataError

MAGIC = "dxformer-checkpoint"
FORMAT_VERSION = 1
_DTYPES = {"float32": "<f4", "float64": "<f8", "int64": "<i8"}


def save_checkpoint(path, tensors: Mapping[str, np.ndarray], meta: dict) -> Path:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    if tmp.exists():
        shutil.rmtree(tmp)
    tmp.mkdir(parents=True)

    lines = [MAGIC, f"version {FORMAT_VERSION}", "endianness little", "order row-major"]
    offset = 0
    with open(tmp / "payload.bin", "wb") as fh:
        for name, arr in tensors.items():
            arr = np.asarray(arr)
            if arr.dtype.name not in _DTYPES:
                raise TypeError(f"cannot store {name} with dtype {arr.dtype}")
            if "\t" in name or "\n" in name:
                raise ValueError(f"tensor name {name!r} contains a separator")
            raw = np.ascontiguousarray(arr, dtype=np.dtype(_DTYPES[arr.dtype.name])).tobytes(order="C")
            fh.write(raw)
            shape = ",".join(str(n) for n in arr.shape)
            lines.append(f"{name}\t{arr.dtype.name}\t{shape}\t{offset}\t{len(raw)}")
            offset += len(raw)
    (tmp / "manifest.txt").write_text("\n".join(lines) + "\n", encoding="utf-8")
    (tmp / "meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n", encoding="utf-8")

    if path.exists():
        shutil.rmtree(path)
    os.replace(tmp, path)
    return path


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict]:
    path = Path(path)
    try:
        lines = (path / "manifest.txt").read_text(encoding="utf-8").splitlines()
        payload = (path / "payload.bin").read_bytes()
        meta = json.loads((path / "meta.json").read_text(encoding="utf-8"))
    except FileNotFoundError as exc:
        raise DataError(f"incomplete checkpoint at {path}: {exc.filename} missing") from exc

    if not lines or lines[0] != MAGIC:
        raise DataError(f"{path} is not a checkpoint directory")
    header = dict(line.split(" ", 1) for line in lines[1:4])
    if int(header.get("version", -1)) != FORMAT_VERSION:
        raise DataError(f"unsupported checkpoint version {header.get('version')}")
    if header.get("endianness") != "little":
        raise DataError("checkpoint payload must be little-endian")

    tensors: dict[str, np.ndarray] = {}
    for line in lines[4:]:
        if not line.strip():
            continue
        name, dtype, shape, offset, nbytes = line.split("\t")
        shape = tuple(int(n) for n in shape.split(",")) if shape else ()
        offset, nbytes = int(offset), int(nbytes)
        if offset + nbytes > len(payload):
            raise DataError(f"tensor {name} runs past the end of the payload")
        arr = np.frombuffer(payload, dtype=np.dtype(_DTYPES[dtype]), count=nbytes // np.dtype(dtype).itemsize, offset=offset)
        tensors[name] = arr.astype(np.dtype(dtype)).reshape(shape)
    return tensors, meta
