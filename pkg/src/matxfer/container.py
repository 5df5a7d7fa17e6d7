"""Versioned binary container for named tensors plus a JSON config block.

Layout (little-endian):

    bytes 0..3   magic ``MXTC``
    bytes 4..7   format version (uint32), currently 1
    bytes 8..11  length of the metadata block (uint32)
    metadata     UTF-8 JSON: {"kind", "config", "tensors": [{name, dtype, shape}]}
    body         raw tensor data, row-major, in directory order

Tensors are stored as float32 or float64 exactly as given, so a save/load
roundtrip is bit-exact.
"""

from __future__ import annotations

import json

import numpy as np

MAGIC = b"MXTC"
VERSION = 1

_DTYPES = {"float32": np.float32, "float64": np.float64}


class ContainerError(ValueError):
    """Malformed container file; the message carries the byte offset."""


def save(path, kind: str, config: dict, tensors: dict[str, np.ndarray]) -> None:
    directory = []
    for name, arr in tensors.items():
        if arr.dtype.name not in _DTYPES:
            raise ValueError(f"tensor '{name}' has unsupported dtype {arr.dtype}")
        directory.append({"name": name, "dtype": arr.dtype.name, "shape": list(arr.shape)})
    meta = json.dumps(
        {"kind": kind, "config": config, "tensors": directory},
        sort_keys=True, separators=(",", ":"),
    ).encode("utf-8")
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(np.uint32(VERSION).tobytes())
        f.write(np.uint32(len(meta)).tobytes())
        f.write(meta)
        for arr in tensors.values():
            f.write(np.ascontiguousarray(arr).tobytes())


def load(path, expect_kind: str | None = None):
    """Returns (kind, config, tensors) from a container file."""
    with open(path, "rb") as f:
        blob = f.read()
    if len(blob) < 12:
        raise ContainerError(f"{path}: truncated header at offset {len(blob)}")
    if blob[:4] != MAGIC:
        raise ContainerError(f"{path}: bad magic {blob[:4]!r} at offset 0")
    version = int(np.frombuffer(blob[4:8], np.uint32)[0])
    if version != VERSION:
        raise ContainerError(f"{path}: unsupported version {version} at offset 4")
    meta_len = int(np.frombuffer(blob[8:12], np.uint32)[0])
    if 12 + meta_len > len(blob):
        raise ContainerError(f"{path}: metadata extends past end of file at offset 12")
    try:
        meta = json.loads(blob[12:12 + meta_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ContainerError(f"{path}: corrupt metadata at offset 12: {exc}") from exc

    kind = meta.get("kind")
    if expect_kind is not None and kind != expect_kind:
        raise ContainerError(f"{path}: expected kind '{expect_kind}', found '{kind}'")

    tensors = {}
    offset = 12 + meta_len
    for entry in meta.get("tensors", []):
        name, dtype_name, shape = entry["name"], entry["dtype"], tuple(entry["shape"])
        if dtype_name not in _DTYPES:
            raise ContainerError(f"{path}: tensor '{name}' has bad dtype at offset {offset}")
        dtype = np.dtype(_DTYPES[dtype_name])
        nbytes = dtype.itemsize * int(np.prod(shape, dtype=np.int64)) if shape else dtype.itemsize
        if offset + nbytes > len(blob):
            raise ContainerError(
                f"{path}: tensor '{name}' ({shape}) truncated at offset {offset}")
        tensors[name] = np.frombuffer(blob[offset:offset + nbytes], dtype).reshape(shape).copy()
        offset += nbytes
    if offset != len(blob):
        raise ContainerError(f"{path}: {len(blob) - offset} trailing bytes at offset {offset}")
    return kind, meta.get("config", {}), tensors
