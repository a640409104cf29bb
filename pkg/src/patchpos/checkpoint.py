"""Deterministic binary checkpoints: JSON manifest + raw array payload.

The same model/optimizer state always serializes to identical bytes, so
save -> load -> save round-trips are byte-stable.
"""
from __future__ import annotations

import json
import logging
import struct

import numpy as np

log = logging.getLogger(__name__)

MAGIC = b"MMCKPT1\0"


class CheckpointError(RuntimeError):
    pass


def save_checkpoint(path, arrays: dict[str, np.ndarray], meta: dict) -> None:
    """Write named arrays (sorted by name) plus a JSON metadata block."""
    names = sorted(arrays)
    manifest = {
        "meta": meta,
        "arrays": [{"name": n, "shape": list(arrays[n].shape), "dtype": str(arrays[n].dtype)}
                   for n in names],
    }
    blob = json.dumps(manifest, sort_keys=True).encode("utf-8")
    try:
        with open(path, "wb") as f:
            f.write(MAGIC)
            f.write(struct.pack("<Q", len(blob)))
            f.write(blob)
            for n in names:
                f.write(np.ascontiguousarray(arrays[n]).tobytes())
    except OSError as e:
        raise CheckpointError(f"cannot write checkpoint '{path}': {e}") from e


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict]:
    try:
        with open(path, "rb") as f:
            if f.read(8) != MAGIC:
                raise CheckpointError(f"'{path}' is not a checkpoint file")
            (n,) = struct.unpack("<Q", f.read(8))
            manifest = json.loads(f.read(n).decode("utf-8"))
            arrays = {}
            for entry in manifest["arrays"]:
                shape = tuple(entry["shape"])
                dtype = np.dtype(entry["dtype"])
                count = int(np.prod(shape)) if shape else 1
                buf = f.read(count * dtype.itemsize)
                if len(buf) != count * dtype.itemsize:
                    raise CheckpointError(f"'{path}' truncated at array '{entry['name']}'")
                arrays[entry["name"]] = np.frombuffer(buf, dtype=dtype).reshape(shape).copy()
    except OSError as e:
        raise CheckpointError(f"cannot read checkpoint '{path}': {e}") from e
    return arrays, manifest["meta"]


def check_config_hash(meta: dict, expected_hash: str, path) -> None:
    got = meta.get("config_hash")
    if got != expected_hash:
        log.warning("checkpoint '%s' was written under a different config "
                    "(hash %s, current %s)", path, got, expected_hash)
