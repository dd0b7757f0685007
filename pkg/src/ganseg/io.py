"""Artifact serialization and seeding utilities.

Checkpoints use a small custom container instead of pickle so that the
bytes written for a given (weights, metadata) pair are identical across
runs: a JSON header with sorted keys followed by raw little-endian array
buffers. Identical content therefore hashes identically, which is what
the pipeline manifest relies on for reproducibility checks.
"""

from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path

import numpy as np

MAGIC = b"GANSEG01"


class CheckpointError(RuntimeError):
    """Raised when a checkpoint cannot be read or fails validation."""


def _canonical_chunks(arrays: dict[str, np.ndarray], meta: dict):
    """Yield the byte chunks of the container in canonical order."""
    index = []
    buffers = []
    for name in sorted(arrays):
        arr = np.ascontiguousarray(arrays[name])
        if arr.dtype.byteorder == ">":
            arr = arr.astype(arr.dtype.newbyteorder("<"))
        index.append({"name": name, "dtype": arr.dtype.str, "shape": list(arr.shape)})
        buffers.append(arr.tobytes())
    header = json.dumps({"meta": meta, "arrays": index}, sort_keys=True,
                        separators=(",", ":")).encode("utf-8")
    yield MAGIC
    yield struct.pack("<Q", len(header))
    yield header
    for buf in buffers:
        yield buf


def save_checkpoint(path, arrays: dict[str, np.ndarray], meta: dict) -> str:
    """Write a canonical container and return its sha256 hex digest."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    digest = hashlib.sha256()
    with open(path, "wb") as fh:
        for chunk in _canonical_chunks(arrays, meta):
            fh.write(chunk)
            digest.update(chunk)
    return digest.hexdigest()


def content_hash(arrays: dict[str, np.ndarray], meta: dict) -> str:
    """Hash of the canonical serialization without writing a file."""
    digest = hashlib.sha256()
    for chunk in _canonical_chunks(arrays, meta):
        digest.update(chunk)
    return digest.hexdigest()


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict]:
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"checkpoint not found: {path}")
    raw = path.read_bytes()
    if raw[:8] != MAGIC:
        raise CheckpointError(f"not a ganseg checkpoint (bad magic): {path}")
    (hlen,) = struct.unpack("<Q", raw[8:16])
    header = json.loads(raw[16:16 + hlen].decode("utf-8"))
    arrays = {}
    offset = 16 + hlen
    for entry in header["arrays"]:
        dt = np.dtype(entry["dtype"])
        count = int(np.prod(entry["shape"], dtype=np.int64)) if entry["shape"] else 1
        nbytes = dt.itemsize * count
        buf = raw[offset:offset + nbytes]
        if len(buf) != nbytes:
            raise CheckpointError(f"truncated checkpoint: {path}")
        arrays[entry["name"]] = np.frombuffer(buf, dtype=dt).reshape(entry["shape"]).copy()
        offset += nbytes
    return arrays, header["meta"]


def file_hash(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


# -- flat key=value config files ---------------------------------------------

def read_config(path) -> dict:
    """Parse a flat ``key = value`` config file.

    Values are decoded as JSON where possible (numbers, booleans, lists),
    otherwise kept as strings. ``#`` starts a comment.
    """
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"config file not found: {path}")
    out = {}
    for lineno, line in enumerate(path.read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"{path}:{lineno}: expected 'key = value', got {line!r}")
        key, value = line.split("=", 1)
        key, value = key.strip(), value.strip()
        try:
            out[key] = json.loads(value)
        except json.JSONDecodeError:
            out[key] = value
    return out


def write_config(path, values: dict) -> None:
    lines = [f"{k} = {json.dumps(v)}" for k, v in values.items()]
    Path(path).write_text("\n".join(lines) + "\n")


def write_json(path, obj) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


# -- seeding ------------------------------------------------------------------

def substream_seed(root_seed: int, name: str) -> int:
    """Derive a named substream seed from a root seed.

    All randomness in a command flows from one root seed through named
    substreams, so two commands with the same seed draw identical streams
    regardless of call order.
    """
    digest = hashlib.sha256(f"{root_seed}/{name}".encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little") & (2**63 - 1)


def torch_generator(seed: int):
    import torch

    gen = torch.Generator()
    gen.manual_seed(int(seed))
    return gen
