"""Tensor archive + JSON manifest checkpoint format.

``tensors.bin`` layout (all integers little-endian ``uint32``)::

    b"TARC" | version | n_tensors
    per tensor: name_len | name (utf-8) | ndim | dim_0 .. dim_{ndim-1} | float32 LE data

``manifest.json`` records the format version, per-tensor shapes and sha256
digests, the archive digest, a parameter digest and free-form metadata.
"""
from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path

import numpy as np
import torch

from .exceptions import CorruptionError, ParseError

MAGIC = b"TARC"
ARCHIVE_VERSION = 1
ARCHIVE_NAME = "tensors.bin"
MANIFEST_NAME = "manifest.json"


def _as_le_f32(t) -> np.ndarray:
    if isinstance(t, torch.Tensor):
        t = t.detach().cpu().numpy()
    # not ascontiguousarray: it turns 0-d arrays into 1-d
    return np.asarray(t, dtype="<f4").copy(order="C")


def tensor_digest(t) -> str:
    arr = _as_le_f32(t)
    h = hashlib.sha256()
    h.update(struct.pack(f"<I{arr.ndim}I", arr.ndim, *arr.shape))
    h.update(arr.tobytes())
    return h.hexdigest()


def state_digest(tensors: dict) -> str:
    """Order-independent digest of a name -> tensor mapping."""
    h = hashlib.sha256()
    for name in sorted(tensors):
        h.update(name.encode("utf-8"))
        h.update(tensor_digest(tensors[name]).encode("ascii"))
    return h.hexdigest()


def pack_tensors(tensors: dict) -> bytes:
    parts = [MAGIC, struct.pack("<II", ARCHIVE_VERSION, len(tensors))]
    for name in sorted(tensors):
        arr = _as_le_f32(tensors[name])
        raw = name.encode("utf-8")
        parts.append(struct.pack("<I", len(raw)))
        parts.append(raw)
        parts.append(struct.pack(f"<I{arr.ndim}I", arr.ndim, *arr.shape))
        parts.append(arr.tobytes())
    return b"".join(parts)


def unpack_tensors(blob: bytes) -> dict:
    if blob[:4] != MAGIC:
        raise ParseError("not a tensor archive (bad magic)")
    pos = 4

    def take(fmt):
        nonlocal pos
        size = struct.calcsize(fmt)
        if pos + size > len(blob):
            raise ParseError("tensor archive truncated")
        vals = struct.unpack_from(fmt, blob, pos)
        pos += size
        return vals

    version, count = take("<II")
    if version != ARCHIVE_VERSION:
        raise ParseError(f"unsupported archive version {version}")
    out = {}
    for _ in range(count):
        (name_len,) = take("<I")
        name = blob[pos : pos + name_len].decode("utf-8")
        pos += name_len
        (ndim,) = take("<I")
        shape = take(f"<{ndim}I") if ndim else ()
        n = int(np.prod(shape, dtype=np.int64)) if ndim else 1
        if pos + 4 * n > len(blob):
            raise ParseError("tensor archive truncated")
        arr = np.frombuffer(blob, dtype="<f4", count=n, offset=pos).reshape(shape)
        pos += 4 * n
        out[name] = torch.from_numpy(arr.astype(np.float32))
    return out


def save_checkpoint(directory, tensors: dict, metadata: dict, param_names=None) -> Path:
    """Write ``tensors`` and a manifest into ``directory``.

    ``param_names`` selects which tensors form the parameter digest (all of
    them by default); optimizer state can ride along without affecting it.
    """
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    blob = pack_tensors(tensors)
    names = sorted(tensors) if param_names is None else sorted(param_names)
    manifest = {
        "format_version": ARCHIVE_VERSION,
        "archive": ARCHIVE_NAME,
        "archive_sha256": hashlib.sha256(blob).hexdigest(),
        "param_digest": state_digest({n: tensors[n] for n in names}),
        "param_names": names,
        "tensors": {
            n: {"shape": list(_as_le_f32(t).shape), "sha256": tensor_digest(t)}
            for n, t in sorted(tensors.items())
        },
        "metadata": metadata,
    }
    (directory / ARCHIVE_NAME).write_bytes(blob)
    (directory / MANIFEST_NAME).write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return directory


def load_checkpoint(directory):
    """Return ``(tensors, manifest)``; raise CorruptionError on any digest mismatch."""
    directory = Path(directory)
    try:
        manifest = json.loads((directory / MANIFEST_NAME).read_text())
    except json.JSONDecodeError as exc:
        raise CorruptionError(f"unreadable manifest in {directory}: {exc}") from None
    blob = (directory / manifest.get("archive", ARCHIVE_NAME)).read_bytes()
    if hashlib.sha256(blob).hexdigest() != manifest.get("archive_sha256"):
        raise CorruptionError(f"archive digest mismatch in {directory}")
    tensors = unpack_tensors(blob)
    listed = manifest.get("tensors", {})
    if set(listed) != set(tensors):
        raise CorruptionError("manifest tensor list does not match archive")
    for name, info in listed.items():
        if tensor_digest(tensors[name]) != info["sha256"] or list(tensors[name].shape) != info["shape"]:
            raise CorruptionError(f"tensor {name!r} does not match its manifest entry")
    names = manifest.get("param_names", sorted(tensors))
    if state_digest({n: tensors[n] for n in names}) != manifest.get("param_digest"):
        raise CorruptionError(f"parameter digest mismatch in {directory}")
    return tensors, manifest
