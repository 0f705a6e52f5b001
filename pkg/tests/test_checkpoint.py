import json

import numpy as np
import pytest
import torch

from ambirephrase.checkpoint import (
    load_checkpoint, pack_tensors, save_checkpoint, state_digest, tensor_digest, unpack_tensors,
)
from ambirephrase.exceptions import CorruptionError


def _tensors():
    g = torch.Generator().manual_seed(0)
    return {"b": torch.randn(3, generator=g), "a.weight": torch.randn(2, 4, generator=g),
            "scalar": torch.tensor(1.5)}


def test_pack_unpack_roundtrip():
    t = _tensors()
    back = unpack_tensors(pack_tensors(t))
    assert set(back) == set(t)
    for k in t:
        assert torch.equal(back[k], t[k])


def test_state_digest_is_order_independent():
    t = _tensors()
    assert state_digest(t) == state_digest(dict(reversed(list(t.items()))))
    t2 = dict(t)
    t2["b"] = t["b"].clone()
    t2["b"][0] += 1e-6
    assert state_digest(t) != state_digest(t2)
    assert tensor_digest(t["b"]) != tensor_digest(t2["b"])


def test_save_load(tmp_path):
    t = _tensors()
    save_checkpoint(tmp_path / "c", t, {"kind": "test"})
    back, manifest = load_checkpoint(tmp_path / "c")
    assert manifest["metadata"] == {"kind": "test"}
    assert all(torch.equal(back[k], t[k]) for k in t)


def test_archive_bytes_are_little_endian_float32(tmp_path):
    save_checkpoint(tmp_path / "c", {"x": torch.tensor([1.0, -2.0])}, {})
    blob = (tmp_path / "c" / "tensors.bin").read_bytes()
    assert blob[:4] == b"TARC"
    assert blob.endswith(np.array([1.0, -2.0], dtype="<f4").tobytes())


def test_flipped_byte_is_corruption(tmp_path):
    save_checkpoint(tmp_path / "c", _tensors(), {})
    path = tmp_path / "c" / "tensors.bin"
    blob = bytearray(path.read_bytes())
    blob[-3] ^= 0x40
    path.write_bytes(bytes(blob))
    with pytest.raises(CorruptionError):
        load_checkpoint(tmp_path / "c")


def test_tampered_tensor_digest(tmp_path):
    save_checkpoint(tmp_path / "c", _tensors(), {})
    man = tmp_path / "c" / "manifest.json"
    data = json.loads(man.read_text())
    data["tensors"]["b"]["sha256"] = "f" * 64
    man.write_text(json.dumps(data))
    with pytest.raises(CorruptionError):
        load_checkpoint(tmp_path / "c")


def test_missing_files(tmp_path):
    with pytest.raises((CorruptionError, FileNotFoundError)):
        load_checkpoint(tmp_path / "nothing")
