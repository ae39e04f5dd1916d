import struct

import numpy as np
import pytest

from src.domain.exceptions import CheckpointFormatError
from src.domain.models.parameters import ParameterStore
from src.infrastructure.repositories.checkpoint_repository import (MAGIC, load_checkpoint, load_store,
                                                                   save_checkpoint)
from tests.factories import make_model


@pytest.fixture
def saved(tmp_path):
    store = ParameterStore()
    store.add("b.weight", np.arange(6, dtype=np.float32).reshape(2, 3))
    store.add("a.scalar", np.array(1.5, dtype=np.float32))
    store.add("c.bias", np.array([-1.0, 2.0], dtype=np.float64))
    path = str(tmp_path / "model.ckpt")
    save_checkpoint(path, store, {'kind': 'test', 'vocab': ["<pad>", "x"]})
    return path, store


def test_checkpoint_roundtrip_keeps_order_shapes_and_metadata(saved):
    path, store = saved
    arrays, meta = load_checkpoint(path)
    assert list(arrays) == ["b.weight", "a.scalar", "c.bias"]
    assert meta == {'kind': 'test', 'vocab': ["<pad>", "x"]}
    for name in store:
        assert arrays[name].dtype == np.float32
        assert arrays[name].shape == store[name].shape
        assert np.array_equal(arrays[name], store[name].data.astype(np.float32))
    restored, _ = load_store(path)
    assert restored.digest() == store.astype(np.float32).digest()


def test_model_checkpoint_restores_identical_parameters(tmp_path):
    model = make_model()
    path = str(tmp_path / "fusion.ckpt")
    save_checkpoint(path, model.store, model.metadata())
    restored, meta = load_store(path)
    assert restored.digest() == model.store.digest()
    assert meta['kind'] == "fusion" and meta['vocab'] == model.vocab.tokens


def test_bad_magic_is_rejected(saved):
    path, _ = saved
    with open(path, "r+b") as f:
        f.write(b"NOPE")
    with pytest.raises(CheckpointFormatError):
        load_checkpoint(path)


def test_unknown_version_is_rejected(saved):
    path, _ = saved
    with open(path, "r+b") as f:
        f.seek(len(MAGIC))
        f.write(struct.pack("<I", 99))
    with pytest.raises(CheckpointFormatError):
        load_checkpoint(path)


def test_truncated_file_is_rejected(saved):
    path, _ = saved
    with open(path, "rb") as f:
        payload = f.read()
    with open(path, "wb") as f:
        f.write(payload[:-3])
    with pytest.raises(CheckpointFormatError):
        load_checkpoint(path)


def test_trailing_bytes_are_rejected(saved):
    path, _ = saved
    with open(path, "ab") as f:
        f.write(b"\x00")
    with pytest.raises(CheckpointFormatError):
        load_checkpoint(path)
