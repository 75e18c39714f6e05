import struct

import numpy as np
import pytest

from conftest import tiny_model
from kdkit.checkpoint import MAGIC, load_model, read_checkpoint, save_model, write_checkpoint
from kdkit.errors import CheckpointError


def test_model_round_trip(tmp_path, token_batch):
    model = tiny_model(seed=5, mlm_head=True)
    path = save_model(model, tmp_path / "model.kdckpt")
    restored = load_model(path)
    assert restored.config == model.config
    assert restored.dtype == np.float64
    for name, values in model.state_dict().items():
        assert np.array_equal(restored.params[name].data, values)
    assert np.array_equal(restored(token_batch).logits.data, model(token_batch).logits.data)


def test_byte_layout(tmp_path):
    path = tmp_path / "one.kdckpt"
    write_checkpoint(path, {"w": np.arange(6, dtype=np.float32).reshape(2, 3)})
    blob = path.read_bytes()
    assert blob[:8] == MAGIC
    assert struct.unpack_from("<I", blob, 8) == (1,)
    assert struct.unpack_from("<H", blob, 12) == (1,)
    assert blob[14:15] == b"w"
    assert struct.unpack_from("<BB", blob, 15) == (0, 2)
    assert struct.unpack_from("<2I", blob, 17) == (2, 3)
    assert len(blob) == 25 + 6 * 4


def test_entry_order_and_dtypes_preserved(tmp_path):
    tensors = {"b": np.ones(2, dtype=np.float64), "a": np.zeros((1, 1, 2), dtype=np.float32)}
    write_checkpoint(tmp_path / "x.kdckpt", tensors)
    loaded = read_checkpoint(tmp_path / "x.kdckpt")
    assert list(loaded) == ["b", "a"]
    assert loaded["b"].dtype == np.float64 and loaded["a"].shape == (1, 1, 2)


def test_bad_magic(tmp_path):
    path = tmp_path / "bad.kdckpt"
    path.write_bytes(b"NOTACKPT" + b"\x00" * 4)
    with pytest.raises(CheckpointError, match="magic"):
        read_checkpoint(path)


def test_truncated_and_trailing_bytes(tmp_path):
    path = tmp_path / "t.kdckpt"
    write_checkpoint(path, {"w": np.ones(4)})
    blob = path.read_bytes()
    path.write_bytes(blob[:-3])
    with pytest.raises(CheckpointError):
        read_checkpoint(path)
    path.write_bytes(blob + b"\x00")
    with pytest.raises(CheckpointError, match="trailing"):
        read_checkpoint(path)


def test_unsupported_dtype(tmp_path):
    with pytest.raises(CheckpointError):
        write_checkpoint(tmp_path / "i.kdckpt", {"ids": np.arange(3)})


def test_missing_files(tmp_path):
    with pytest.raises(CheckpointError):
        read_checkpoint(tmp_path / "nope.kdckpt")
    write_checkpoint(tmp_path / "bare.kdckpt", {"w": np.ones(1)})
    with pytest.raises(CheckpointError, match="sidecar"):
        load_model(tmp_path / "bare.kdckpt")


def test_state_mismatch_is_rejected():
    model = tiny_model()
    other = tiny_model(num_layers=1)
    with pytest.raises(CheckpointError):
        model.load_state_dict(other.state_dict())
    state = model.state_dict()
    state["pooler.bias"] = np.zeros(3)
    with pytest.raises(CheckpointError):
        model.load_state_dict(state)
