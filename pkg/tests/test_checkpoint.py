import json
import struct

import numpy as np
import pytest

from camspoof.checkpoint import MAGIC, CheckpointError, decode, encode, load_checkpoint, save_checkpoint
from camspoof.model import ModelConfig, build_model, forward_probs


@pytest.fixture
def model():
    return build_model(ModelConfig(seed=5))


def test_round_trip_is_bit_exact(model, tmp_path):
    path = tmp_path / "m.ckpt"
    save_checkpoint(model, path, {"epochs": 3, "classes": ["a", "b", "c", "d"]})
    loaded, meta = load_checkpoint(path, with_metadata=True)
    assert loaded.config == model.config
    assert meta == {"epochs": 3, "classes": ["a", "b", "c", "d"]}
    assert set(loaded.parameters) == set(model.parameters)
    for name, arr in model.parameters.items():
        assert loaded.parameters[name].tobytes() == arr.tobytes()
    x = np.random.default_rng(0).random((2, 3, 32, 32)).astype(np.float32)
    np.testing.assert_array_equal(forward_probs(loaded, x), forward_probs(model, x))


def test_encoding_is_deterministic(model):
    assert encode(model, {"b": 1, "a": 2}) == encode(build_model(ModelConfig(seed=5)), {"a": 2, "b": 1})


def test_layout_starts_with_magic_and_version(model):
    data = encode(model)
    assert data[:4] == MAGIC
    assert struct.unpack("<I", data[4:8])[0] == 1


def test_bad_magic(model):
    data = b"XXXX" + encode(model)[4:]
    with pytest.raises(CheckpointError, match="magic"):
        decode(data)


def test_version_mismatch(model):
    data = bytearray(encode(model))
    data[4:8] = struct.pack("<I", 99)
    with pytest.raises(CheckpointError, match="version 99"):
        decode(bytes(data))


@pytest.mark.parametrize("cut", [3, 10, 100, -1, -4000])
def test_truncated_file_rejected(model, tmp_path, cut):
    data = encode(model)
    path = tmp_path / "t.ckpt"
    path.write_bytes(data[:cut])
    with pytest.raises(CheckpointError):
        load_checkpoint(path)


def test_trailing_bytes_rejected(model):
    with pytest.raises(CheckpointError, match="trailing"):
        decode(encode(model) + b"\0")


def _with_header(model, header):
    data = encode(model)
    n = struct.unpack("<I", data[8:12])[0]
    raw = header.encode()
    return data[:8] + struct.pack("<I", len(raw)) + raw + data[12 + n:]


def test_config_disagreeing_with_payload_rejected(model):
    other = ModelConfig(seed=5, growth_rate=8).to_dict()
    data = _with_header(model, json.dumps({"config": other, "metadata": {}}))
    with pytest.raises(CheckpointError, match="shape|parameters"):
        decode(data)


def test_corrupt_header_rejected(model):
    with pytest.raises(CheckpointError, match="header"):
        decode(_with_header(model, "{not json"))


def test_unknown_config_key_rejected(model):
    cfg = dict(model.config.to_dict(), colour="blue")
    with pytest.raises(CheckpointError):
        decode(_with_header(model, json.dumps({"config": cfg})))


def test_unwritable_path(model, tmp_path):
    with pytest.raises(OSError):
        save_checkpoint(model, tmp_path / "missing" / "m.ckpt")
