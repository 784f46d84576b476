import json

import numpy as np
import pytest

from vocadistill.checkpoint import load_checkpoint, load_model, save_checkpoint, save_model
from vocadistill.model import ModelConfig, forward, init_params, params_digest
from vocadistill.tokenizer import Vocabulary


def test_manifest_layout(tmp_path):
    arrays = {"a": np.arange(6, dtype=np.float32).reshape(2, 3), "b": np.array([1.5, -2.0])}
    save_checkpoint(tmp_path, arrays, {"note": "x"})
    manifest = json.loads((tmp_path / "manifest.json").read_text())
    assert manifest["dtype"] == "float32" and manifest["endianness"] == "little"
    assert [(e["name"], e["shape"], e["offset"], e["nbytes"]) for e in manifest["arrays"]] == [
        ("a", [2, 3], 0, 24), ("b", [2], 24, 8)]
    raw = (tmp_path / "arrays.bin").read_bytes()
    np.testing.assert_array_equal(np.frombuffer(raw[24:], dtype="<f4"), [1.5, -2.0])
    loaded, meta, vocab = load_checkpoint(tmp_path)
    np.testing.assert_array_equal(loaded["a"], arrays["a"])
    assert meta == {"note": "x"} and vocab is None


def test_model_round_trip(tmp_path):
    vocab = Vocabulary.from_tokens(["a", "b", "##c"])
    config = ModelConfig(2, 8, 2, len(vocab), max_positions=6)
    params = init_params(config, np.random.default_rng(0))
    save_model(tmp_path, params, config, vocab, extra={"proj.weight": np.ones((8, 4))})
    loaded, config2, vocab2, extra = load_model(tmp_path)
    assert config2 == config and vocab2 == vocab
    assert params_digest(loaded) == params_digest(params)
    assert set(extra) == {"proj.weight"}
    ids = np.array([[5, 6, 7]])
    np.testing.assert_array_equal(forward(loaded, config2, ids).logits.data,
                                  forward(params, config, ids).logits.data)


def test_corrupt_checkpoints_rejected(tmp_path):
    vocab = Vocabulary.from_tokens(["a"])
    config = ModelConfig(1, 4, 2, len(vocab), max_positions=4)
    save_model(tmp_path, init_params(config, np.random.default_rng(0)), config, vocab)
    manifest = json.loads((tmp_path / "manifest.json").read_text())
    manifest["arrays"][0]["shape"] = [2, 2]
    manifest["arrays"][0]["nbytes"] = 16
    (tmp_path / "manifest.json").write_text(json.dumps(manifest))
    with pytest.raises(ValueError):
        load_model(tmp_path)
    (tmp_path / "arrays.bin").write_bytes(b"")
    with pytest.raises(ValueError, match="past the end"):
        load_checkpoint(tmp_path)
    manifest["format"] = "other"
    (tmp_path / "manifest.json").write_text(json.dumps(manifest))
    with pytest.raises(ValueError, match="not a"):
        load_checkpoint(tmp_path)


def test_save_is_byte_stable(tmp_path):
    vocab = Vocabulary.from_tokens(["a"])
    config = ModelConfig(1, 4, 2, len(vocab), max_positions=4)
    params = init_params(config, np.random.default_rng(0))
    save_model(tmp_path / "x", params, config, vocab)
    save_model(tmp_path / "y", params, config, vocab)
    for name in ("manifest.json", "arrays.bin", "vocab.txt"):
        assert (tmp_path / "x" / name).read_bytes() == (tmp_path / "y" / name).read_bytes()
