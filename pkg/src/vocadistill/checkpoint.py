"""Checkpoint container: ``manifest.json`` plus ``arrays.bin``.

``arrays.bin`` is the concatenation of little-endian float32 blocks; the
manifest records each array's name, shape, byte offset and length. A
vocabulary, when present, is stored next to them as ``vocab.txt``.
"""
from __future__ import annotations

import json
from pathlib import Path
from typing import Mapping

import numpy as np

from . import autodiff as ad
from .model import ModelConfig, ModelParams, param_shapes
from .tokenizer import Vocabulary

FORMAT = "vocadistill-checkpoint"
VERSION = 1
_DTYPE = np.dtype("<f4")


def save_checkpoint(directory: str | Path, arrays: Mapping[str, object], metadata: dict | None = None,
                    vocab: Vocabulary | None = None) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    entries, offset = [], 0
    with open(directory / "arrays.bin", "wb") as fh:
        for name, arr in arrays.items():
            data = arr.data if isinstance(arr, ad.Tensor) else np.asarray(arr)
            raw = np.ascontiguousarray(data, dtype=_DTYPE).tobytes()
            fh.write(raw)
            entries.append({"name": name, "shape": list(data.shape), "offset": offset,
                            "nbytes": len(raw)})
            offset += len(raw)
    manifest = {"format": FORMAT, "version": VERSION, "dtype": "float32",
                "endianness": "little", "arrays": entries, "metadata": metadata or {}}
    if vocab is not None:
        vocab.save(directory / "vocab.txt")
        manifest["vocab"] = "vocab.txt"
    (directory / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return directory


def load_checkpoint(directory: str | Path) -> tuple[dict[str, np.ndarray], dict, Vocabulary | None]:
    directory = Path(directory)
    manifest = json.loads((directory / "manifest.json").read_text())
    if manifest.get("format") != FORMAT:
        raise ValueError(f"{directory} is not a {FORMAT} directory")
    if manifest.get("dtype") != "float32" or manifest.get("endianness") != "little":
        raise ValueError("only little-endian float32 checkpoints are supported")
    blob = (directory / "arrays.bin").read_bytes()
    arrays = {}
    for entry in manifest["arrays"]:
        start, n = entry["offset"], entry["nbytes"]
        if start + n > len(blob):
            raise ValueError(f"array {entry['name']} extends past the end of arrays.bin")
        arr = np.frombuffer(blob[start:start + n], dtype=_DTYPE).reshape(entry["shape"])
        arrays[entry["name"]] = arr.astype(np.float32)
    vocab = Vocabulary.load(directory / manifest["vocab"]) if "vocab" in manifest else None
    return arrays, manifest.get("metadata", {}), vocab


def save_model(directory: str | Path, params: ModelParams, config: ModelConfig, vocab: Vocabulary,
               extra: Mapping[str, object] | None = None, metadata: dict | None = None) -> Path:
    arrays = dict(params)
    if extra:
        arrays.update(extra)
    meta = {"model_config": config.to_dict(), **(metadata or {})}
    return save_checkpoint(directory, arrays, meta, vocab)


def load_model(directory: str | Path, requires_grad: bool = False
               ) -> tuple[ModelParams, ModelConfig, Vocabulary, dict[str, np.ndarray]]:
    """Model parameters, config and vocabulary; unrecognised arrays are returned separately."""
    arrays, meta, vocab = load_checkpoint(directory)
    if "model_config" not in meta or vocab is None:
        raise ValueError(f"{directory} does not hold a model checkpoint")
    config = ModelConfig.from_dict(meta["model_config"])
    shapes = param_shapes(config)
    params, extra = {}, {}
    for name, arr in arrays.items():
        if name in shapes:
            if tuple(arr.shape) != shapes[name]:
                raise ValueError(f"array {name} has shape {arr.shape}, expected {shapes[name]}")
            params[name] = ad.Tensor(arr, requires_grad=requires_grad)
        else:
            extra[name] = arr
    missing = set(shapes) - set(params)
    if missing:
        raise ValueError(f"checkpoint is missing arrays {sorted(missing)[:5]}")
    return {k: params[k] for k in shapes}, config, vocab, extra
