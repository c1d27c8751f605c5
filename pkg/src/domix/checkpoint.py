"""Checkpoint format: 8-byte manifest length, JSON manifest, raw tensor payload.

The manifest carries a full config snapshot and the vocabulary, so a
checkpoint alone rebuilds the model. Tensor bytes are little-endian
IEEE-754 in manifest entry order; round trips are bit-exact. Optimizer
moments ride along under ``optim.*`` names for resumable training.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass

import numpy as np

from .corpus import Vocab
from .mixing import ConfigError
from .model import MixConfig, ModelConfig, Seq2SeqModel

FORMAT_VERSION = 1
_DTYPE_CODES = {"f32": "<f4", "f64": "<f8"}


@dataclass
class Checkpoint:
    manifest: dict
    arrays: dict[str, np.ndarray]

    @property
    def step(self) -> int:
        return self.manifest["step"]

    @property
    def vocab(self) -> Vocab:
        return Vocab(self.manifest["vocab"])


def _dtype_code(arr: np.ndarray) -> str:
    return "f32" if arr.dtype == np.float32 else "f64"


def save_checkpoint(path, model: Seq2SeqModel, vocab: Vocab, step: int = 0,
                    optimizer=None, extra: dict | None = None):
    tensors: dict[str, np.ndarray] = {name: p.data for name, p in model.parameters().items()}
    if optimizer is not None:
        tensors.update(optimizer.state_tensors())
    entries = []
    offset = 0
    chunks = []
    for name, arr in tensors.items():
        code = _dtype_code(arr)
        raw = np.ascontiguousarray(arr, dtype=_DTYPE_CODES[code]).tobytes()
        entries.append({"name": name, "shape": list(arr.shape), "dtype": code, "offset": offset})
        chunks.append(raw)
        offset += len(raw)
    manifest = {
        "format_version": FORMAT_VERSION,
        "model_config": asdict(model.cfg),
        "mix_config": asdict(model.mix),
        "baseline": model.baseline,
        "wl_head": model.wl_head is not None,
        "precision": model.precision,
        "vocab": model_vocab_tokens(vocab),
        "vocab_hash": vocab.content_hash(),
        "step": int(step),
        "optimizer_steps": int(optimizer.steps) if optimizer is not None else 0,
        "has_optimizer": optimizer is not None,
        "extra": extra or {},
        "entries": entries,
    }
    blob = json.dumps(manifest).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        for raw in chunks:
            fh.write(raw)


def model_vocab_tokens(vocab: Vocab) -> list[str]:
    return vocab.id_to_token[4:]


def load_checkpoint(path) -> Checkpoint:
    with open(path, "rb") as fh:
        (blob_len,) = struct.unpack("<Q", fh.read(8))
        manifest = json.loads(fh.read(blob_len).decode("utf-8"))
        if manifest.get("format_version") != FORMAT_VERSION:
            raise ConfigError(f"unsupported checkpoint format version {manifest.get('format_version')}")
        payload = fh.read()
    arrays = {}
    for entry in manifest["entries"]:
        code = _DTYPE_CODES[entry["dtype"]]
        n = int(np.prod(entry["shape"])) if entry["shape"] else 1
        itemsize = np.dtype(code).itemsize
        start = entry["offset"]
        arr = np.frombuffer(payload[start:start + n * itemsize], dtype=code).reshape(entry["shape"])
        arrays[entry["name"]] = arr.astype(arr.dtype.newbyteorder("="))
    return Checkpoint(manifest, arrays)


def restore_model(ckpt: Checkpoint) -> tuple[Seq2SeqModel, Vocab]:
    """Rebuild the model from the manifest snapshot and load every tensor."""
    cfg = ModelConfig(**ckpt.manifest["model_config"])
    mix = MixConfig(**ckpt.manifest["mix_config"])
    model = Seq2SeqModel(cfg, mix, seed=0, dtype=ckpt.manifest["precision"],
                         baseline=ckpt.manifest["baseline"],
                         wl_head=ckpt.manifest["wl_head"])
    for name, param in model.parameters().items():
        if name not in ckpt.arrays:
            raise ConfigError(f"checkpoint is missing tensor {name!r}")
        arr = ckpt.arrays[name]
        if tuple(arr.shape) != param.data.shape:
            raise ConfigError(f"tensor {name!r} shaped {arr.shape}, model expects {param.data.shape}")
        param.data = arr.astype(model.dtype, copy=True)
    return model, ckpt.vocab
