"""Checkpoint files.

Layout: the 8-byte magic ``CSWCKPT1``, a little-endian uint64 header
length, a UTF-8 JSON header, then the raw little-endian float32 tensor
data. The header holds the model config, the variant, the refiner config,
optional training config and an index ``{name: [offset, shape]}``. Tensor
names are namespaced ``base/...`` (frozen backbone) or ``adapt/...``
(adaptation modules), so an adaptation can be re-applied over any base
checkpoint with the same model config.

Files are byte-deterministic: no timestamps, sorted keys.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np
import torch

from .config import ModelConfig
from .errors import ConfigurationError
from .model import WhisperMini
from .pipeline import CSModel, Variant
from .refiner import RefinerConfig

MAGIC = b"CSWCKPT1"
FORMAT_VERSION = 1


def _namespaced(model: CSModel) -> dict[str, torch.Tensor]:
    out = {}
    for name, t in model.state_dict().items():
        if name.startswith("base."):
            out["base/" + name[len("base."):]] = t
        else:
            out["adapt/" + name] = t
    return out


def save_checkpoint(path, model: CSModel, train_config: dict | None = None,
                    base_only: bool = False) -> None:
    tensors = _namespaced(model)
    if base_only:
        tensors = {k: v for k, v in tensors.items() if k.startswith("base/")}
    index = {}
    blobs = []
    offset = 0
    for name in sorted(tensors):
        arr = tensors[name].detach().cpu().numpy().astype("<f4")
        index[name] = [offset, list(arr.shape)]
        raw = arr.tobytes()
        blobs.append(raw)
        offset += len(raw)
    header = {
        "format": "cswhisper-checkpoint",
        "version": FORMAT_VERSION,
        "model_config": model.cfg.to_dict(),
        "variant": Variant().to_dict() if base_only else model.variant.to_dict(),
        "refiner_config": {"n_layers": model.rc.n_layers, "hidden": model.rc.hidden,
                           "bidirectional": model.rc.bidirectional},
        "train_config": train_config,
        "tensors": index,
    }
    hbytes = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<Q", len(hbytes)))
        f.write(hbytes)
        for raw in blobs:
            f.write(raw)


def read_checkpoint(path) -> tuple[dict, dict[str, np.ndarray]]:
    data = Path(path).read_bytes()
    if data[:8] != MAGIC:
        raise ConfigurationError(f"{path}: not a checkpoint file")
    (hlen,) = struct.unpack("<Q", data[8:16])
    header = json.loads(data[16:16 + hlen].decode("utf-8"))
    if header.get("version") != FORMAT_VERSION:
        raise ConfigurationError(f"{path}: unsupported checkpoint version {header.get('version')}")
    body = memoryview(data)[16 + hlen:]
    tensors = {}
    for name, (offset, shape) in header["tensors"].items():
        n = int(np.prod(shape, dtype=np.int64))
        tensors[name] = np.frombuffer(body[offset:offset + 4 * n], dtype="<f4").reshape(shape).copy()
    return header, tensors


def _load_into(module: torch.nn.Module, tensors: dict[str, np.ndarray], prefix: str, path):
    own = module.state_dict()
    given = {k[len(prefix):]: v for k, v in tensors.items() if k.startswith(prefix)}
    missing = sorted(set(own) - set(given))
    extra = sorted(set(given) - set(own))
    if missing or extra:
        raise ConfigurationError(f"{path}: tensor set mismatch under {prefix!r}; "
                                 f"missing={missing[:5]}, unexpected={extra[:5]}")
    for name, ref in own.items():
        if tuple(ref.shape) != tuple(given[name].shape):
            raise ConfigurationError(
                f"{path}: {prefix}{name} has shape {given[name].shape}, expected {tuple(ref.shape)}")
    module.load_state_dict({k: torch.from_numpy(v) for k, v in given.items()})


def load_base(path) -> WhisperMini:
    header, tensors = read_checkpoint(path)
    base = WhisperMini(ModelConfig.from_dict(header["model_config"]))
    _load_into(base, tensors, "base/", path)
    return base


def load_checkpoint(path, seed: int = 0) -> CSModel:
    """Rebuild the full model (base and adaptation) stored in ``path``."""
    header, tensors = read_checkpoint(path)
    base = WhisperMini(ModelConfig.from_dict(header["model_config"]))
    model = CSModel(base, Variant(**header["variant"]), RefinerConfig(**header["refiner_config"]),
                    seed=seed)
    _load_into(base, tensors, "base/", path)
    adapt = {k: v for k, v in tensors.items() if k.startswith("adapt/")}
    _load_adaptation(model, adapt, path)
    return model


def _load_adaptation(model: CSModel, tensors, path):
    own = {k: v for k, v in model.state_dict().items() if not k.startswith("base.")}
    given = {k[len("adapt/"):]: v for k, v in tensors.items()}
    missing = sorted(set(own) - set(given))
    extra = sorted(set(given) - set(own))
    if missing or extra:
        raise ConfigurationError(f"{path}: adaptation tensors mismatch; "
                                 f"missing={missing[:5]}, unexpected={extra[:5]}")
    for name, ref in own.items():
        if tuple(ref.shape) != tuple(given[name].shape):
            raise ConfigurationError(f"{path}: adapt/{name} has shape {given[name].shape}, "
                                     f"expected {tuple(ref.shape)}")
    model.load_state_dict({k: torch.from_numpy(v) for k, v in given.items()}, strict=False)


def apply_adaptation(path, base: WhisperMini, seed: int = 0) -> CSModel:
    """Attach the adaptation stored in ``path`` to an already loaded base."""
    header, tensors = read_checkpoint(path)
    if ModelConfig.from_dict(header["model_config"]) != base.cfg:
        raise ConfigurationError(f"{path}: adaptation was trained for a different model config")
    model = CSModel(base, Variant(**header["variant"]), RefinerConfig(**header["refiner_config"]),
                    seed=seed)
    _load_adaptation(model, {k: v for k, v in tensors.items() if k.startswith("adapt/")}, path)
    return model
