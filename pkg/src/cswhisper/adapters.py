"""Low-rank residual adapters and the frozen/trainable parameter split."""

from __future__ import annotations

import hashlib
from dataclasses import dataclass
from typing import Iterable

import torch
from torch import nn

from .errors import ConfigurationError, CSWhisperError


class Adapter(nn.Module):
    """Linear bottleneck ``e -> e + (e @ down) @ up``.

    ``up`` starts at zero so a fresh adapter is the identity map while the
    gradient with respect to ``up`` is nonzero from the first step.
    """

    def __init__(self, d_model: int, rank: int = 8, generator: torch.Generator | None = None,
                 nonlinearity: bool = False):
        super().__init__()
        if rank < 1 or rank >= d_model:
            raise ConfigurationError(f"adapter rank must be in [1, {d_model}), got {rank}")
        self.d_model = d_model
        self.rank = rank
        self.nonlinearity = nonlinearity
        init = torch.randn(d_model, rank, generator=generator) / d_model ** 0.5
        self.down = nn.Parameter(init)
        self.up = nn.Parameter(torch.zeros(rank, d_model))

    def forward(self, e: torch.Tensor) -> torch.Tensor:
        return adapt(e, self)

    def extra_repr(self):
        return f"d_model={self.d_model}, rank={self.rank}"


def adapt(e: torch.Tensor, a: Adapter) -> torch.Tensor:
    if e.shape[-1] != a.down.shape[0]:
        raise ConfigurationError(
            f"adapter expects width {a.down.shape[0]}, got {e.shape[-1]}")
    z = e @ a.down
    if a.nonlinearity:
        z = torch.relu(z)
    return e + z @ a.up


class AdapterPair(nn.Module):
    """Adapters for one transformer layer: after self-attention and after the MLP."""

    def __init__(self, d_model: int, rank: int, generator: torch.Generator | None = None):
        super().__init__()
        self.after_self_attn = Adapter(d_model, rank, generator)
        self.after_mlp = Adapter(d_model, rank, generator)


class AdapterHooks(nn.Module):
    """Optional per-layer adapter pairs for the encoder and decoder stacks."""

    def __init__(self):
        super().__init__()
        self.encoder = nn.ModuleDict()
        self.decoder = nn.ModuleDict()

    def enc(self, i: int) -> AdapterPair | None:
        return self.encoder[str(i)] if str(i) in self.encoder else None

    def dec(self, i: int) -> AdapterPair | None:
        return self.decoder[str(i)] if str(i) in self.decoder else None

    def n_adapters(self) -> int:
        return 2 * (len(self.encoder) + len(self.decoder))


def _seeded(seed):
    return None if seed is None else torch.Generator().manual_seed(seed)


def wire_encoder_adapters(cfg, hooks: AdapterHooks | None = None, seed: int | None = None) -> AdapterHooks:
    hooks = AdapterHooks() if hooks is None else hooks
    g = _seeded(seed)
    for i in range(cfg.n_enc_layers):
        hooks.encoder[str(i)] = AdapterPair(cfg.d_model, cfg.adapter_rank, g)
    return hooks


def wire_decoder_adapters(cfg, hooks: AdapterHooks | None = None, seed: int | None = None) -> AdapterHooks:
    hooks = AdapterHooks() if hooks is None else hooks
    g = _seeded(seed)
    for i in range(cfg.n_dec_layers):
        hooks.decoder[str(i)] = AdapterPair(cfg.d_model, cfg.adapter_rank, g)
    return hooks


# Parameters living under these top-level names are trained in stage 1.
ADAPTATION_MODULES = ("enc_hooks", "dec_hooks", "paths", "refiner", "ctc_head", "fusion", "lid_head")


class UnclassifiedParameterError(CSWhisperError, RuntimeError):
    pass


@dataclass(frozen=True)
class FreezePolicy:
    """Predicate deciding whether a named parameter is trainable.

    ``frozen_prefixes`` and ``trainable_prefixes`` must together claim every
    parameter exactly once; anything else is an error.
    """

    frozen_prefixes: tuple[str, ...]
    trainable_prefixes: tuple[str, ...]

    def is_trainable(self, name: str) -> bool:
        frozen = any(name.startswith(p + ".") for p in self.frozen_prefixes)
        trainable = any(name.startswith(p + ".") for p in self.trainable_prefixes)
        if frozen == trainable:
            raise UnclassifiedParameterError(
                f"parameter {name!r} is {'claimed twice' if frozen else 'unclassified'}")
        return trainable

    @classmethod
    def adaptation(cls) -> "FreezePolicy":
        """Stage 1: base model frozen, every adaptation module trainable."""
        return cls(frozen_prefixes=("base",), trainable_prefixes=ADAPTATION_MODULES)

    @classmethod
    def base_training(cls) -> "FreezePolicy":
        """Stage 0: the base model is trained from scratch."""
        return cls(frozen_prefixes=ADAPTATION_MODULES, trainable_prefixes=("base",))


def classify_parameters(policy: FreezePolicy, model: nn.Module) -> tuple[dict, dict]:
    """Partition ``model.named_parameters()`` into (frozen, trainable) dicts."""
    frozen, trainable = {}, {}
    for name, p in model.named_parameters():
        (trainable if policy.is_trainable(name) else frozen)[name] = p
    return frozen, trainable


def apply_freeze(policy: FreezePolicy, model: nn.Module) -> list[nn.Parameter]:
    """Set ``requires_grad`` per the policy and return the trainable parameters."""
    frozen, trainable = classify_parameters(policy, model)
    for p in frozen.values():
        p.requires_grad_(False)
    for p in trainable.values():
        p.requires_grad_(True)
    return list(trainable.values())


def parameter_digest(params: Iterable[tuple[str, torch.Tensor]]) -> dict[str, str]:
    """sha256 of each tensor's raw bytes, for bit-identity checks."""
    return {name: hashlib.sha256(t.detach().cpu().contiguous().numpy().tobytes()).hexdigest()
            for name, t in params}


def count_parameters(params: Iterable[torch.Tensor]) -> int:
    return sum(p.numel() for p in params)

