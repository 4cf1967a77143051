"""Language-aware dual-path decoding.

Both language paths run through the same frozen decoder; they differ only
in their prompt (``[sot, <lang>, task]``) and in their per-layer adapters.
A two-score fusion module mixes the two final decoder states position by
position.
"""

from __future__ import annotations

from typing import NamedTuple, Sequence

import torch
import torch.nn.functional as F
from torch import nn

from .adapters import wire_decoder_adapters
from .config import ModelConfig
from .errors import ConfigurationError, InputError
from .model import WhisperMini, build_prompt

LID_TARGET = {"zh": 0, "en": 1}


class LanguagePath(nn.Module):
    """One language's prompt and decoder adapters."""

    def __init__(self, lang: str, cfg: ModelConfig, seed: int | None = None):
        super().__init__()
        self.lang = lang
        self.prompt = build_prompt("single", cfg, lang)
        self.hooks = wire_decoder_adapters(cfg, seed=seed)


class FusionModule(nn.Module):
    def __init__(self, d_model: int):
        super().__init__()
        self.score_zh = nn.Linear(d_model, 1)
        self.score_en = nn.Linear(d_model, 1)

    def forward(self, y_zh, y_en):
        return fuse(y_zh, y_en, self)


def fuse(y_zh: torch.Tensor, y_en: torch.Tensor, fm: FusionModule):
    """Per-position convex mix of the two paths.

    The two scalar scores are normalized jointly, so the weights of each
    position always sum to one. Returns ``(y_mix, weights)`` with weights
    ``[..., 2]`` ordered (zh, en).
    """
    if y_zh.shape != y_en.shape:
        raise InputError(f"path outputs differ in shape: {tuple(y_zh.shape)} vs {tuple(y_en.shape)}")
    scores = torch.cat([fm.score_zh(y_zh), fm.score_en(y_en)], dim=-1)
    w = scores.softmax(dim=-1)
    y_mix = w[..., :1] * y_zh + w[..., 1:] * y_en
    return y_mix, w


class DualDecodeOutput(NamedTuple):
    y_zh: torch.Tensor
    y_en: torch.Tensor
    y_mix: torch.Tensor
    fusion_weights: torch.Tensor


def _check_paths(paths):
    if len(paths) != 2 or [p.lang for p in paths] != ["zh", "en"]:
        raise ConfigurationError("expected exactly a (zh, en) pair of language paths")
    if len(paths[0].prompt) != len(paths[1].prompt):
        raise ConfigurationError("language prompts must have equal length")
    if len(paths[0].hooks.decoder) != len(paths[1].hooks.decoder):
        raise ConfigurationError("language paths carry different adapter layouts")


def dual_states(model: WhisperMini, tokens: torch.Tensor, enc: torch.Tensor,
                paths: Sequence[LanguagePath], enc_lengths: torch.Tensor | None = None):
    """Run both paths as one stacked batch.

    ``tokens`` is ``[B, L]`` without any prompt; each path prepends its own.
    Returns the two ``[B, P + L, d_model]`` state tensors (prompt positions
    included).
    """
    _check_paths(paths)
    B = tokens.shape[0]
    stacked = []
    for p in paths:
        prompt = torch.as_tensor(p.prompt, dtype=torch.long).expand(B, -1)
        stacked.append(torch.cat([prompt, tokens], dim=1))
    x = torch.cat(stacked, dim=0)
    enc2 = torch.cat([enc, enc], dim=0)
    lens2 = None if enc_lengths is None else torch.cat([enc_lengths, enc_lengths])
    states = model.decoder_states(x, enc2, lens2, hooks=tuple(p.hooks for p in paths))
    return states[:B], states[B:]


def dual_decode_step(model: WhisperMini, prefix, enc: torch.Tensor,
                     paths: Sequence[LanguagePath], fusion: FusionModule) -> DualDecodeOutput:
    """Dual-path decoder states for one utterance.

    ``prefix`` holds the text tokens decoded so far (no prompt) and ``enc``
    the ``[T, d_model]`` (refined) encoder states. Returned tensors cover
    every position from the last prompt token onwards, i.e. ``len(prefix)+1``
    rows; the last row predicts the next token.
    """
    tokens = torch.as_tensor(list(prefix), dtype=torch.long).reshape(1, -1)
    if enc.ndim == 2:
        enc = enc[None]
    y_zh, y_en = dual_states(model, tokens, enc, paths)
    start = len(paths[0].prompt) - 1
    y_zh, y_en = y_zh[0, start:], y_en[0, start:]
    y_mix, w = fuse(y_zh, y_en, fusion)
    return DualDecodeOutput(y_zh, y_en, y_mix, w)


def lid_aux_loss(y_zh: torch.Tensor, y_en: torch.Tensor, lid_head: nn.Module,
                 mask: torch.Tensor | None = None) -> torch.Tensor:
    """Language-identification auxiliary loss over the two paths.

    Each path's final states ``[B, L, d]`` are mean-pooled over the valid
    positions in ``mask`` (``[B, L]``, prompt positions excluded by the
    caller) and classified by the shared two-way ``lid_head``; the zh path
    is labelled zh and the en path en. Returns the sum of both batch-mean
    cross-entropies.
    """
    if y_zh.ndim == 2:
        y_zh, y_en = y_zh[None], y_en[None]
        mask = None if mask is None else mask[None]
    if mask is None:
        mask = torch.ones(y_zh.shape[:2], dtype=y_zh.dtype)
    m = mask.to(y_zh.dtype)[..., None]
    denom = m.sum(dim=1).clamp(min=1.0)
    total = 0.0
    for y, lang in ((y_zh, "zh"), (y_en, "en")):
        pooled = (y * m).sum(dim=1) / denom
        target = torch.full((y.shape[0],), LID_TARGET[lang], dtype=torch.long)
        total = total + F.cross_entropy(lid_head(pooled), target)
    return total


def dec_loss(l_att, l_lid):
    return l_att + l_lid


def make_paths(cfg: ModelConfig, seed: int | None = None) -> nn.ModuleDict:
    return nn.ModuleDict({
        "zh": LanguagePath("zh", cfg, seed),
        "en": LanguagePath("en", cfg, None if seed is None else seed + 1),
    })

