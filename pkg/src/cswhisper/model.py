"""Miniature Whisper-style encoder-decoder.

Pre-norm transformer blocks with sinusoidal positions on both sides and an
output projection tied to the token embedding. A linear frame projection
stands in for the convolutional front-end, so the encoder keeps the input
frame rate.

Adapters are passed in at call time rather than owned by the model, which
lets one frozen instance serve any number of adapter sets. Decoder calls
accept a tuple of adapter sets: the batch is then split into as many equal
chunks and chunk ``k`` is adapted by set ``k``. That is how the two
language paths share every frozen weight while keeping their own adapters.
"""

from __future__ import annotations

import math
from typing import Callable, Sequence

import torch
from torch import nn

from .adapters import AdapterHooks, AdapterPair
from .config import LANGS, ModelConfig
from .errors import ConfigurationError, InputError

_MASK = -1e9


def sinusoids(length: int, channels: int) -> torch.Tensor:
    pos = torch.arange(length, dtype=torch.float64)[:, None]
    inv = torch.exp(-math.log(10000.0) * torch.arange(0, channels, 2, dtype=torch.float64) / channels)
    pe = torch.zeros(length, channels, dtype=torch.float64)
    pe[:, 0::2] = torch.sin(pos * inv)
    pe[:, 1::2] = torch.cos(pos * inv)
    return pe.float()


class MultiHeadAttention(nn.Module):
    def __init__(self, d_model: int, n_heads: int):
        super().__init__()
        self.n_heads = n_heads
        self.query = nn.Linear(d_model, d_model)
        self.key = nn.Linear(d_model, d_model, bias=False)
        self.value = nn.Linear(d_model, d_model)
        self.out = nn.Linear(d_model, d_model)

    def forward(self, x, kv=None, bias=None):
        kv = x if kv is None else kv
        B, Lq, D = x.shape
        Lk = kv.shape[1]
        h = self.n_heads
        q = self.query(x).view(B, Lq, h, D // h).transpose(1, 2)
        k = self.key(kv).view(B, Lk, h, D // h).transpose(1, 2)
        v = self.value(kv).view(B, Lk, h, D // h).transpose(1, 2)
        att = q @ k.transpose(-1, -2) / math.sqrt(D // h)
        if bias is not None:
            att = att + bias
        w = att.softmax(dim=-1)
        return self.out((w @ v).transpose(1, 2).reshape(B, Lq, D))


def _mlp(d_model, d_ff):
    return nn.Sequential(nn.Linear(d_model, d_ff), nn.GELU(), nn.Linear(d_ff, d_model))


def _adapted(pairs, which, a):
    """Apply ``pairs[k].<which>`` to batch chunk ``k`` of ``a``."""
    if pairs is None:
        return a
    if len(pairs) == 1:
        return a if pairs[0] is None else getattr(pairs[0], which)(a)
    chunks = a.chunk(len(pairs), dim=0)
    return torch.cat([c if p is None else getattr(p, which)(c) for p, c in zip(pairs, chunks)])


class EncoderLayer(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.attn_ln = nn.LayerNorm(cfg.d_model)
        self.attn = MultiHeadAttention(cfg.d_model, cfg.n_heads)
        self.mlp_ln = nn.LayerNorm(cfg.d_model)
        self.mlp = _mlp(cfg.d_model, cfg.d_ff)

    def forward(self, x, bias=None, pair: AdapterPair | None = None):
        a = self.attn(self.attn_ln(x), bias=bias)
        if pair is not None:
            a = pair.after_self_attn(a)
        x = x + a
        m = self.mlp(self.mlp_ln(x))
        if pair is not None:
            m = pair.after_mlp(m)
        return x + m


class DecoderLayer(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.attn_ln = nn.LayerNorm(cfg.d_model)
        self.attn = MultiHeadAttention(cfg.d_model, cfg.n_heads)
        self.cross_attn_ln = nn.LayerNorm(cfg.d_model)
        self.cross_attn = MultiHeadAttention(cfg.d_model, cfg.n_heads)
        self.mlp_ln = nn.LayerNorm(cfg.d_model)
        self.mlp = _mlp(cfg.d_model, cfg.d_ff)

    def forward(self, x, enc, self_bias, cross_bias, pairs=None):
        x = x + _adapted(pairs, "after_self_attn", self.attn(self.attn_ln(x), bias=self_bias))
        x = x + self.cross_attn(self.cross_attn_ln(x), kv=enc, bias=cross_bias)
        return x + _adapted(pairs, "after_mlp", self.mlp(self.mlp_ln(x)))


def key_padding_bias(lengths: torch.Tensor | None, T: int) -> torch.Tensor | None:
    """Additive ``[B, 1, 1, T]`` mask hiding padded frames."""
    if lengths is None:
        return None
    valid = torch.arange(T)[None, :] < lengths[:, None]
    return torch.where(valid, 0.0, _MASK)[:, None, None, :]


class WhisperMini(nn.Module):
    def __init__(self, cfg: ModelConfig, seed: int | None = None):
        super().__init__()
        self.cfg = cfg
        with torch.random.fork_rng():
            if seed is not None:
                torch.manual_seed(seed)
            self._build(cfg)

    def _build(self, cfg):
        d = cfg.d_model
        self.frame_proj = nn.Linear(cfg.n_feat, d)
        self.enc_layers = nn.ModuleList(EncoderLayer(cfg) for _ in range(cfg.n_enc_layers))
        self.enc_ln = nn.LayerNorm(d)
        self.token_embedding = nn.Embedding(cfg.vocab_size, d)
        nn.init.normal_(self.token_embedding.weight, std=d ** -0.5)
        self.dec_layers = nn.ModuleList(DecoderLayer(cfg) for _ in range(cfg.n_dec_layers))
        self.dec_ln = nn.LayerNorm(d)
        self.register_buffer("enc_pos", sinusoids(cfg.max_src_frames, d), persistent=False)
        self.register_buffer("dec_pos", sinusoids(cfg.max_tgt_tokens, d), persistent=False)

    # -- encoder -----------------------------------------------------------
    def _check_features(self, feats):
        if feats.ndim != 3:
            raise InputError(f"features must be [B, T, n_feat], got {tuple(feats.shape)}")
        if feats.shape[-1] != self.cfg.n_feat:
            raise ConfigurationError(
                f"feature width {feats.shape[-1]} does not match n_feat={self.cfg.n_feat}")
        T = feats.shape[1]
        if T < 1:
            raise InputError("feature sequence has zero frames")
        if T > self.cfg.max_src_frames:
            raise InputError(f"{T} frames exceed max_src_frames={self.cfg.max_src_frames}")
        if not torch.all(torch.isfinite(feats)):
            raise InputError("features contain non-finite values")

    def encode(self, feats: torch.Tensor, lengths: torch.Tensor | None = None,
               hooks: AdapterHooks | None = None) -> torch.Tensor:
        """``[B, T, n_feat]`` frames to ``[B, T, d_model]`` encoder states."""
        self._check_features(feats)
        T = feats.shape[1]
        x = self.frame_proj(feats) + self.enc_pos[:T]
        bias = key_padding_bias(lengths, T)
        for i, layer in enumerate(self.enc_layers):
            x = layer(x, bias, None if hooks is None else hooks.enc(i))
        return self.enc_ln(x)

    # -- decoder -----------------------------------------------------------
    def decoder_states(self, tokens: torch.Tensor, enc: torch.Tensor,
                       enc_lengths: torch.Tensor | None = None,
                       hooks: AdapterHooks | Sequence[AdapterHooks | None] | None = None,
                       ) -> torch.Tensor:
        """Final normalized decoder states ``[B, L, d_model]``.

        ``tokens`` and ``enc`` share the batch axis. With a tuple of ``P``
        hook sets the batch must hold ``P`` equal chunks, one per set.
        """
        B, L = tokens.shape
        if L < 1:
            raise InputError("decoder prefix is empty")
        if L > self.cfg.max_tgt_tokens:
            raise InputError(f"prefix length {L} exceeds max_tgt_tokens={self.cfg.max_tgt_tokens}")
        if isinstance(hooks, AdapterHooks) or hooks is None:
            hooks = (hooks,)
        if B % len(hooks):
            raise ConfigurationError("batch does not split evenly across adapter sets")
        x = self.token_embedding(tokens) + self.dec_pos[:L]
        causal = torch.triu(torch.full((L, L), _MASK), diagonal=1)
        cross = key_padding_bias(enc_lengths, enc.shape[1])
        for i, layer in enumerate(self.dec_layers):
            pairs = tuple(None if h is None else h.dec(i) for h in hooks)
            if all(p is None for p in pairs):
                pairs = None
            x = layer(x, enc, causal, cross, pairs)
        return self.dec_ln(x)

    def logits(self, states: torch.Tensor) -> torch.Tensor:
        return states @ self.token_embedding.weight.T

    def decode_step(self, prefix: Sequence[int] | torch.Tensor, enc: torch.Tensor,
                    hooks: AdapterHooks | None = None) -> torch.Tensor:
        """Next-token logits ``[vocab_size]`` for one utterance.

        ``enc`` is ``[T, d_model]`` (or ``[1, T, d_model]``).
        """
        prefix = torch.as_tensor(prefix, dtype=torch.long).reshape(1, -1)
        if enc.ndim == 2:
            enc = enc[None]
        return self.logits(self.decoder_states(prefix, enc, hooks=hooks))[0, -1]


def build_prompt(mode: str, cfg: ModelConfig, lang: str | None = None):
    """Decoder prompt token ids.

    ``single`` -> ``[sot, lang, task]``; ``concat`` -> ``[sot, en, zh, task]``;
    ``pair`` -> the zh and en single prompts, in that order.
    """
    st = cfg.special_tokens
    if mode == "single":
        if lang not in LANGS:
            raise InputError(f"unknown language tag {lang!r}")
        return [st.sot, st.lang_token(lang), st.task]
    if mode == "concat":
        return [st.sot, st.lang_en, st.lang_zh, st.task]
    if mode == "pair":
        return ([st.sot, st.lang_zh, st.task], [st.sot, st.lang_en, st.task])
    if mode in LANGS:
        return build_prompt("single", cfg, mode)
    raise InputError(f"unknown prompt mode {mode!r}")


def suppress_mask(cfg: ModelConfig, n_symbols: int) -> torch.Tensor:
    """Additive logit mask allowing only text symbols and end-of-text."""
    mask = torch.full((cfg.vocab_size,), _MASK)
    mask[:n_symbols] = 0.0
    mask[cfg.special_tokens.eot] = 0.0
    return mask


def greedy_search(next_logits: Callable[[torch.Tensor], torch.Tensor], prompts: torch.Tensor,
                  eot: int, max_len: int, mask: torch.Tensor | None = None) -> list[list[int]]:
    """Batched greedy search.

    ``next_logits`` maps ``[B, L]`` token ids to ``[B, V]`` logits for the
    next position. Returns one list per row, without prompt and eot.
    """
    B = prompts.shape[0]
    tokens = prompts
    done = torch.zeros(B, dtype=torch.bool)
    out = [[] for _ in range(B)]
    for _ in range(max_len):
        logits = next_logits(tokens)
        if mask is not None:
            logits = logits + mask
        nxt = logits.argmax(dim=-1)
        for b in range(B):
            if not done[b]:
                if nxt[b].item() == eot:
                    done[b] = True
                else:
                    out[b].append(int(nxt[b]))
        if bool(done.all()):
            break
        tokens = torch.cat([tokens, nxt[:, None]], dim=1)
    return out


@torch.no_grad()
def greedy_decode(model: WhisperMini, enc: torch.Tensor, prompt: Sequence[int],
                  hooks: AdapterHooks | None = None, max_len: int | None = None) -> list[int]:
    """Greedy transcription of one utterance; output excludes prompt and eot."""
    cfg = model.cfg
    if max_len is None:
        max_len = cfg.max_tgt_tokens - len(prompt)
    max_len = min(max_len, cfg.max_tgt_tokens - len(prompt))
    if enc.ndim == 2:
        enc = enc[None]

    def step(tokens):
        return model.logits(model.decoder_states(tokens, enc, hooks=hooks))[:, -1]

    prompts = torch.as_tensor(prompt, dtype=torch.long)[None]
    return greedy_search(step, prompts, cfg.special_tokens.eot, max_len)[0]

