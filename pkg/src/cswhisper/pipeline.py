"""Frozen base model plus the adaptation modules selected by a variant.

``Variant`` flags map one-to-one onto the ablation table:

======  ===========  ===========  =======  ===========  =======  ======
ID      enc_adapters dec_adapters refiner  refiner_ctc  enc_ctc  prompt
======  ===========  ===========  =======  ===========  =======  ======
0                                                                single
1       x                                                        concat
2                    x                                           concat
3       x            x                                           concat
4       x            x                                  x        concat
5       x            x            x                              concat
6       x            x            x        x                     concat
7       x            x                                           pair
8       x            x            x        x                     pair
======  ===========  ===========  =======  ===========  =======  ======

``pair`` is language-aware decoding: the decoder adapters become two
language-specific sets and a fusion module mixes the paths.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .adapters import wire_decoder_adapters, wire_encoder_adapters
from .config import ModelConfig
from .ctc import ctc_nll_batch
from .errors import ConfigurationError
from .language_aware import FusionModule, dual_states, fuse, lid_aux_loss, make_paths
from .model import WhisperMini, build_prompt, greedy_search, suppress_mask
from .refiner import CTCHead, EncoderRefiner, RefinerConfig

PROMPT_MODES = ("single", "concat", "pair")
IGNORE = -100


@dataclass(frozen=True)
class Variant:
    enc_adapters: bool = False
    dec_adapters: bool = False
    refiner: bool = False
    refiner_ctc: bool = False
    enc_ctc: bool = False
    prompt_mode: str = "concat"

    def __post_init__(self):
        if self.prompt_mode not in PROMPT_MODES:
            raise ConfigurationError(f"prompt_mode must be one of {PROMPT_MODES}")
        if self.refiner_ctc and not self.refiner:
            raise ConfigurationError("refiner_ctc requires refiner")
        if self.enc_ctc and self.refiner:
            raise ConfigurationError("enc_ctc supervises the raw encoder; use refiner_ctc with a refiner")
        if self.prompt_mode == "pair" and not self.dec_adapters:
            raise ConfigurationError("language-aware decoding (prompt_mode=pair) needs dec_adapters")

    @property
    def uses_ctc(self) -> bool:
        return self.refiner_ctc or self.enc_ctc

    @property
    def language_aware(self) -> bool:
        return self.prompt_mode == "pair"

    def to_dict(self) -> dict:
        return asdict(self)


TABLE_I = {
    0: Variant(prompt_mode="single"),
    1: Variant(enc_adapters=True),
    2: Variant(dec_adapters=True),
    3: Variant(enc_adapters=True, dec_adapters=True),
    4: Variant(enc_adapters=True, dec_adapters=True, enc_ctc=True),
    5: Variant(enc_adapters=True, dec_adapters=True, refiner=True),
    6: Variant(enc_adapters=True, dec_adapters=True, refiner=True, refiner_ctc=True),
    7: Variant(enc_adapters=True, dec_adapters=True, prompt_mode="pair"),
    8: Variant(enc_adapters=True, dec_adapters=True, refiner=True, refiner_ctc=True,
               prompt_mode="pair"),
}


@dataclass
class Batch:
    feats: torch.Tensor        # [B, T, n_feat]
    lengths: torch.Tensor      # [B]
    tokens: torch.Tensor       # [B, L] text ids, padded with pad id
    token_lengths: torch.Tensor
    langs: list[str]           # prompt language per utterance (dominant)


def collate(utts: Sequence, pad_id: int) -> Batch:
    B = len(utts)
    T = max(u.n_frames for u in utts)
    L = max(len(u.tokens) for u in utts)
    n_feat = utts[0].features.shape[1]
    feats = np.zeros((B, T, n_feat), dtype=np.float32)
    tokens = np.full((B, L), pad_id, dtype=np.int64)
    for b, u in enumerate(utts):
        feats[b, :u.n_frames] = u.features
        tokens[b, :len(u.tokens)] = u.tokens
    return Batch(torch.from_numpy(feats),
                 torch.tensor([u.n_frames for u in utts]),
                 torch.from_numpy(tokens),
                 torch.tensor([len(u.tokens) for u in utts]),
                 [u.dominant_lang for u in utts])


class CSModel(nn.Module):
    """A frozen ``WhisperMini`` under ``base`` plus optional adaptation modules."""

    def __init__(self, base: WhisperMini, variant: Variant = Variant(),
                 rc: RefinerConfig | None = None, seed: int = 0):
        super().__init__()
        cfg = base.cfg
        self.base = base
        self.variant = variant
        self.rc = rc if rc is not None else RefinerConfig(hidden=cfg.d_model)
        self.enc_hooks = self.dec_hooks = self.paths = None
        self.refiner = self.ctc_head = self.fusion = self.lid_head = None
        with torch.random.fork_rng():
            torch.manual_seed(seed)
            if variant.enc_adapters:
                self.enc_hooks = wire_encoder_adapters(cfg, seed=seed)
            if variant.dec_adapters and not variant.language_aware:
                self.dec_hooks = wire_decoder_adapters(cfg, seed=seed + 1)
            if variant.language_aware:
                self.paths = make_paths(cfg, seed=seed + 2)
                self.fusion = FusionModule(cfg.d_model)
                self.lid_head = nn.Linear(cfg.d_model, 2)
            if variant.refiner:
                self.refiner = EncoderRefiner(cfg.d_model, self.rc, seed=seed + 4)
            if variant.uses_ctc:
                self.ctc_head = CTCHead(cfg.d_model, cfg.vocab_size)

    @property
    def cfg(self) -> ModelConfig:
        return self.base.cfg

    def path_list(self):
        return (self.paths["zh"], self.paths["en"])

    # -- encoder side --------------------------------------------------------
    def encoder_side(self, feats, lengths=None):
        """Encoder (plus refiner) states and, if a CTC head exists, its log-probs."""
        h = self.base.encode(feats, lengths, self.enc_hooks)
        if self.refiner is not None:
            h = self.refiner(h, lengths)
        lp = self.ctc_head(h) if self.ctc_head is not None else None
        return h, lp

    # -- decoder side --------------------------------------------------------
    def prompts(self, langs: Sequence[str], mode: str | None = None) -> torch.Tensor:
        mode = self.variant.prompt_mode if mode is None else mode
        if mode == "single":
            rows = [build_prompt("single", self.cfg, lang) for lang in langs]
        elif mode == "concat":
            rows = [build_prompt("concat", self.cfg)] * len(langs)
        else:
            raise ConfigurationError(f"no single prompt tensor for mode {mode!r}")
        return torch.tensor(rows, dtype=torch.long)

    def decoder_side(self, tokens, enc, enc_lengths, langs, mode=None):
        """States predicting each text position and the end token.

        ``tokens`` is ``[B, L]`` text without prompt. Returns a dict with
        ``states`` ``[B, L + 1, d]`` (fused states for language-aware
        decoding) and, for the dual path, ``y_zh``, ``y_en`` and ``weights``.
        """
        mode = self.variant.prompt_mode if mode is None else mode
        if mode == "pair":
            if self.paths is None:
                raise ConfigurationError("pair prompts need language-aware adapters")
            y_zh, y_en = dual_states(self.base, tokens, enc, self.path_list(), enc_lengths)
            P = len(self.paths["zh"].prompt)
            y_zh, y_en = y_zh[:, P - 1:], y_en[:, P - 1:]
            y_mix, w = fuse(y_zh, y_en, self.fusion)
            return {"states": y_mix, "y_zh": y_zh, "y_en": y_en, "weights": w}
        prompt = self.prompts(langs, mode)
        P = prompt.shape[1]
        x = torch.cat([prompt, tokens], dim=1)
        states = self.base.decoder_states(x, enc, enc_lengths, hooks=self.dec_hooks)
        return {"states": states[:, P - 1:]}

    def losses(self, batch: Batch, mode: str | None = None) -> dict:
        """Per-batch loss terms (each a batch mean of per-utterance sums)."""
        cfg = self.cfg
        enc, lp = self.encoder_side(batch.feats, batch.lengths)
        out = self.decoder_side(batch.tokens, enc, batch.lengths, batch.langs, mode)
        logits = self.base.logits(out["states"])
        B, L = batch.tokens.shape
        target = torch.full((B, L + 1), IGNORE, dtype=torch.long)
        pos = torch.arange(L + 1)[None, :]
        target = torch.where(pos < batch.token_lengths[:, None],
                             torch.cat([batch.tokens, batch.tokens[:, :1]], dim=1), target)
        target[torch.arange(B), batch.token_lengths] = cfg.special_tokens.eot
        nll = F.cross_entropy(logits.transpose(1, 2), target, ignore_index=IGNORE, reduction="none")
        terms = {"L_att": nll.sum(dim=1).mean()}
        if lp is not None:
            terms["L_ctc"] = ctc_nll_batch(lp, batch.lengths, batch.tokens,
                                           batch.token_lengths).mean()
        if "y_zh" in out:
            # rows 1..n of the sliced states sit on text tokens; row 0 is the last prompt token
            mask = (pos >= 1) & (pos <= batch.token_lengths[:, None])
            terms["L_lid"] = lid_aux_loss(out["y_zh"], out["y_en"], self.lid_head, mask)
            terms["weights"] = out["weights"]
        return terms

    # -- inference -------------------------------------------------------------
    @torch.no_grad()
    def transcribe(self, batch: Batch, mode: str | None = None, n_symbols: int = 32,
                   max_len: int | None = None) -> list[list[int]]:
        mode = self.variant.prompt_mode if mode is None else mode
        enc, _ = self.encoder_side(batch.feats, batch.lengths)
        B = enc.shape[0]
        if mode == "pair":
            P = len(self.paths["zh"].prompt)
            start = torch.as_tensor(self.paths["zh"].prompt, dtype=torch.long).expand(B, -1)
        else:
            start = self.prompts(batch.langs, mode)
            P = start.shape[1]
        limit = self.cfg.max_tgt_tokens - P
        max_len = limit if max_len is None else min(max_len, limit)

        def next_logits(tokens):
            text = tokens[:, P:]
            if mode == "pair":
                y_zh, y_en = dual_states(self.base, text, enc, self.path_list(), batch.lengths)
                y, _ = fuse(y_zh[:, -1], y_en[:, -1], self.fusion)
                return self.base.logits(y)
            x = torch.cat([start, text], dim=1)
            s = self.base.decoder_states(x, enc, batch.lengths, hooks=self.dec_hooks)
            return self.base.logits(s[:, -1])

        mask = suppress_mask(self.cfg, n_symbols)
        return greedy_search(next_logits, start, self.cfg.special_tokens.eot, max_len, mask)
