"""Encoder refiner: recurrent layers over encoder states plus a CTC head."""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch import nn
from torch.nn.utils.rnn import pack_padded_sequence, pad_packed_sequence

from .errors import ConfigurationError


@dataclass(frozen=True)
class RefinerConfig:
    n_layers: int = 2
    hidden: int = 64
    bidirectional: bool = False

    def __post_init__(self):
        if self.n_layers < 1 or self.hidden < 1:
            raise ConfigurationError("refiner needs n_layers >= 1 and hidden >= 1")


class EncoderRefiner(nn.Module):
    """``h -> h + proj(LSTM(h))`` with ``proj`` zero-initialized.

    The output width always equals the input width; ``bypass=True`` turns
    the module into the identity so the no-refiner pipeline is a flag away.
    """

    def __init__(self, d_model: int, rc: RefinerConfig = RefinerConfig(),
                 seed: int | None = None):
        super().__init__()
        self.rc = rc
        self.bypass = False
        with torch.random.fork_rng():
            if seed is not None:
                torch.manual_seed(seed)
            self.lstm = nn.LSTM(d_model, rc.hidden, num_layers=rc.n_layers, batch_first=True,
                                bidirectional=rc.bidirectional)
        self.proj = nn.Linear(rc.hidden * (2 if rc.bidirectional else 1), d_model)
        nn.init.zeros_(self.proj.weight)
        nn.init.zeros_(self.proj.bias)

    def recurrent(self, h: torch.Tensor, lengths: torch.Tensor | None = None) -> torch.Tensor:
        if lengths is None:
            return self.lstm(h)[0]
        packed = pack_padded_sequence(h, lengths.cpu(), batch_first=True, enforce_sorted=False)
        out, _ = self.lstm(packed)
        return pad_packed_sequence(out, batch_first=True, total_length=h.shape[1])[0]

    def forward(self, h: torch.Tensor, lengths: torch.Tensor | None = None) -> torch.Tensor:
        if self.bypass:
            return h
        return h + self.proj(self.recurrent(h, lengths))


def refine(enc: torch.Tensor, refiner: EncoderRefiner, lengths=None) -> torch.Tensor:
    """Refine ``[T, d]`` or ``[B, T, d]`` encoder states, preserving length."""
    if enc.ndim == 2:
        return refiner(enc[None])[0]
    return refiner(enc, lengths)


class CTCHead(nn.Module):
    """Linear map to ``vocab_size + 1`` classes (blank last), log-softmaxed."""

    def __init__(self, d_model: int, vocab_size: int):
        super().__init__()
        self.linear = nn.Linear(d_model, vocab_size + 1)

    def forward(self, states: torch.Tensor) -> torch.Tensor:
        return F.log_softmax(self.linear(states), dim=-1)


def enc_ref_loss(l_att, l_ctc, alpha: float):
    """``alpha * l_att + (1 - alpha) * l_ctc``."""
    if not 0.0 <= alpha <= 1.0:
        raise ConfigurationError(f"alpha must be in [0, 1], got {alpha}")
    if alpha == 1.0:
        return l_att
    if alpha == 0.0:
        return l_ctc
    return alpha * l_att + (1.0 - alpha) * l_ctc
