"""Model hyperparameters and the special-token layout."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

from .errors import ConfigurationError, InputError

LANGS = ("zh", "en")


@dataclass(frozen=True)
class SpecialTokens:
    eot: int = 32
    sot: int = 33
    lang_zh: int = 34
    lang_en: int = 35
    task: int = 36
    pad: int = 37
    ctc_blank: int = 40

    def lang_token(self, lang: str) -> int:
        if lang == "zh":
            return self.lang_zh
        if lang == "en":
            return self.lang_en
        raise InputError(f"unknown language tag {lang!r}")

    def text_ids(self) -> tuple[int, ...]:
        return (self.sot, self.eot, self.lang_zh, self.lang_en, self.task, self.pad)


@dataclass(frozen=True)
class ModelConfig:
    """Architecture of the miniature encoder-decoder.

    The defaults are the desk-scale preset. Symbols of the two toy
    languages occupy ids ``0..31`` (``zh`` first), special tokens sit
    above them and the CTC blank is the appended class ``vocab_size``.
    """

    d_model: int = 64
    n_heads: int = 4
    n_enc_layers: int = 2
    n_dec_layers: int = 2
    d_ff: int = 128
    n_feat: int = 16
    vocab_size: int = 40
    max_src_frames: int = 96
    max_tgt_tokens: int = 24
    adapter_rank: int = 8
    special_tokens: SpecialTokens = field(default_factory=SpecialTokens)

    def __post_init__(self):
        for name in ("d_model", "n_heads", "n_enc_layers", "n_dec_layers", "d_ff",
                     "n_feat", "vocab_size", "max_src_frames", "max_tgt_tokens",
                     "adapter_rank"):
            value = getattr(self, name)
            if not isinstance(value, int) or value <= 0:
                raise ConfigurationError(f"{name} must be a positive int, got {value!r}")
        if self.d_model % self.n_heads:
            raise ConfigurationError("d_model must be divisible by n_heads")
        if self.adapter_rank >= self.d_model:
            raise ConfigurationError("adapter_rank must be smaller than d_model")
        ids = self.special_tokens.text_ids()
        if len(set(ids)) != len(ids):
            raise ConfigurationError("special token ids must be distinct")
        if any(i < 0 or i >= self.vocab_size for i in ids):
            raise ConfigurationError("special token ids must lie in [0, vocab_size)")
        if self.special_tokens.ctc_blank != self.vocab_size:
            raise ConfigurationError("ctc_blank must equal vocab_size")

    @property
    def blank(self) -> int:
        return self.special_tokens.ctc_blank

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        st = d.pop("special_tokens", None)
        special = SpecialTokens(**st) if st is not None else SpecialTokens()
        try:
            return cls(special_tokens=special, **d)
        except TypeError as exc:
            raise ConfigurationError(str(exc)) from exc
