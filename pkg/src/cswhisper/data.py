"""Synthetic Mandarin-English code-switching corpus.

Each toy language owns a disjoint block of token ids and one acoustic
prototype per token. An utterance is a token sequence whose language flips
after every token with probability ``switch_prob``; every token is rendered
as 3-5 noisy copies of its prototype. Prototypes of the two languages are
offset in opposite directions along one fixed feature axis, so a linear
classifier separates the languages by construction. The optional
``similarity`` knob pulls symbol ``k`` of one language towards symbol ``k``
of the other on all remaining axes, which makes the languages acoustically
confusable much like accented speech.

Transcripts render zh symbols as single CJK characters and en symbols as
ASCII pseudo-words, so scoring runs through the same mixed tokenizer as real
data.
"""

from __future__ import annotations

import base64
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .config import LANGS
from .ctc import min_frames
from .errors import ConfigurationError, ParseError, ValidationError

SPLITS = ("train", "dev_man", "dev_sge")
SPLIT_DOMINANT = {"dev_man": "zh", "dev_sge": "en"}

ZH_CHARS = "的一是不了人我在有他这中大来上国"
EN_WORDS = ("ka", "lo", "mi", "nu", "pe", "ro", "su", "ti",
            "va", "we", "xo", "yu", "za", "bo", "di", "fe")

MANIFEST_KEYS = ("id", "split", "dominant_lang", "tokens", "lang_tags", "text",
                 "n_frames", "n_feat", "features")


@dataclass(frozen=True)
class Vocabulary:
    """Token-id layout of the toy languages: zh ids first, then en ids."""

    n_per_lang: int = 16

    def __post_init__(self):
        if not 1 <= self.n_per_lang <= len(ZH_CHARS):
            raise ConfigurationError(f"n_per_lang must be in [1, {len(ZH_CHARS)}]")

    @property
    def n_symbols(self) -> int:
        return 2 * self.n_per_lang

    def symbols(self, lang: str) -> list[int]:
        off = 0 if lang == "zh" else self.n_per_lang
        return list(range(off, off + self.n_per_lang))

    def lang_of(self, token: int) -> str:
        if 0 <= token < self.n_per_lang:
            return "zh"
        if self.n_per_lang <= token < self.n_symbols:
            return "en"
        raise ValidationError(f"token {token} is not a text symbol")

    def surface(self, token: int) -> str:
        if self.lang_of(token) == "zh":
            return ZH_CHARS[token]
        return EN_WORDS[token - self.n_per_lang]

    def render(self, tokens: Sequence[int]) -> str:
        """Transcript text: zh runs written solid, en words space separated."""
        parts = []
        prev = None
        for t in tokens:
            if t >= self.n_symbols:
                continue
            lang = self.lang_of(t)
            if parts and not (lang == "zh" and prev == "zh"):
                parts.append(" ")
            parts.append(self.surface(t))
            prev = lang
        return "".join(parts)


@dataclass
class ToyLanguageSpec:
    lang: str
    symbols: list[int]
    prototypes: np.ndarray  # [n_symbols, n_feat]
    frames_per_symbol: tuple[int, int] = (3, 5)

    def __post_init__(self):
        if not self.symbols:
            raise ConfigurationError(f"language {self.lang!r} has no symbols")
        if self.prototypes.shape[0] != len(self.symbols):
            raise ConfigurationError("one prototype per symbol is required")
        lo, hi = self.frames_per_symbol
        if not 1 <= lo <= hi:
            raise ConfigurationError("frames_per_symbol must satisfy 1 <= lo <= hi")


def make_language_specs(seed: int = 0, n_feat: int = 16, vocab: Vocabulary = Vocabulary(),
                        lang_shift: float = 0.5, similarity: float = 1.0,
                        frames_per_symbol: tuple[int, int] = (3, 5)):
    """Build the (zh, en) pair of toy languages.

    Feature 0 carries the language: ``+lang_shift`` for zh, ``-lang_shift``
    for en. The other axes are standard normal, with en prototype ``k``
    blended towards zh prototype ``k`` by ``similarity`` in ``[0, 1]``.
    """
    if not 0.0 <= similarity <= 1.0:
        raise ConfigurationError("similarity must be in [0, 1]")
    rng = np.random.default_rng([seed, 0xC0DE])
    n = vocab.n_per_lang
    zh = rng.standard_normal((n, n_feat))
    en = rng.standard_normal((n, n_feat))
    en = similarity * zh + np.sqrt(1.0 - similarity ** 2) * en
    zh[:, 0] = lang_shift
    en[:, 0] = -lang_shift
    return (ToyLanguageSpec("zh", vocab.symbols("zh"), zh, frames_per_symbol),
            ToyLanguageSpec("en", vocab.symbols("en"), en, frames_per_symbol))


@dataclass
class Utterance:
    id: str
    split: str
    dominant_lang: str
    tokens: list[int]
    lang_tags: list[str]
    features: np.ndarray  # float32 [T, n_feat]
    text: str = ""

    @property
    def n_frames(self) -> int:
        return int(self.features.shape[0])

    def __eq__(self, other):
        if not isinstance(other, Utterance):
            return NotImplemented
        return (self.id == other.id and self.split == other.split
                and self.dominant_lang == other.dominant_lang
                and self.tokens == other.tokens and self.lang_tags == other.lang_tags
                and self.text == other.text
                and self.features.shape == other.features.shape
                and np.array_equal(self.features, other.features))


@dataclass
class CorpusManifest:
    utterances: list[Utterance] = field(default_factory=list)

    def split(self, name: str) -> list[Utterance]:
        if name not in SPLITS:
            raise ValidationError(f"unknown split {name!r}")
        return [u for u in self.utterances if u.split == name]

    def __len__(self):
        return len(self.utterances)

    def __eq__(self, other):
        if not isinstance(other, CorpusManifest):
            return NotImplemented
        return self.utterances == other.utterances


def validate_utterance(u: Utterance, vocab: Vocabulary = Vocabulary()):
    if u.split not in SPLITS:
        raise ValidationError(f"{u.id}: unknown split {u.split!r}")
    if u.dominant_lang not in LANGS:
        raise ValidationError(f"{u.id}: unknown dominant language {u.dominant_lang!r}")
    if u.split in SPLIT_DOMINANT and SPLIT_DOMINANT[u.split] != u.dominant_lang:
        raise ValidationError(f"{u.id}: split {u.split} must be {SPLIT_DOMINANT[u.split]}-dominant")
    if len(u.tokens) != len(u.lang_tags):
        raise ValidationError(f"{u.id}: {len(u.tokens)} tokens but {len(u.lang_tags)} language tags")
    for t, tag in zip(u.tokens, u.lang_tags):
        if tag not in LANGS:
            raise ValidationError(f"{u.id}: unknown language tag {tag!r}")
        if vocab.lang_of(t) != tag:
            raise ValidationError(f"{u.id}: token {t} does not belong to language {tag}")
    if u.features.ndim != 2 or u.n_frames < 1:
        raise ValidationError(f"{u.id}: features must be a non-empty [T, n_feat] matrix")
    if not np.all(np.isfinite(u.features)):
        raise ValidationError(f"{u.id}: non-finite features")
    if u.n_frames < min_frames(u.tokens):
        raise ValidationError(f"{u.id}: {u.n_frames} frames cannot align {len(u.tokens)} tokens")


def validate_manifest(m: CorpusManifest, vocab: Vocabulary = Vocabulary()):
    seen = set()
    for u in m.utterances:
        if u.id in seen:
            raise ValidationError(f"duplicate utterance id {u.id!r}")
        seen.add(u.id)
        validate_utterance(u, vocab)


def _utterance(rng, uid, split, dominant, specs, switch_prob, noise_std, length_range, start_prob,
               vocab):
    spec = {s.lang: s for s in specs}
    n_tok = int(rng.integers(length_range[0], length_range[1] + 1))
    other = "en" if dominant == "zh" else "zh"
    lang = dominant if rng.random() < start_prob else other
    tokens, tags, frames = [], [], []
    for i in range(n_tok):
        if i and rng.random() < switch_prob:
            lang = "en" if lang == "zh" else "zh"
        s = spec[lang]
        k = int(rng.integers(len(s.symbols)))
        tokens.append(s.symbols[k])
        tags.append(lang)
        lo, hi = s.frames_per_symbol
        n = int(rng.integers(lo, hi + 1))
        frames.append(np.repeat(s.prototypes[k][None], n, axis=0))
    feats = np.concatenate(frames)
    feats = feats + noise_std * rng.standard_normal(feats.shape)
    return Utterance(uid, split, dominant, tokens, tags, feats.astype(np.float32),
                     vocab.render(tokens))


def generate_corpus(seed: int, n_train: int, n_dev_each: int, switch_prob: float,
                    noise_std: float, specs=None, length_range: tuple[int, int] = (3, 8),
                    start_prob: float = 0.8, vocab: Vocabulary = Vocabulary()) -> CorpusManifest:
    """Deterministic corpus with a ``train`` split and two ``dev`` splits.

    Train utterances alternate zh/en dominance; ``dev_man`` is zh-dominant
    and ``dev_sge`` en-dominant. The dominant language opens an utterance
    with probability ``start_prob``. Utterance ``i`` draws from its own RNG
    stream seeded by ``(seed, i)``. ``specs`` defaults to the languages of
    ``make_language_specs()``; corpora meant to share one acoustic world
    (base training and adaptation data) must share ``specs``.
    """
    if not 0.0 <= switch_prob <= 1.0:
        raise ConfigurationError("switch_prob must be in [0, 1]")
    if noise_std < 0:
        raise ConfigurationError("noise_std must be nonnegative")
    if n_train < 0 or n_dev_each < 0:
        raise ConfigurationError("corpus sizes must be nonnegative")
    if specs is None:
        specs = make_language_specs()
    if len(specs) != 2 or {s.lang for s in specs} != set(LANGS):
        raise ConfigurationError("need exactly one zh and one en language spec")
    for s in specs:
        if not s.symbols:
            raise ConfigurationError(f"language {s.lang!r} has no symbols")

    plan = [("train", "zh" if i % 2 == 0 else "en") for i in range(n_train)]
    plan += [("dev_man", "zh")] * n_dev_each + [("dev_sge", "en")] * n_dev_each
    utts = []
    for i, (split, dominant) in enumerate(plan):
        rng = np.random.default_rng([seed, i])
        utts.append(_utterance(rng, f"{split}-{i:06d}", split, dominant, specs, switch_prob,
                               noise_std, length_range, start_prob, vocab))
    m = CorpusManifest(utts)
    validate_manifest(m, vocab)
    return m


def encode_features(x: np.ndarray) -> str:
    return base64.b64encode(np.ascontiguousarray(x, dtype="<f4").tobytes()).decode("ascii")


def decode_features(s: str, n_frames: int, n_feat: int) -> np.ndarray:
    raw = base64.b64decode(s.encode("ascii"), validate=True)
    if len(raw) != 4 * n_frames * n_feat:
        raise ValueError(f"expected {n_frames}x{n_feat} float32 values, got {len(raw)} bytes")
    return np.frombuffer(raw, dtype="<f4").reshape(n_frames, n_feat).astype(np.float32)


def utterance_record(u: Utterance) -> dict:
    return {
        "id": u.id,
        "split": u.split,
        "dominant_lang": u.dominant_lang,
        "tokens": [int(t) for t in u.tokens],
        "lang_tags": list(u.lang_tags),
        "text": u.text,
        "n_frames": u.n_frames,
        "n_feat": int(u.features.shape[1]),
        "features": encode_features(u.features),
    }


def dumps_manifest(m: CorpusManifest) -> str:
    return "".join(json.dumps(utterance_record(u), ensure_ascii=False) + "\n"
                   for u in m.utterances)


def save_manifest(m: CorpusManifest, path) -> None:
    Path(path).write_text(dumps_manifest(m), encoding="utf-8")


def _field(rec, key, kind, lineno):
    if key not in rec:
        raise ParseError("missing key", lineno, key)
    value = rec[key]
    if not isinstance(value, kind) or isinstance(value, bool):
        raise ParseError(f"expected {getattr(kind, '__name__', kind)}", lineno, key)
    return value


def parse_record(rec: dict, lineno: int | None = None) -> Utterance:
    if not isinstance(rec, dict):
        raise ParseError("record is not a JSON object", lineno)
    extra = set(rec) - set(MANIFEST_KEYS)
    if extra:
        raise ParseError(f"unexpected keys {sorted(extra)}", lineno)
    tokens = _field(rec, "tokens", list, lineno)
    if not all(isinstance(t, int) and not isinstance(t, bool) for t in tokens):
        raise ParseError("tokens must be integers", lineno, "tokens")
    tags = _field(rec, "lang_tags", list, lineno)
    n_frames = _field(rec, "n_frames", int, lineno)
    n_feat = _field(rec, "n_feat", int, lineno)
    try:
        feats = decode_features(_field(rec, "features", str, lineno), n_frames, n_feat)
    except ValueError as exc:
        raise ParseError(str(exc), lineno, "features") from exc
    return Utterance(
        id=_field(rec, "id", str, lineno),
        split=_field(rec, "split", str, lineno),
        dominant_lang=_field(rec, "dominant_lang", str, lineno),
        tokens=list(tokens),
        lang_tags=list(tags),
        features=feats,
        text=_field(rec, "text", str, lineno),
    )


def loads_manifest(text: str, vocab: Vocabulary = Vocabulary()) -> CorpusManifest:
    utts = []
    for lineno, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
        except json.JSONDecodeError as exc:
            raise ParseError(f"invalid JSON: {exc.msg}", lineno) from exc
        utts.append(parse_record(rec, lineno))
    m = CorpusManifest(utts)
    validate_manifest(m, vocab)
    return m


def load_manifest(path, vocab: Vocabulary = Vocabulary()) -> CorpusManifest:
    return loads_manifest(Path(path).read_text(encoding="utf-8"), vocab)


def switch_rate(utts: Iterable[Utterance]) -> tuple[int, int]:
    """(number of language switches, number of switch opportunities)."""
    switches = chances = 0
    for u in utts:
        for a, b in zip(u.lang_tags, u.lang_tags[1:]):
            chances += 1
            switches += a != b
    return switches, chances


def desk_corpora(seed: int, n_train: int = 2000, n_dev_each: int = 200, switch_prob: float = 0.3,
                 noise_std: float = 0.5, n_base_train: int = 2000, n_base_dev: int = 100,
                 ) -> tuple[CorpusManifest, CorpusManifest]:
    """The (base, code-switched) corpus pair used by the ablation protocol.

    Both share the language specs of ``seed``. The base corpus is strictly
    monolingual and drawn from a separate stream (``seed + 1000``).
    """
    specs = make_language_specs(seed)
    base = generate_corpus(seed + 1000, n_base_train, n_base_dev, switch_prob=0.0,
                           noise_std=noise_std, specs=specs)
    cs = generate_corpus(seed, n_train, n_dev_each, switch_prob=switch_prob,
                         noise_std=noise_std, specs=specs)
    return base, cs
