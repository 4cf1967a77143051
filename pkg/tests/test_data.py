import json
import math

import numpy as np
import pytest

from cswhisper.ctc import min_frames
from cswhisper.data import (
    Vocabulary,
    dumps_manifest,
    generate_corpus,
    load_manifest,
    loads_manifest,
    make_language_specs,
    save_manifest,
    switch_rate,
)
from cswhisper.errors import ConfigurationError, ParseError, ValidationError
from cswhisper.metrics import tokenize_mixed

VOCAB = Vocabulary()


@pytest.fixture(scope="module")
def corpus():
    return generate_corpus(7, 40, 10, switch_prob=0.3, noise_std=0.5)


def test_same_seed_is_byte_identical(corpus):
    again = generate_corpus(7, 40, 10, switch_prob=0.3, noise_std=0.5)
    assert dumps_manifest(again) == dumps_manifest(corpus)
    other = generate_corpus(8, 40, 10, switch_prob=0.3, noise_std=0.5)
    assert dumps_manifest(other) != dumps_manifest(corpus)


def test_splits_and_dominance(corpus):
    assert len(corpus.split("train")) == 40
    assert {u.dominant_lang for u in corpus.split("dev_man")} == {"zh"}
    assert {u.dominant_lang for u in corpus.split("dev_sge")} == {"en"}
    assert len({u.id for u in corpus.utterances}) == len(corpus)


def test_utterances_are_consistent(corpus):
    for u in corpus.utterances:
        assert len(u.tokens) == len(u.lang_tags)
        assert all(VOCAB.lang_of(t) == tag for t, tag in zip(u.tokens, u.lang_tags))
        assert u.n_frames >= min_frames(u.tokens)
        assert [x.surface for x in tokenize_mixed(u.text)] == [VOCAB.surface(t) for t in u.tokens]


def test_degenerate_switch_probabilities():
    mono = generate_corpus(1, 30, 5, switch_prob=0.0, noise_std=0.1)
    assert all(len(set(u.lang_tags)) == 1 for u in mono.utterances)
    alt = generate_corpus(1, 30, 5, switch_prob=1.0, noise_std=0.1)
    for u in alt.utterances:
        assert all(a != b for a, b in zip(u.lang_tags, u.lang_tags[1:]))


@pytest.mark.parametrize("p", [0.1, 0.3, 0.7])
def test_switch_rate_converges(p):
    m = generate_corpus(3, 2000, 0, switch_prob=p, noise_std=0.0)
    k, n = switch_rate(m.utterances)
    se = math.sqrt(p * (1 - p) / n)
    assert abs(k / n - p) <= 3 * se


def test_nearest_prototype_is_perfect_without_noise():
    specs = make_language_specs(0, similarity=1.0, lang_shift=0.5)
    protos = np.concatenate([s.prototypes for s in specs])
    ids = sum((s.symbols for s in specs), [])
    m = generate_corpus(0, 50, 0, switch_prob=0.5, noise_std=0.0, specs=specs)
    for u in m.utterances:
        d = ((u.features[:, None, :] - protos[None]) ** 2).sum(-1)
        labels = [ids[j] for j in d.argmin(1)]
        collapsed = [t for i, t in enumerate(labels) if i == 0 or t != labels[i - 1]]
        # consecutive identical tokens merge, so compare after collapsing both
        ref = [t for i, t in enumerate(u.tokens) if i == 0 or t != u.tokens[i - 1]]
        assert collapsed == ref


def test_languages_linearly_separable():
    for sim in (0.0, 0.9, 1.0):
        zh, en = make_language_specs(2, similarity=sim, lang_shift=0.5)
        assert np.all(zh.prototypes[:, 0] > 0) and np.all(en.prototypes[:, 0] < 0)


def test_parameter_validation():
    with pytest.raises(ConfigurationError):
        generate_corpus(0, 1, 1, switch_prob=1.5, noise_std=0.1)
    with pytest.raises(ConfigurationError):
        generate_corpus(0, 1, 1, switch_prob=0.5, noise_std=-1)
    with pytest.raises(ConfigurationError):
        make_language_specs(similarity=1.5)
    with pytest.raises(ConfigurationError):
        Vocabulary(0)


def test_manifest_round_trip(corpus, tmp_path):
    path = tmp_path / "m.jsonl"
    save_manifest(corpus, path)
    assert load_manifest(path) == corpus
    rec = json.loads(path.read_text(encoding="utf-8").splitlines()[0])
    assert set(rec) == {"id", "split", "dominant_lang", "tokens", "lang_tags", "text",
                        "n_frames", "n_feat", "features"}


def _lines(corpus):
    return [json.loads(line) for line in dumps_manifest(corpus).splitlines()]


def _dump(recs):
    return "".join(json.dumps(r, ensure_ascii=False) + "\n" for r in recs)


def test_length_mismatch_is_validation_error(corpus):
    recs = _lines(corpus)
    recs[3]["lang_tags"] = recs[3]["lang_tags"][:-1]
    with pytest.raises(ValidationError):
        loads_manifest(_dump(recs))


def test_unknown_split_is_validation_error(corpus):
    recs = _lines(corpus)
    recs[0]["split"] = "test"
    with pytest.raises(ValidationError):
        loads_manifest(_dump(recs))


def test_parse_errors_name_line_and_field(corpus):
    recs = _lines(corpus)
    del recs[2]["tokens"]
    with pytest.raises(ParseError) as exc:
        loads_manifest(_dump(recs))
    assert exc.value.line == 3 and exc.value.field == "tokens"

    recs = _lines(corpus)
    recs[1]["features"] = recs[1]["features"][:-8]
    with pytest.raises(ParseError) as exc:
        loads_manifest(_dump(recs))
    assert exc.value.line == 2 and exc.value.field == "features"

    with pytest.raises(ParseError) as exc:
        loads_manifest(_dump(_lines(corpus)[:1]) + "{not json\n")
    assert exc.value.line == 2


def test_duplicate_ids_and_wrong_dominance(corpus):
    recs = _lines(corpus)
    recs[1]["id"] = recs[0]["id"]
    with pytest.raises(ValidationError):
        loads_manifest(_dump(recs))
    recs = _lines(corpus)
    dev = next(r for r in recs if r["split"] == "dev_man")
    dev["dominant_lang"] = "en"
    with pytest.raises(ValidationError):
        loads_manifest(_dump(recs))
