import json

import numpy as np
import pytest
import torch

from cswhisper.adapters import parameter_digest
from cswhisper.checkpoint import (
    apply_adaptation,
    load_base,
    load_checkpoint,
    read_checkpoint,
    save_checkpoint,
)
from cswhisper.data import generate_corpus, make_language_specs
from cswhisper.errors import ConfigurationError, ValidationError
from cswhisper.pipeline import TABLE_I, CSModel, Variant, collate
from cswhisper.training import (
    TrainConfig,
    ablate,
    compose_loss,
    evaluate,
    final_loss,
    format_table,
    train,
    transcribe,
)

SPECS = make_language_specs(0)


@pytest.fixture(scope="module")
def corpora():
    base = generate_corpus(100, 200, 20, switch_prob=0.0, noise_std=0.3, specs=SPECS)
    cs = generate_corpus(0, 200, 20, switch_prob=0.3, noise_std=0.3, specs=SPECS)
    return base, cs


@pytest.fixture(scope="module")
def base_model(corpora):
    model, _ = train(TrainConfig.for_stage("base", epochs=4, evaluate_dev=False), corpora[0])
    return model


def test_final_loss():
    assert final_loss(2.0, 4.0, 1.0) == 2.0
    assert final_loss(2.0, 4.0, 0.0) == 4.0
    assert final_loss(2.0, 4.0, 0.5) == 3.0
    with pytest.raises(ConfigurationError):
        final_loss(1.0, 1.0, -0.1)


def test_compose_loss_routes():
    t = lambda: {"L_att": torch.tensor(2.0), "L_ctc": torch.tensor(1.0), "L_lid": torch.tensor(0.5)}
    plain = compose_loss({"L_att": torch.tensor(2.0)}, TABLE_I[3], 0.7, 1.0)
    assert float(plain["L_final"]) == 2.0
    assert float(compose_loss(t(), TABLE_I[6], 0.7, 1.0)["L_final"]) == pytest.approx(1.7)
    full = compose_loss(t(), TABLE_I[8], 0.7, 1.0)
    assert float(full["L_final"]) == pytest.approx(1.7 + 0.5)
    routed = compose_loss(t(), TABLE_I[8], 0.7, 0.5, ctc_route="final")
    assert float(routed["L_dec"]) == pytest.approx(2.5)
    assert float(routed["L_final"]) == pytest.approx(0.5 * 2.5 + 0.5 * 1.0)
    # with the final route and lambda 1 the CTC term drops out entirely
    assert float(compose_loss(t(), TABLE_I[8], 0.7, 1.0, "final")["L_final"]) == pytest.approx(2.5)


def test_config_round_trip_and_validation():
    cfg = TrainConfig.for_stage("adapt", alpha=0.3).with_variant(TABLE_I[8])
    d = cfg.to_dict()
    assert "lambda" in d and "lam" not in d
    assert TrainConfig.from_dict(d) == cfg
    assert cfg.variant == TABLE_I[8]
    with pytest.raises(ConfigurationError):
        TrainConfig(alpha=1.2)
    with pytest.raises(ConfigurationError):
        TrainConfig(refiner_ctc=True)
    with pytest.raises(ConfigurationError):
        TrainConfig.from_dict({"learning_rate": 1.0})


def test_table_rows_differ_as_documented():
    def diff(a, b):
        da, db = TABLE_I[a].to_dict(), TABLE_I[b].to_dict()
        return {k for k in da if da[k] != db[k]}
    assert diff(3, 5) == {"refiner"}
    assert diff(5, 6) == {"refiner_ctc"}
    assert diff(3, 7) == {"prompt_mode"}
    assert diff(3, 4) == {"enc_ctc"}
    assert TABLE_I[0].prompt_mode == "single"


def test_adapt_requires_base(corpora):
    with pytest.raises(ConfigurationError):
        train(TrainConfig(), corpora[1])


def test_id0_is_a_noop(base_model, corpora):
    model, rep = train(TrainConfig(evaluate_dev=False).with_variant(TABLE_I[0]), corpora[1],
                       base_model)
    assert rep.n_trainable == 0 and rep.epochs == []
    assert parameter_digest(model.base.named_parameters()) == \
        parameter_digest(base_model.base.named_parameters())


@pytest.mark.parametrize("vid", [3, 8])
def test_training_reduces_loss_and_keeps_base(base_model, corpora, vid):
    before = parameter_digest(base_model.base.named_parameters())
    cfg = TrainConfig(epochs=2, lr=1e-3, evaluate_dev=False).with_variant(TABLE_I[vid])
    model, rep = train(cfg, corpora[1], base_model)
    assert parameter_digest(base_model.base.named_parameters()) == before
    assert parameter_digest(model.base.named_parameters()) == before
    with torch.no_grad():
        init = CSModel(base_model.base, TABLE_I[vid], cfg.refiner_config, seed=cfg.seed)
        batch = collate(corpora[1].split("train"), 37)
        assert float(model.losses(batch)["L_att"]) < float(init.losses(batch)["L_att"])
    logged = [e["step"] for e in rep.dev_log]
    best = min(rep.dev_log, key=lambda e: e["dev_loss"])
    assert rep.selected_step == best["step"] and logged[0] == 0


def test_checkpoint_round_trip(base_model, corpora, tmp_path):
    cfg = TrainConfig(epochs=1, evaluate_dev=False).with_variant(TABLE_I[8])
    model, _ = train(cfg, corpora[1], base_model)
    p1, p2 = tmp_path / "a.ckpt", tmp_path / "b.ckpt"
    save_checkpoint(p1, model, cfg.to_dict())
    save_checkpoint(p2, load_checkpoint(p1), cfg.to_dict())
    assert p1.read_bytes() == p2.read_bytes()
    header, tensors = read_checkpoint(p1)
    assert header["train_config"]["lambda"] == 1.0
    assert any(k.startswith("adapt/refiner.") for k in tensors)

    utts = corpora[1].split("dev_man")[:8]
    again = load_checkpoint(p1)
    assert transcribe(again, utts) == transcribe(model, utts)

    base_path = tmp_path / "base.ckpt"
    save_checkpoint(base_path, base_model, base_only=True)
    rebuilt = apply_adaptation(p1, load_base(base_path))
    assert transcribe(rebuilt, utts) == transcribe(model, utts)


def test_checkpoint_shape_mismatch_fails_loudly(base_model, tmp_path):
    p = tmp_path / "x.ckpt"
    save_checkpoint(p, base_model, base_only=True)
    raw = bytearray(p.read_bytes())
    (hlen,) = np.frombuffer(bytes(raw[8:16]), dtype="<u8")
    header = json.loads(bytes(raw[16:16 + hlen]))
    header["model_config"]["d_ff"] = 64
    hb = json.dumps(header, sort_keys=True).encode()
    p.write_bytes(bytes(raw[:8]) + np.uint64(len(hb)).tobytes() + hb + bytes(raw[16 + hlen:]))
    with pytest.raises(ConfigurationError):
        load_base(p)
    (tmp_path / "junk").write_bytes(b"not a checkpoint")
    with pytest.raises(ConfigurationError):
        load_base(tmp_path / "junk")


def test_evaluate_is_deterministic_and_rejects_empty(base_model, corpora):
    utts = corpora[1].split("dev_sge")
    a, b = evaluate(base_model, utts), evaluate(base_model, utts)
    assert a.to_dict() == b.to_dict()
    with pytest.raises(ValidationError):
        evaluate(base_model, [])


def test_oracle_model_scores_zero(base_model, corpora, monkeypatch):
    utts = corpora[0].split("dev_man")
    monkeypatch.setattr(CSModel, "transcribe", lambda self, batch, *a, **k: [
        row[:n].tolist() for row, n in zip(batch.tokens, batch.token_lengths)])
    assert evaluate(base_model, utts).mer == 0.0


def test_ablate_table_shape(base_model, corpora):
    table = ablate(corpora[1], base_model, TrainConfig(max_steps=1), ids=[0, 5])
    assert [r["id"] for r in table["rows"]] == [0, 5]
    for r in table["rows"]:
        for split in ("dev_man", "dev_sge"):
            assert set(r[split]) == {"overall", "zh", "en"}
    assert len(format_table(table).splitlines()) == 3
    assert json.loads(json.dumps(table)) == table


def test_variant_validation():
    with pytest.raises(ConfigurationError):
        Variant(prompt_mode="pair")
    with pytest.raises(ConfigurationError):
        Variant(refiner=True, enc_ctc=True)


def test_trained_paths_disagree_on_code_switched_input(base_model, corpora):
    from cswhisper.language_aware import dual_states

    cfg = TrainConfig(epochs=1, lr=1e-3, evaluate_dev=False).with_variant(TABLE_I[7])
    model, _ = train(cfg, corpora[1], base_model)
    cs = [u for u in corpora[1].split("dev_man") if len(set(u.lang_tags)) == 2][:8]
    batch = collate(cs, 37)
    with torch.no_grad():
        enc, _ = model.encoder_side(batch.feats, batch.lengths)
        y_zh, y_en = dual_states(model.base, batch.tokens, enc, model.path_list(), batch.lengths)
        lp_zh = model.base.logits(y_zh).log_softmax(-1)
        lp_en = model.base.logits(y_en).log_softmax(-1)
        kl = (lp_zh.exp() * (lp_zh - lp_en)).sum(-1)
    assert float(kl.mean()) > 0


def test_non_finite_loss_aborts_with_snapshot(base_model, corpora, monkeypatch):
    from cswhisper.training import TrainingError

    real = CSModel.losses

    def poisoned(self, batch, mode=None):
        terms = real(self, batch, mode)
        terms["L_att"] = terms["L_att"] * float("nan")
        return terms

    monkeypatch.setattr(CSModel, "losses", poisoned)
    with pytest.raises(TrainingError) as exc:
        train(TrainConfig(evaluate_dev=False).with_variant(TABLE_I[3]), corpora[1], base_model)
    assert exc.value.snapshot["step"] == 0 and exc.value.snapshot["utterances"]
