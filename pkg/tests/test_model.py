import pytest
import torch

from cswhisper.adapters import wire_decoder_adapters, wire_encoder_adapters
from cswhisper.config import ModelConfig
from cswhisper.errors import ConfigurationError, InputError
from cswhisper.model import WhisperMini, build_prompt, greedy_decode

CFG = ModelConfig()
ST = CFG.special_tokens


@pytest.fixture(scope="module")
def model():
    return WhisperMini(CFG, seed=0).eval()


def feats(T=8, seed=0):
    return torch.randn(1, T, CFG.n_feat, generator=torch.Generator().manual_seed(seed))


def test_config_validation():
    with pytest.raises(ConfigurationError):
        ModelConfig(d_model=66, n_heads=4)
    with pytest.raises(ConfigurationError):
        ModelConfig(vocab_size=30)  # special tokens would collide with the blank
    assert CFG.blank == CFG.vocab_size
    assert ModelConfig.from_dict(CFG.to_dict()) == CFG


def test_encode_shape_and_determinism(model):
    x = feats()
    a, b = model.encode(x), model.encode(x)
    assert a.shape == (1, 8, CFG.d_model)
    assert torch.equal(a, b)


def test_encode_rejects_bad_input(model):
    with pytest.raises(InputError):
        model.encode(torch.zeros(1, 0, CFG.n_feat))
    with pytest.raises(ConfigurationError):
        model.encode(torch.zeros(1, 4, CFG.n_feat + 1))
    bad = feats()
    bad[0, 2, 3] = float("nan")
    with pytest.raises(InputError):
        model.encode(bad)
    with pytest.raises(InputError):
        model.encode(torch.zeros(1, CFG.max_src_frames + 1, CFG.n_feat))


def test_zero_init_hooks_are_identity(model):
    x = feats()
    hooks = wire_decoder_adapters(CFG, wire_encoder_adapters(CFG, seed=1), seed=2)
    enc = model.encode(x)
    assert torch.max(torch.abs(model.encode(x, hooks=hooks) - enc)) <= 1e-6
    prefix = build_prompt("concat", CFG) + [3, 20]
    d = model.decode_step(prefix, enc[0], hooks) - model.decode_step(prefix, enc[0])
    assert torch.max(torch.abs(d)) <= 1e-6


def test_decode_step_logits(model):
    enc = model.encode(feats())[0]
    logits = model.decode_step([ST.sot], enc).detach()
    assert logits.shape == (CFG.vocab_size,)
    assert torch.all(torch.isfinite(logits))
    assert torch.equal(logits, model.decode_step([ST.sot], enc))
    assert float(logits.softmax(-1).sum()) == pytest.approx(1.0, abs=1e-6)
    with pytest.raises(InputError):
        model.decode_step([ST.sot] * (CFG.max_tgt_tokens + 1), enc)


def test_causality(model):
    enc = model.encode(feats())
    prefix = torch.tensor([[ST.sot, ST.lang_zh, ST.task, 1, 2]])
    full = model.decoder_states(prefix, enc)
    changed = prefix.clone()
    changed[0, 3:] = torch.tensor([30, 31])
    other = model.decoder_states(changed, enc)
    torch.testing.assert_close(full[:, :3], other[:, :3], atol=0, rtol=0)
    assert not torch.allclose(full[:, 3:], other[:, 3:])


def test_permuting_frames_changes_logits(model):
    x = feats(seed=3)
    perm = x[:, torch.randperm(8, generator=torch.Generator().manual_seed(0))]
    prefix = build_prompt("single", CFG, "zh")
    a = model.decode_step(prefix, model.encode(x)[0])
    b = model.decode_step(prefix, model.encode(perm)[0])
    assert not torch.allclose(a, b)


def test_padding_does_not_leak(model):
    x = feats(T=6, seed=4)
    padded = torch.cat([x, torch.randn(1, 3, CFG.n_feat)], dim=1)
    enc = model.encode(x)
    enc_p = model.encode(padded, torch.tensor([6]))
    torch.testing.assert_close(enc_p[:, :6], enc, atol=1e-6, rtol=0)
    tok = torch.tensor([build_prompt("concat", CFG)])
    torch.testing.assert_close(model.decoder_states(tok, enc_p, torch.tensor([6])),
                               model.decoder_states(tok, enc), atol=1e-6, rtol=0)


def test_build_prompt():
    assert build_prompt("single", CFG, "zh") == [ST.sot, ST.lang_zh, ST.task]
    concat = build_prompt("concat", CFG)
    assert len(concat) == 4 and ST.lang_zh in concat and ST.lang_en in concat
    zh, en = build_prompt("pair", CFG)
    assert [i for i in range(3) if zh[i] != en[i]] == [1]
    with pytest.raises(InputError):
        build_prompt("single", CFG, "fr")


def test_greedy_decode_bounds(model):
    enc = model.encode(feats())[0]
    prompt = build_prompt("single", CFG, "en")
    assert greedy_decode(model, enc, prompt, max_len=0) == []
    out = greedy_decode(model, enc, prompt, max_len=5)
    assert len(out) <= 5 and ST.eot not in out
    assert out == greedy_decode(model, enc, prompt, max_len=5)
    # the default bound keeps the prefix within max_tgt_tokens
    assert len(greedy_decode(model, enc, prompt)) <= CFG.max_tgt_tokens - len(prompt)
