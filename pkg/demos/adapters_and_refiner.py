"""Fresh adapters and a fresh refiner leave a frozen model's outputs untouched.

Training then moves only the adaptation weights; the base digest is stable.
"""

import torch

from cswhisper.adapters import parameter_digest
from cswhisper.config import ModelConfig
from cswhisper.data import generate_corpus
from cswhisper.pipeline import TABLE_I, CSModel, collate
from cswhisper.model import WhisperMini
from cswhisper.training import TrainConfig, train

torch.set_num_threads(1)
base = WhisperMini(ModelConfig(), seed=0).eval()
model = CSModel(base, TABLE_I[5]).eval()  # enc+dec adapters and refiner
utts = generate_corpus(0, 16, 0, switch_prob=0.3, noise_std=0.5).split("train")
batch = collate(utts, base.cfg.special_tokens.pad)
with torch.no_grad():
    adapted, _ = model.encoder_side(batch.feats, batch.lengths)
    plain = base.encode(batch.feats, batch.lengths)
print("max |adapted - frozen| at init:", float((adapted - plain).abs().max()))

corpus = generate_corpus(0, 128, 0, switch_prob=0.3, noise_std=0.5)
before = parameter_digest(base.named_parameters())
trained, report = train(TrainConfig(max_steps=20, evaluate_dev=False).with_variant(TABLE_I[5]),
                        corpus, base)
print("trainable parameters:", report.n_trainable)
print("base unchanged after 20 steps:", parameter_digest(trained.base.named_parameters()) == before)
print("loss per epoch:", [round(e["L_final"], 3) for e in report.epochs])
