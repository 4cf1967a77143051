"""Two decoder passes, one per language prompt, mixed per position by the fusion module.

Trains the full method briefly on a small corpus and prints the fusion
weights next to the reference language of each token.
"""

import torch

from cswhisper.data import Vocabulary, desk_corpora
from cswhisper.pipeline import TABLE_I, collate
from cswhisper.training import TrainConfig, train, transcribe

torch.set_num_threads(1)
base_corpus, cs = desk_corpora(0, n_train=800, n_dev_each=40, n_base_train=1000, n_base_dev=40)
base, _ = train(TrainConfig.for_stage("base", epochs=10, evaluate_dev=False), base_corpus)
model, report = train(TrainConfig(epochs=3).with_variant(TABLE_I[8]), cs, base)
print("dev MER:", {s: round(r["overall"]["mer"], 3) for s, r in report.reports.items()})

vocab = Vocabulary()
utt = next(u for u in cs.split("dev_man") if len(set(u.lang_tags)) == 2)
with torch.no_grad():
    w = model.losses(collate([utt], base.base.cfg.special_tokens.pad))["weights"][0]
print("\nref:", utt.text)
print("hyp:", vocab.render(transcribe(model, [utt])[0]))
for i, tag in enumerate(utt.lang_tags):
    print(f"  token {i} ({tag}): w_zh={float(w[i, 0]):.2f} w_en={float(w[i, 1]):.2f}")
