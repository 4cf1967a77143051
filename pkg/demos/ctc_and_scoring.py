"""CTC against its brute-force oracle, then mixed-unit scoring of a transcript pair."""

import numpy as np

from cswhisper.ctc import brute_force_ctc, ctc_gradient, ctc_loss
from cswhisper.metrics import align, score

rng = np.random.default_rng(0)
logits = rng.normal(size=(5, 4))
lp = logits - np.logaddexp.reduce(logits, axis=1, keepdims=True)
target = [0, 1, 1]  # blank is the last class (3)

print("forward-backward NLL:", ctc_loss(lp, target))
print("brute-force NLL:     ", brute_force_ctc(lp, target))
print("gradient rows sum to", ctc_gradient(lp, target).sum(axis=1))

ref, hyp = "你 好 WORLD", "你 号 WORLD"
rep = score(ref, hyp)
print(f"\n{ref!r} vs {hyp!r}")
print(f"MER {rep.mer:.1%}  CER {rep.cer:.1%}  WER {rep.wer:.1%}")
for op in align(list("你好W"), list("你号W")):
    print("  ", op)
