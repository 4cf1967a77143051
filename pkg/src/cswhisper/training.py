"""Two-stage training, evaluation and the ablation harness.

Stage ``base`` trains a ``WhisperMini`` from scratch on mostly monolingual
data and stands in for the pretrained multilingual backbone. Stage
``adapt`` freezes that backbone and trains only the adaptation modules of
the chosen variant on code-switched data.

Loss composition for the adapt stage (every term is a batch mean of
per-utterance sums):

* plain variants: ``L_att``, or ``alpha * L_att + (1 - alpha) * L_ctc`` when
  a CTC head is present;
* language-aware variants: ``L_dec = L_att + L_lid``. With a CTC head the
  CTC term enters exactly once, chosen by ``ctc_route``: ``"enc_ref"``
  replaces ``L_att`` by the alpha mix above, ``"final"`` uses
  ``lam * L_dec + (1 - lam) * L_ctc``.
"""

from __future__ import annotations

import copy
import json
import logging
import math
from dataclasses import asdict, dataclass, field, fields
from typing import Sequence

import numpy as np
import torch

from .adapters import FreezePolicy, apply_freeze
from .checkpoint import load_base
from .config import ModelConfig
from .data import CorpusManifest, Utterance, Vocabulary
from .errors import ConfigurationError, CSWhisperError, ValidationError
from .language_aware import dec_loss
from .metrics import ErrorReport, score_corpus
from .model import WhisperMini
from .pipeline import TABLE_I, CSModel, Variant, collate
from .refiner import RefinerConfig, enc_ref_loss

log = logging.getLogger(__name__)

DEV_SPLITS = ("dev_man", "dev_sge")
CTC_ROUTES = ("enc_ref", "final")

# Desk-scale budgets. The adapt rate is far above what a full-size backbone
# would tolerate; at this size 1e-4 barely moves the adapters in 8 epochs.
STAGE_DEFAULTS = {"base": {"lr": 1e-3, "epochs": 15}, "adapt": {"lr": 3e-3, "epochs": 8}}


class TrainingError(CSWhisperError, RuntimeError):
    """Training diverged; ``snapshot`` holds the offending step's state."""

    def __init__(self, message, snapshot=None):
        super().__init__(message)
        self.snapshot = snapshot or {}


def final_loss(l_dec, l_ctc, lam: float):
    """``lam * l_dec + (1 - lam) * l_ctc``."""
    if not 0.0 <= lam <= 1.0:
        raise ConfigurationError(f"lambda must be in [0, 1], got {lam}")
    if lam == 1.0:
        return l_dec
    if lam == 0.0:
        return l_ctc
    return lam * l_dec + (1.0 - lam) * l_ctc


@dataclass
class TrainConfig:
    stage: str = "adapt"
    lr: float = 3e-3
    epochs: int = 8
    batch_size: int = 32
    alpha: float = 0.7
    lam: float = 1.0
    seed: int = 0
    enc_adapters: bool = False
    dec_adapters: bool = False
    refiner: bool = False
    refiner_ctc: bool = False
    enc_ctc: bool = False
    prompt_mode: str = "concat"
    ctc_route: str = "enc_ref"
    clip_norm: float = 1.0
    max_steps: int = 0
    eval_every: int = 0
    concat_prob: float = 0.25
    refiner_layers: int = 2
    refiner_hidden: int = 64
    refiner_bidirectional: bool = False
    evaluate_dev: bool = True

    def __post_init__(self):
        if self.stage not in ("base", "adapt"):
            raise ConfigurationError(f"stage must be 'base' or 'adapt', got {self.stage!r}")
        for name in ("alpha", "lam", "concat_prob"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ConfigurationError(f"{name} must be in [0, 1], got {v}")
        if self.lr <= 0 or self.epochs < 1 or self.batch_size < 1:
            raise ConfigurationError("lr, epochs and batch_size must be positive")
        if self.ctc_route not in CTC_ROUTES:
            raise ConfigurationError(f"ctc_route must be one of {CTC_ROUTES}")
        self.variant  # validates flag combinations

    @property
    def variant(self) -> Variant:
        return Variant(self.enc_adapters, self.dec_adapters, self.refiner, self.refiner_ctc,
                       self.enc_ctc, self.prompt_mode)

    @property
    def refiner_config(self) -> RefinerConfig:
        return RefinerConfig(self.refiner_layers, self.refiner_hidden, self.refiner_bidirectional)

    @classmethod
    def for_stage(cls, stage: str, **overrides) -> "TrainConfig":
        """Config with the stage's default budget, then ``overrides``."""
        if stage not in STAGE_DEFAULTS:
            raise ConfigurationError(f"stage must be 'base' or 'adapt', got {stage!r}")
        return cls(stage=stage, **{**STAGE_DEFAULTS[stage], **overrides})

    def with_variant(self, v: Variant) -> "TrainConfig":
        d = self.to_dict()
        d.update(v.to_dict())
        return TrainConfig.from_dict(d)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["lambda"] = d.pop("lam")
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        if "lambda" in d:
            d["lam"] = d.pop("lambda")
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigurationError(f"unknown training options {sorted(unknown)}")
        return cls(**d)


@dataclass
class TrainReport:
    config: dict
    epochs: list[dict] = field(default_factory=list)
    dev_log: list[dict] = field(default_factory=list)
    selected_step: int = 0
    n_trainable: int = 0
    reports: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


def compose_loss(terms: dict, variant: Variant, alpha: float, lam: float,
                 ctc_route: str = "enc_ref") -> dict:
    """Add ``L_dec`` (language-aware only) and ``L_final`` to ``terms``."""
    l_att = terms["L_att"]
    l_ctc = terms.get("L_ctc")
    if variant.language_aware:
        if l_ctc is not None and ctc_route == "final":
            terms["L_dec"] = dec_loss(l_att, terms["L_lid"])
            terms["L_final"] = final_loss(terms["L_dec"], l_ctc, lam)
        else:
            att = enc_ref_loss(l_att, l_ctc, alpha) if l_ctc is not None else l_att
            terms["L_dec"] = dec_loss(att, terms["L_lid"])
            terms["L_final"] = terms["L_dec"]
    elif l_ctc is not None:
        terms["L_final"] = enc_ref_loss(l_att, l_ctc, alpha)
    else:
        terms["L_final"] = l_att
    return terms


def _batches(utts: Sequence[Utterance], batch_size: int, rng: np.random.Generator | None):
    order = np.arange(len(utts)) if rng is None else rng.permutation(len(utts))
    for i in range(0, len(utts), batch_size):
        yield [utts[j] for j in order[i:i + batch_size]]


def build_model(cfg: TrainConfig, base: WhisperMini | None = None,
                model_cfg: ModelConfig | None = None) -> CSModel:
    if cfg.stage == "base":
        base = WhisperMini(model_cfg or ModelConfig(), seed=cfg.seed)
        return CSModel(base, Variant(), cfg.refiner_config, seed=cfg.seed)
    if base is None:
        raise ConfigurationError("stage 'adapt' requires a base checkpoint")
    return CSModel(base, cfg.variant, cfg.refiner_config, seed=cfg.seed)


def _resolve_base(base_ckpt) -> WhisperMini | None:
    if base_ckpt is None:
        return None
    if isinstance(base_ckpt, WhisperMini):
        return copy.deepcopy(base_ckpt)
    if isinstance(base_ckpt, CSModel):
        return copy.deepcopy(base_ckpt.base)
    return load_base(base_ckpt)


def dev_loss(model: CSModel, utts: Sequence[Utterance], batch_size: int = 64) -> float:
    """Mean per-utterance attention loss (single-path or fused logits)."""
    if not utts:
        return math.nan
    total = 0.0
    pad = model.cfg.special_tokens.pad
    with torch.no_grad():
        for chunk in _batches(utts, batch_size, None):
            total += float(model.losses(collate(chunk, pad))["L_att"]) * len(chunk)
    return total / len(utts)


def _base_prompt_mode(rng: np.random.Generator, concat_prob: float) -> str:
    return "concat" if rng.random() < concat_prob else "single"


def train(cfg: TrainConfig, corpus: CorpusManifest, base_ckpt=None,
          model_cfg: ModelConfig | None = None, vocab: Vocabulary = Vocabulary(),
          ) -> tuple[CSModel, TrainReport]:
    """Train one stage and return the selected model and its report.

    ``base_ckpt`` (required for ``stage='adapt'``) may be a checkpoint path,
    a ``WhisperMini`` or a ``CSModel``; it is copied, never modified.
    """
    torch.set_num_threads(1)
    base = _resolve_base(base_ckpt)
    if cfg.stage == "adapt" and base is None:
        raise ConfigurationError("stage 'adapt' requires a base checkpoint")
    model = build_model(cfg, base, model_cfg)
    policy = FreezePolicy.base_training() if cfg.stage == "base" else FreezePolicy.adaptation()
    params = apply_freeze(policy, model)
    report = TrainReport(config=cfg.to_dict(), n_trainable=sum(p.numel() for p in params))
    train_utts = corpus.split("train")
    dev_utts = [u for s in DEV_SPLITS for u in corpus.split(s)]
    pad = model.cfg.special_tokens.pad

    if params:
        if not train_utts:
            raise ValidationError("training split is empty")
        _fit(model, params, cfg, train_utts, dev_utts, pad, report)
    model.eval()
    if cfg.evaluate_dev:
        for split in DEV_SPLITS:
            utts = corpus.split(split)
            if utts:
                report.reports[split] = evaluate(model, utts, vocab=vocab).to_dict()
    return model, report


def _fit(model, params, cfg, train_utts, dev_utts, pad, report):
    torch.manual_seed(cfg.seed)
    opt = torch.optim.Adam(params, lr=cfg.lr, betas=(0.9, 0.999), eps=1e-8)
    trainable_names = [n for n, p in model.named_parameters() if p.requires_grad]
    variant = model.variant

    def snapshot_state():
        sd = model.state_dict()
        return {n: sd[n].clone() for n in trainable_names}

    def log_dev(step):
        if not dev_utts:
            return
        model.eval()
        loss = dev_loss(model, dev_utts)
        model.train()
        report.dev_log.append({"step": step, "dev_loss": loss})
        if loss < best["loss"]:
            best.update(loss=loss, step=step, state=snapshot_state())

    best = {"loss": math.inf, "step": 0, "state": snapshot_state()}
    model.train()
    log_dev(0)
    step = 0
    for epoch in range(cfg.epochs):
        rng = np.random.default_rng([cfg.seed, epoch])
        sums: dict[str, float] = {}
        n_batches = 0
        for chunk in _batches(train_utts, cfg.batch_size, rng):
            batch = collate(chunk, pad)
            mode = _base_prompt_mode(rng, cfg.concat_prob) if cfg.stage == "base" else None
            terms = compose_loss(model.losses(batch, mode), variant, cfg.alpha, cfg.lam,
                                 cfg.ctc_route)
            loss = terms["L_final"]
            if not torch.isfinite(loss):
                raise TrainingError(f"non-finite loss at step {step}", {
                    "step": step, "epoch": epoch, "utterances": [u.id for u in chunk],
                    "terms": {k: float(v.detach()) for k, v in terms.items() if k != "weights"}})
            opt.zero_grad()
            loss.backward()
            if cfg.clip_norm > 0:
                torch.nn.utils.clip_grad_norm_(params, cfg.clip_norm)
            opt.step()
            step += 1
            n_batches += 1
            for k, v in terms.items():
                if k != "weights":
                    sums[k] = sums.get(k, 0.0) + float(v.detach())
            if cfg.eval_every and step % cfg.eval_every == 0:
                log_dev(step)
            if cfg.max_steps and step >= cfg.max_steps:
                break
        report.epochs.append({"epoch": epoch, "step": step,
                              **{k: v / max(n_batches, 1) for k, v in sorted(sums.items())}})
        log.info("epoch %d step %d %s", epoch, step,
                 " ".join(f"{k}={v / max(n_batches, 1):.3f}" for k, v in sorted(sums.items())))
        if not (cfg.eval_every and step % cfg.eval_every == 0):
            log_dev(step)
        if cfg.max_steps and step >= cfg.max_steps:
            break
    if dev_utts:
        model.load_state_dict(best["state"], strict=False)
        report.selected_step = best["step"]
    else:
        report.selected_step = step


def transcribe(model: CSModel, utts: Sequence[Utterance], prompt_mode: str | None = None,
               batch_size: int = 100, vocab: Vocabulary = Vocabulary()) -> list[list[int]]:
    """Greedy token transcripts; single prompts use each utterance's dominant language."""
    model.eval()
    pad = model.cfg.special_tokens.pad
    hyps = []
    for chunk in _batches(utts, batch_size, None):
        hyps.extend(model.transcribe(collate(chunk, pad), prompt_mode, n_symbols=vocab.n_symbols))
    return hyps


def score_transcripts(utts: Sequence[Utterance], hyps: Sequence[Sequence[int]],
                      vocab: Vocabulary = Vocabulary()) -> tuple[ErrorReport, list[ErrorReport]]:
    return score_corpus([u.text for u in utts], [vocab.render(h) for h in hyps])


def evaluate(model: CSModel, utts: Sequence[Utterance], prompt_mode: str | None = None,
             vocab: Vocabulary = Vocabulary()) -> ErrorReport:
    if not utts:
        raise ValidationError("cannot evaluate an empty split")
    hyps = transcribe(model, utts, prompt_mode, vocab=vocab)
    return score_transcripts(utts, hyps, vocab)[0]


def evaluate_split(model: CSModel, corpus: CorpusManifest, split: str,
                   prompt_mode: str | None = None) -> ErrorReport:
    return evaluate(model, corpus.split(split), prompt_mode)


def ablate(corpus: CorpusManifest, base_ckpt, cfg: TrainConfig | None = None,
           ids: Sequence[int] = tuple(TABLE_I)) -> dict:
    """Train and evaluate every requested variant with identical seed and budget.

    Returns ``{"rows": [...], "config": ...}``; each row has the variant
    flags, the per-split reports (Overall/ZH/EN) and the mean overall MER.
    """
    cfg = cfg or TrainConfig()
    base = _resolve_base(base_ckpt)
    if base is None:
        raise ConfigurationError("ablation requires a stage-0 base checkpoint")
    rows = []
    for i in ids:
        vcfg = cfg.with_variant(TABLE_I[i])
        vcfg.evaluate_dev = True
        model, rep = train(vcfg, corpus, base)
        mers = [rep.reports[s]["overall"]["mer"] for s in DEV_SPLITS if s in rep.reports]
        rows.append({
            "id": i,
            "variant": TABLE_I[i].to_dict(),
            "n_trainable": rep.n_trainable,
            "selected_step": rep.selected_step,
            **{s: rep.reports.get(s) for s in DEV_SPLITS},
            "mean_overall_mer": float(np.mean(mers)) if mers else None,
        })
        log.info("ablation ID-%d mean MER %.4f", i, rows[-1]["mean_overall_mer"] or float("nan"))
    return {"config": cfg.to_dict(), "rows": rows}


def format_table(table: dict) -> str:
    """Plain-text rendering in the Dev_man / Dev_sge x Overall / ZH / EN layout."""
    lines = ["ID | Dev_man Overall   ZH    EN | Dev_sge Overall   ZH    EN"]
    for row in table["rows"]:
        cells = []
        for s in DEV_SPLITS:
            rep = row.get(s) or {}
            for scope in ("overall", "zh", "en"):
                v = (rep.get(scope) or {}).get("mer")
                cells.append("  n/a" if v is None else f"{100 * v:5.1f}")
        lines.append(f"{row['id']:2d} |         {' '.join(cells[:3])} |         {' '.join(cells[3:])}")
    return "\n".join(lines)


def dump_fusion_weights(model: CSModel, utts: Sequence[Utterance], path) -> int:
    """Write teacher-forced fusion weights as TSV: id, position, w_zh, w_en, ref_lang.

    Position ``i`` is the decoder step predicting reference token ``i``.
    Returns the number of rows written.
    """
    if not model.variant.language_aware:
        raise ConfigurationError("fusion weights exist only for language-aware decoding")
    pad = model.cfg.special_tokens.pad
    rows = 0
    model.eval()
    with open(path, "w", encoding="utf-8") as f:
        f.write("id\tposition\tw_zh\tw_en\tref_lang\n")
        with torch.no_grad():
            for chunk in _batches(utts, 64, None):
                w = model.losses(collate(chunk, pad))["weights"]
                for b, u in enumerate(chunk):
                    for i, tag in enumerate(u.lang_tags):
                        f.write(f"{u.id}\t{i}\t{float(w[b, i, 0]):.6f}\t{float(w[b, i, 1]):.6f}\t{tag}\n")
                        rows += 1
    return rows

