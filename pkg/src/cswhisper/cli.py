"""Command-line entry point: ``cswhisper <subcommand> ...``.

Exit status is 0 on success, 1 on usage, configuration or data errors and
2 on anything unexpected. Outputs are never overwritten without
``--force``. Training flags mirror ``TrainConfig`` field names; a
``--config`` JSON file with the same keys may supply them, and explicit
flags win. Log verbosity comes from ``CSWHISPER_LOG_LEVEL`` (default
``WARNING``).
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import fields
from pathlib import Path

from .checkpoint import load_checkpoint, save_checkpoint
from .data import (
    SPLITS,
    Vocabulary,
    generate_corpus,
    load_manifest,
    make_language_specs,
    save_manifest,
)
from .errors import CSWhisperError
from .metrics import score_corpus
from .pipeline import PROMPT_MODES, TABLE_I
from .training import (
    CTC_ROUTES,
    DEV_SPLITS,
    TrainConfig,
    ablate,
    dump_fusion_weights,
    evaluate,
    format_table,
    train,
    transcribe,
)

log = logging.getLogger("cswhisper")
ENV_LOG_LEVEL = "CSWHISPER_LOG_LEVEL"


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: {message}")


# -- shared helpers ------------------------------------------------------------

def _output(path, force: bool) -> Path:
    p = Path(path)
    if p.exists() and not force:
        raise UsageError(f"{p} exists; pass --force to overwrite")
    p.parent.mkdir(parents=True, exist_ok=True)
    return p


def _write_json(path, obj, force):
    _output(path, force).write_text(json.dumps(obj, indent=2, sort_keys=True, allow_nan=False) + "\n",
                                    encoding="utf-8")


_TRAIN_FIELDS = [f for f in fields(TrainConfig) if f.name not in ("stage", "evaluate_dev")]


def _add_train_flags(p):
    p.add_argument("--config", help="JSON file with TrainConfig keys")
    for f in _TRAIN_FIELDS:
        flag = "--" + ("lambda" if f.name == "lam" else f.name.replace("_", "-"))
        kw = {"dest": f.name, "default": None}
        if f.type in (bool, "bool"):
            p.add_argument(flag, action=argparse.BooleanOptionalAction, **kw)
        elif f.name == "prompt_mode":
            p.add_argument(flag, choices=PROMPT_MODES, **kw)
        elif f.name == "ctc_route":
            p.add_argument(flag, choices=CTC_ROUTES, **kw)
        else:
            p.add_argument(flag, type=float if f.type in (float, "float") else int, **kw)


def _train_config(args, stage: str, variant_id: int | None = None) -> TrainConfig:
    settings = {}
    if args.config:
        try:
            settings = json.loads(Path(args.config).read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise UsageError(f"{args.config}: invalid JSON ({exc.msg})") from exc
        if not isinstance(settings, dict):
            raise UsageError(f"{args.config}: expected a JSON object")
        settings = TrainConfig.from_dict({"stage": stage, **settings}).to_dict()
        settings.pop("stage")
    if variant_id is not None:
        settings.update(TABLE_I[variant_id].to_dict())
    for f in _TRAIN_FIELDS:
        v = getattr(args, f.name)
        if v is not None:
            settings["lambda" if f.name == "lam" else f.name] = v
    if "lambda" in settings:
        settings["lam"] = settings.pop("lambda")
    return TrainConfig.for_stage(stage, **settings)


def _split_utts(corpus, split):
    names = DEV_SPLITS if split == "dev" else (split,)
    return {s: corpus.split(s) for s in names}


# -- subcommands -------------------------------------------------------------

def cmd_gen_data(args):
    specs = make_language_specs(args.lang_seed, lang_shift=args.lang_shift,
                                similarity=args.similarity)
    out = _output(args.out, args.force)
    m = generate_corpus(args.seed, args.n_train, args.n_dev, args.switch_prob, args.noise_std,
                        specs=specs)
    save_manifest(m, out)
    log.info("wrote %d utterances to %s", len(m), out)


def _train_and_save(args, stage, base=None, variant_id=None):
    cfg = _train_config(args, stage, variant_id)
    out = _output(args.out, args.force)
    report_path = _output(args.report, args.force) if args.report else None
    corpus = load_manifest(args.corpus)
    model, report = train(cfg, corpus, base)
    save_checkpoint(out, model, cfg.to_dict(), base_only=stage == "base")
    if report_path:
        _write_json(report_path, report.to_dict(), True)
    summary = {s: r["overall"]["mer"] for s, r in report.reports.items()}
    log.info("saved %s (selected step %d, dev MER %s)", out, report.selected_step, summary)


def cmd_train_base(args):
    _train_and_save(args, "base")


def cmd_adapt(args):
    if not Path(args.base).exists():
        raise UsageError(f"base checkpoint {args.base} not found")
    _train_and_save(args, "adapt", base=args.base, variant_id=args.variant_id)


def cmd_eval(args):
    out = _output(args.out, args.force)
    fw = _output(args.fusion_weights, args.force) if args.fusion_weights else None
    model = load_checkpoint(args.ckpt)
    corpus = load_manifest(args.corpus)
    reports = {s: evaluate(model, utts, args.prompt_mode).to_dict()
               for s, utts in _split_utts(corpus, args.split).items()}
    _write_json(out, reports, True)
    if fw:
        utts = [u for s in _split_utts(corpus, args.split).values() for u in s]
        dump_fusion_weights(model, utts, fw)


def cmd_decode(args):
    out = _output(args.out, args.force)
    refs = _output(args.refs, args.force) if args.refs else None
    model = load_checkpoint(args.ckpt)
    corpus = load_manifest(args.corpus)
    vocab = Vocabulary()
    utts = [u for s in _split_utts(corpus, args.split).values() for u in s]
    hyps = transcribe(model, utts, args.prompt_mode, vocab=vocab)
    out.write_text("".join(vocab.render(h) + "\n" for h in hyps), encoding="utf-8")
    if refs:
        refs.write_text("".join(u.text + "\n" for u in utts), encoding="utf-8")


def _read_lines(path):
    return Path(path).read_text(encoding="utf-8").splitlines()


def cmd_score(args):
    refs, hyps = _read_lines(args.ref), _read_lines(args.hyp)
    if len(refs) != len(hyps):
        raise UsageError(f"{args.ref} has {len(refs)} lines but {args.hyp} has {len(hyps)}")
    out = _output(args.out, args.force) if args.out else None
    per = _output(args.per_utt, args.force) if args.per_utt else None
    total, rows = score_corpus(refs, hyps, case_sensitive=args.case_sensitive)
    text = total.to_json()
    if out:
        out.write_text(text + "\n", encoding="utf-8")
    else:
        print(text)
    if per:
        lines = ["line\tmer\ts\td\ti\tn\tcer\twer"]
        for k, r in enumerate(rows, start=1):
            o = r.overall
            lines.append("\t".join(map(str, [k, _fmt(r.mer), o.substitutions, o.deletions,
                                             o.insertions, o.ref_units, _fmt(r.cer), _fmt(r.wer)])))
        per.write_text("\n".join(lines) + "\n", encoding="utf-8")


def _fmt(x):
    return "nan" if x != x else f"{x:.6f}"


def cmd_ablate(args):
    out = _output(args.out, args.force)
    ids = [int(i) for i in args.ids.split(",")] if args.ids else list(TABLE_I)
    bad = [i for i in ids if i not in TABLE_I]
    if bad:
        raise UsageError(f"unknown variant ids {bad}")
    cfg = _train_config(args, "adapt")
    table = ablate(load_manifest(args.corpus), args.base, cfg, ids)
    _write_json(out, table, True)
    print(format_table(table), file=sys.stderr)


# -- parser ----------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="cswhisper", description="Code-switching adaptation of a miniature "
                                                   "Whisper-style model.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(p, out_help):
        p.add_argument("--out", required=True, help=out_help)
        p.add_argument("--force", action="store_true", help="overwrite existing outputs")

    p = sub.add_parser("gen-data", help="generate a synthetic corpus manifest")
    common(p, "manifest path (JSON lines)")
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--n-train", type=int, default=2000)
    p.add_argument("--n-dev", type=int, default=200, help="utterances per dev split")
    p.add_argument("--switch-prob", type=float, default=0.3)
    p.add_argument("--noise-std", type=float, default=0.5)
    p.add_argument("--lang-seed", type=int, default=0,
                   help="seed of the language prototypes; keep equal across base and adapt corpora")
    p.add_argument("--lang-shift", type=float, default=0.5)
    p.add_argument("--similarity", type=float, default=1.0)
    p.set_defaults(func=cmd_gen_data)

    for name, func, helptext in (("train-base", cmd_train_base, "stage 0: train the base model"),
                                 ("adapt", cmd_adapt, "stage 1: adapt a frozen base")):
        p = sub.add_parser(name, help=helptext)
        common(p, "checkpoint path")
        p.add_argument("--corpus", required=True)
        p.add_argument("--report", help="training report JSON")
        if name == "adapt":
            p.add_argument("--base", required=True, help="stage-0 checkpoint")
            p.add_argument("--variant-id", type=int, choices=sorted(TABLE_I),
                           help="start from the flags of an ablation row")
        _add_train_flags(p)
        p.set_defaults(func=func)

    for name, func, helptext in (("eval", cmd_eval, "score a checkpoint on dev splits"),
                                 ("decode", cmd_decode, "write greedy transcripts")):
        p = sub.add_parser(name, help=helptext)
        common(p, "report JSON" if name == "eval" else "hypothesis text, one line per utterance")
        p.add_argument("--ckpt", required=True)
        p.add_argument("--corpus", required=True)
        p.add_argument("--split", choices=SPLITS + ("dev",), default="dev")
        p.add_argument("--prompt-mode", choices=PROMPT_MODES,
                       help="override the checkpoint's prompt mode")
        if name == "eval":
            p.add_argument("--fusion-weights", help="TSV of per-position fusion weights")
        else:
            p.add_argument("--refs", help="also write reference transcripts here")
        p.set_defaults(func=func)

    p = sub.add_parser("score", help="mixed error rate of hypothesis against reference text")
    p.add_argument("--ref", required=True)
    p.add_argument("--hyp", required=True)
    p.add_argument("--out", help="report JSON (default: stdout)")
    p.add_argument("--per-utt", help="per-line TSV")
    p.add_argument("--case-sensitive", action="store_true")
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_score)

    p = sub.add_parser("ablate", help="train and score the ablation variants")
    common(p, "table JSON")
    p.add_argument("--corpus", required=True)
    p.add_argument("--base", required=True)
    p.add_argument("--ids", help="comma separated variant ids (default: all)")
    _add_train_flags(p)
    p.set_defaults(func=cmd_ablate)
    return parser


def _configure_logging():
    level = os.environ.get(ENV_LOG_LEVEL, "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING), stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")


def main(argv=None) -> int:
    _configure_logging()
    try:
        args = build_parser().parse_args(argv)
        args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (CSWhisperError, FileNotFoundError, IsADirectoryError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001
        log.debug("internal error", exc_info=True)
        print(f"internal error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
