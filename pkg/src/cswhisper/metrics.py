"""Mixed-unit error rates for Mandarin-English code-switched transcripts.

Mandarin is scored per character (CER), English per whitespace word (WER)
and the union of both unit streams gives the mix error rate (MER).
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Iterable, NamedTuple, Sequence

CJK_RANGES = ((0x3400, 0x4DBF), (0x4E00, 0x9FFF))

MATCH, SUB, DEL, INS = "match", "sub", "del", "ins"


def is_cjk(ch: str) -> bool:
    cp = ord(ch)
    return any(lo <= cp <= hi for lo, hi in CJK_RANGES)


class MixedUnit(NamedTuple):
    surface: str
    lang: str


def tokenize_mixed(text: str) -> list[MixedUnit]:
    """Split ``text`` into CJK characters and non-CJK whitespace-delimited runs."""
    units = []
    run = []

    def flush():
        if run:
            units.append(MixedUnit("".join(run), "en"))
            run.clear()

    for ch in text:
        if ch.isspace():
            flush()
        elif is_cjk(ch):
            flush()
            units.append(MixedUnit(ch, "zh"))
        else:
            run.append(ch)
    flush()
    return units


class EditOp(NamedTuple):
    op: str
    ref: int | None  # index into ref, None for insertions
    hyp: int | None  # index into hyp, None for deletions


def _key(unit, case_sensitive):
    surface = unit.surface if isinstance(unit, MixedUnit) else str(unit)
    return surface if case_sensitive else surface.lower()


def align(ref: Sequence, hyp: Sequence, case_sensitive: bool = False) -> list[EditOp]:
    """Minimum-edit alignment with unit costs.

    Ties are broken by preferring match, then substitution, deletion and
    insertion while tracing back from the end.
    """
    r = [_key(u, case_sensitive) for u in ref]
    h = [_key(u, case_sensitive) for u in hyp]
    n, m = len(r), len(h)
    d = [[0] * (m + 1) for _ in range(n + 1)]
    for i in range(1, n + 1):
        d[i][0] = i
    for j in range(1, m + 1):
        d[0][j] = j
    for i in range(1, n + 1):
        ri = r[i - 1]
        row, prev = d[i], d[i - 1]
        for j in range(1, m + 1):
            diag = prev[j - 1] + (ri != h[j - 1])
            row[j] = min(diag, prev[j] + 1, row[j - 1] + 1)

    ops = []
    i, j = n, m
    while i or j:
        if i and j and r[i - 1] == h[j - 1] and d[i][j] == d[i - 1][j - 1]:
            ops.append(EditOp(MATCH, i - 1, j - 1))
            i, j = i - 1, j - 1
        elif i and j and d[i][j] == d[i - 1][j - 1] + 1:
            ops.append(EditOp(SUB, i - 1, j - 1))
            i, j = i - 1, j - 1
        elif i and d[i][j] == d[i - 1][j] + 1:
            ops.append(EditOp(DEL, i - 1, None))
            i -= 1
        else:
            ops.append(EditOp(INS, None, j - 1))
            j -= 1
    ops.reverse()
    return ops


def edit_cost(ops: Iterable[EditOp]) -> int:
    return sum(op.op != MATCH for op in ops)


@dataclass
class ErrorCounts:
    substitutions: int = 0
    deletions: int = 0
    insertions: int = 0
    ref_units: int = 0

    @property
    def errors(self) -> int:
        return self.substitutions + self.deletions + self.insertions

    @property
    def error_rate(self) -> float:
        """(S + D + I) / N; NaN marks an undefined rate (N == 0, errors > 0)."""
        if self.ref_units == 0:
            return 0.0 if self.errors == 0 else math.nan
        return self.errors / self.ref_units

    def __iadd__(self, other: "ErrorCounts"):
        self.substitutions += other.substitutions
        self.deletions += other.deletions
        self.insertions += other.insertions
        self.ref_units += other.ref_units
        return self

    def to_dict(self) -> dict:
        rate = self.error_rate
        return {
            "mer": None if math.isnan(rate) else rate,
            "s": self.substitutions,
            "d": self.deletions,
            "i": self.insertions,
            "n": self.ref_units,
        }


SCOPES = ("overall", "zh", "en")


@dataclass
class ErrorReport:
    overall: ErrorCounts = field(default_factory=ErrorCounts)
    zh: ErrorCounts = field(default_factory=ErrorCounts)
    en: ErrorCounts = field(default_factory=ErrorCounts)

    def __getitem__(self, scope: str) -> ErrorCounts:
        return getattr(self, scope)

    def __iadd__(self, other: "ErrorReport"):
        for s in SCOPES:
            self[s].__iadd__(other[s])
        return self

    @property
    def mer(self) -> float:
        return self.overall.error_rate

    @property
    def cer(self) -> float:
        return self.zh.error_rate

    @property
    def wer(self) -> float:
        return self.en.error_rate

    def to_dict(self) -> dict:
        return {s: self[s].to_dict() for s in SCOPES}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    def row(self) -> str:
        """Percentages in the Overall / ZH / EN layout."""
        def pct(x):
            return "  n/a" if math.isnan(x) else f"{100 * x:5.1f}"
        return f"{pct(self.mer)} {pct(self.cer)} {pct(self.wer)}"


def score_units(ref: Sequence[MixedUnit], hyp: Sequence[MixedUnit],
                case_sensitive: bool = False) -> ErrorReport:
    """Score pre-tokenized units.

    Substitutions and deletions count against the language of the
    reference unit; an insertion has no reference counterpart and counts
    against the language of the inserted hypothesis unit.
    """
    rep = ErrorReport()
    for u in ref:
        rep.overall.ref_units += 1
        rep[u.lang].ref_units += 1
    for op in align(ref, hyp, case_sensitive):
        if op.op == SUB:
            rep.overall.substitutions += 1
            rep[ref[op.ref].lang].substitutions += 1
        elif op.op == DEL:
            rep.overall.deletions += 1
            rep[ref[op.ref].lang].deletions += 1
        elif op.op == INS:
            rep.overall.insertions += 1
            rep[hyp[op.hyp].lang].insertions += 1
    return rep


def score(ref_text: str, hyp_text: str, case_sensitive: bool = False) -> ErrorReport:
    return score_units(tokenize_mixed(ref_text), tokenize_mixed(hyp_text), case_sensitive)


def score_corpus(refs: Sequence[str], hyps: Sequence[str],
                 case_sensitive: bool = False) -> tuple[ErrorReport, list[ErrorReport]]:
    """Aggregate report over parallel transcript lists plus per-utterance reports."""
    if len(refs) != len(hyps):
        raise ValueError(f"{len(refs)} references but {len(hyps)} hypotheses")
    total = ErrorReport()
    per_utt = []
    for r, h in zip(refs, hyps):
        rep = score(r, h, case_sensitive)
        total += rep
        per_utt.append(rep)
    return total, per_utt
