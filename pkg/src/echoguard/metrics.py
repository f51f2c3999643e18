"""Transcript and listener metrics: WER, transcript cosine, jamming success rate, Utility Index."""

from __future__ import annotations

import csv
import io
import json
import math
import re
from collections import Counter
from dataclasses import asdict, dataclass
from typing import Iterable, List, Optional, Sequence, Tuple, Union

from .stoi import stoi  # noqa: F401  (re-exported: all metrics importable from here)

Tokens = Union[str, Sequence[str]]

SUCCESS_THRESHOLD = 0.5

_PUNCT = re.compile(r"[^\w\s]")


class MetricError(ValueError):
    pass


def tokenize(text: Tokens) -> List[str]:
    """Lowercase, strip punctuation, split on whitespace. Accepts a string or a token sequence."""
    if not isinstance(text, str):
        text = " ".join(text)
    return _PUNCT.sub("", text.lower()).split()


@dataclass(frozen=True)
class WerBreakdown:
    substitutions: int
    deletions: int
    insertions: int
    reference_words: int

    @property
    def errors(self) -> int:
        return self.substitutions + self.deletions + self.insertions

    @property
    def wer(self) -> float:
        return self.errors / self.reference_words


# A DP cell: (cost, substitutions, deletions, insertions).
Cell = Tuple[int, int, int, int]


def initial_column(reference: Sequence[str]) -> List[Cell]:
    """DP column for an empty hypothesis: every reference word deleted."""
    return [(i, 0, i, 0) for i in range(len(reference) + 1)]


def extend_column(column: List[Cell], reference: Sequence[str], word: str) -> List[Cell]:
    """Advance the edit-distance DP by one hypothesis word.

    column[i] holds the best alignment of reference[:i] against the
    hypothesis so far; the result does the same with `word` appended.
    Ties prefer a match/substitution, then deletion, then insertion.
    """
    cost, s, d, ins = column[0]
    out = [(cost + 1, s, d, ins + 1)]
    for i, ref_word in enumerate(reference, start=1):
        c, s, d, ins = column[i - 1]
        best = (c, s, d, ins) if ref_word == word else (c + 1, s + 1, d, ins)
        c, s, d, ins = out[i - 1]
        if c + 1 < best[0]:
            best = (c + 1, s, d + 1, ins)
        c, s, d, ins = column[i]
        if c + 1 < best[0]:
            best = (c + 1, s, d, ins + 1)
        out.append(best)
    return out


def align(reference: Sequence[str], hypothesis: Sequence[str]) -> Cell:
    column = initial_column(reference)
    for word in hypothesis:
        column = extend_column(column, reference, word)
    return column[-1]


def wer(reference: Tokens, hypothesis: Tokens) -> WerBreakdown:
    ref, hyp = tokenize(reference), tokenize(hypothesis)
    if not ref:
        raise MetricError("reference transcript is empty")
    _, s, d, i = align(ref, hyp)
    return WerBreakdown(s, d, i, len(ref))


def transcript_cosine(a: Tokens, b: Tokens) -> float:
    """Cosine of bag-of-words term-frequency vectors."""
    ta, tb = Counter(tokenize(a)), Counter(tokenize(b))
    if not ta and not tb:
        return 1.0
    if not ta or not tb:
        return 0.0
    dot = sum(count * tb[word] for word, count in ta.items())
    norm = math.sqrt(sum(v * v for v in ta.values())) * math.sqrt(sum(v * v for v in tb.values()))
    return min(1.0, dot / norm)


@dataclass
class EvalRecord:
    sample_id: str
    clean_transcript: List[str]
    jammed_transcript: List[str]
    cosine: float
    reference: Optional[List[str]] = None
    wer: Optional[float] = None
    stoi: Optional[float] = None
    pleasantness: Optional[float] = None
    clarity: Optional[float] = None
    utility: Optional[float] = None
    error: Optional[str] = None

    def __post_init__(self):
        if self.error is not None:
            return
        if not -1.0 <= self.cosine <= 1.0:
            raise MetricError(f"cosine {self.cosine} out of range")
        rated = self.pleasantness is not None and self.clarity is not None
        if self.utility is None and rated:
            self.utility = utility_index(self.pleasantness, self.clarity, self.cosine)
        if self.utility is not None and not rated:
            raise MetricError("utility requires both pleasantness and clarity ratings")

    @classmethod
    def from_transcripts(cls, sample_id: str, clean: Tokens, jammed: Tokens,
                         reference: Optional[Tokens] = None, **extra) -> "EvalRecord":
        clean_t, jammed_t = tokenize(clean), tokenize(jammed)
        ref_t = tokenize(reference) if reference is not None else None
        wer_value = wer(ref_t, jammed_t).wer if ref_t else None
        return cls(sample_id, clean_t, jammed_t, transcript_cosine(clean_t, jammed_t),
                   reference=ref_t, wer=wer_value, **extra)


def jamming_success_rate(records: Sequence[EvalRecord], threshold: float = SUCCESS_THRESHOLD) -> float:
    if not records:
        raise MetricError("no records")
    return sum(r.cosine < threshold for r in records) / len(records)


def _check_rating(name: str, value: float):
    if not 1.0 <= value <= 5.0:
        raise MetricError(f"{name} rating {value} outside [1, 5]")


def utility_index(pleasantness: float, clarity: float, cosine: float) -> float:
    _check_rating("pleasantness", pleasantness)
    _check_rating("clarity", clarity)
    if not -1.0 <= cosine <= 1.0:
        raise MetricError(f"cosine {cosine} outside [-1, 1]")
    return ((pleasantness - 1.0) / 4.0) * ((clarity - 1.0) / 4.0) * ((1.0 - cosine) / 2.0)


def _mean(values: Iterable[Optional[float]]) -> Optional[float]:
    vals = [v for v in values if v is not None]
    return sum(vals) / len(vals) if vals else None


REPORT_COLUMNS = ("sample_id", "wer", "cosine", "stoi", "pleasantness", "clarity", "utility",
                  "clean_transcript", "jammed_transcript", "error")


@dataclass
class Report:
    mean_wer: Optional[float]
    mean_cosine: float
    success_rate: float
    mean_stoi: Optional[float]
    mean_utility: Optional[float]
    records: List[EvalRecord]

    @property
    def columns(self) -> List[str]:
        cols = list(REPORT_COLUMNS)
        if all(r.utility is None for r in self.records):
            cols = [c for c in cols if c not in ("pleasantness", "clarity", "utility")]
        return cols

    def rows(self) -> List[dict]:
        rows = []
        for r in self.records:
            row = asdict(r)
            row["clean_transcript"] = " ".join(r.clean_transcript)
            row["jammed_transcript"] = " ".join(r.jammed_transcript)
            rows.append({c: row[c] for c in self.columns})
        return rows

    def summary(self) -> dict:
        return {
            "n_samples": sum(r.error is None for r in self.records),
            "n_failed": sum(r.error is not None for r in self.records),
            "mean_wer": self.mean_wer,
            "mean_cosine": self.mean_cosine,
            "success_rate": self.success_rate,
            "mean_stoi": self.mean_stoi,
            "mean_utility": self.mean_utility,
        }

    def to_json(self) -> str:
        return json.dumps({"summary": self.summary(), "samples": self.rows()}, indent=2)

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.DictWriter(buf, fieldnames=self.columns, lineterminator="\n")
        writer.writeheader()
        for row in self.rows():
            writer.writerow({k: "" if v is None else v for k, v in row.items()})
        return buf.getvalue()


def aggregate_report(records: Sequence[EvalRecord],
                     threshold: float = SUCCESS_THRESHOLD) -> Report:
    failed = [r for r in records if r.error is not None]
    records = [r for r in records if r.error is None]
    if not records:
        raise MetricError("no successful records to aggregate")
    return Report(
        mean_wer=_mean(r.wer for r in records),
        mean_cosine=sum(r.cosine for r in records) / len(records),
        success_rate=jamming_success_rate(records, threshold),
        mean_stoi=_mean(r.stoi for r in records),
        mean_utility=_mean(r.utility for r in records),
        records=records + failed,
    )
