"""Recall-oriented ROUGE-N/L/S, word error rate and summary statistics.

All functions take token lists; :func:`tokenize` produces them from text.
"""

from __future__ import annotations

import csv
import io
import json
import unicodedata
from collections import Counter
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from itertools import combinations
from typing import Sequence

Tokens = Sequence[str]


class MetricUsageError(ValueError):
    """Raised for inputs a metric is undefined on (e.g. an empty reference)."""


@dataclass(frozen=True)
class TokenizeConfig:
    lowercase: bool = True
    strip_punctuation: bool = True


def tokenize(text: str, config: TokenizeConfig = TokenizeConfig()) -> list[str]:
    """Lowercase, drop Unicode punctuation characters, split on whitespace."""
    if config.lowercase:
        text = text.lower()
    if config.strip_punctuation:
        text = "".join(ch for ch in text if not unicodedata.category(ch).startswith("P"))
    return text.split()


def ngrams(tokens: Tokens, n: int) -> Counter:
    return Counter(tuple(tokens[i : i + n]) for i in range(len(tokens) - n + 1))


def skip_bigrams(tokens: Tokens, max_gap: int | None = None) -> Counter:
    """Ordered token pairs; ``max_gap`` bounds how many tokens may sit between them."""
    if max_gap is None:
        return Counter((tokens[i], tokens[j]) for i, j in combinations(range(len(tokens)), 2))
    return Counter(
        (tokens[i], tokens[j])
        for i in range(len(tokens))
        for j in range(i + 1, min(len(tokens), i + max_gap + 2))
    )


def _clipped_recall(cand: Counter, ref: Counter) -> float:
    total = sum(ref.values())
    if total == 0:
        return 0.0
    return sum(min(c, cand[g]) for g, c in ref.items()) / total


def _check_refs(references) -> None:
    if len(references) == 0:
        raise MetricUsageError("at least one reference is required")


def rouge_n(candidate: Tokens, references: Sequence[Tokens], n: int) -> float:
    """Clipped n-gram recall per reference, averaged over references."""
    if n < 1:
        raise MetricUsageError("n must be at least 1")
    _check_refs(references)
    cand = ngrams(candidate, n)
    return sum(_clipped_recall(cand, ngrams(r, n)) for r in references) / len(references)


def lcs_length(a: Tokens, b: Tokens) -> int:
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0]
        for j, y in enumerate(b):
            cur.append(prev[j] + 1 if x == y else max(prev[j + 1], cur[j]))
        prev = cur
    return prev[-1]


def rouge_l(candidate: Tokens, reference: Tokens) -> float:
    """LCS length over reference length."""
    if len(reference) == 0:
        raise MetricUsageError("reference must be non-empty")
    return lcs_length(candidate, reference) / len(reference)


def rouge_s(candidate: Tokens, references: Sequence[Tokens], max_gap: int | None = None) -> float:
    _check_refs(references)
    cand = skip_bigrams(candidate, max_gap)
    return sum(_clipped_recall(cand, skip_bigrams(r, max_gap)) for r in references) / len(references)


@dataclass(frozen=True)
class WerResult:
    wer: float
    substitutions: int
    deletions: int
    insertions: int

    @property
    def errors(self) -> int:
        return self.substitutions + self.deletions + self.insertions


def edit_distance(ref: Tokens, hyp: Tokens) -> int:
    prev = list(range(len(hyp) + 1))
    for i, r in enumerate(ref, 1):
        cur = [i]
        for j, h in enumerate(hyp, 1):
            cur.append(min(prev[j - 1] + (r != h), prev[j] + 1, cur[j - 1] + 1))
        prev = cur
    return prev[-1]


def wer(reference: Tokens, hypothesis: Tokens) -> WerResult:
    """(S + D + I) / len(reference) under a unit-cost alignment.

    Among optimal alignments the backtrace prefers a match or substitution,
    then a deletion, then an insertion.
    """
    if len(reference) == 0:
        raise MetricUsageError("reference must be non-empty")
    R, H = len(reference), len(hypothesis)
    d = [[0] * (H + 1) for _ in range(R + 1)]
    for i in range(R + 1):
        d[i][0] = i
    for j in range(H + 1):
        d[0][j] = j
    for i in range(1, R + 1):
        for j in range(1, H + 1):
            sub = d[i - 1][j - 1] + (reference[i - 1] != hypothesis[j - 1])
            d[i][j] = min(sub, d[i - 1][j] + 1, d[i][j - 1] + 1)
    s = dl = ins = 0
    i, j = R, H
    while i > 0 or j > 0:
        if i > 0 and j > 0 and d[i][j] == d[i - 1][j - 1] + (reference[i - 1] != hypothesis[j - 1]):
            s += reference[i - 1] != hypothesis[j - 1]
            i, j = i - 1, j - 1
        elif i > 0 and d[i][j] == d[i - 1][j] + 1:
            dl += 1
            i -= 1
        else:
            ins += 1
            j -= 1
    return WerResult((s + dl + ins) / R, s, dl, ins)


def novel_ngram_percentage(source: Tokens, summary: Tokens, n: int) -> float | None:
    """Percent of summary n-gram positions whose n-gram never occurs in the source.

    ``None`` when the summary has fewer than ``n`` tokens.
    """
    if len(summary) < n:
        return None
    seen = set(ngrams(source, n))
    grams = [tuple(summary[i : i + n]) for i in range(len(summary) - n + 1)]
    return 100.0 * sum(g not in seen for g in grams) / len(grams)


def unigram_intersection(text: Tokens, summary: Tokens) -> float:
    if not summary:
        raise MetricUsageError("summary must be non-empty")
    t, s = Counter(text), Counter(summary)
    return sum(min(c, t[w]) for w, c in s.items()) / len(summary)


def unigram_intersection_filter(text: Tokens, summary: Tokens, lo: float = 0.30, hi: float = 0.92) -> bool:
    """Keep a pair only if the summary's unigram overlap lies strictly in ``(lo, hi)``."""
    if not text:
        raise MetricUsageError("text must be non-empty")
    f = unigram_intersection(text, summary)
    return lo < f < hi


# corpus evaluation

SCORE_KEYS = ("rouge-1", "rouge-2", "rouge-l", "rouge-s", "wer")


@dataclass
class MetricReport:
    per_example: list[dict] = field(default_factory=list)
    means: dict[str, float] = field(default_factory=dict)
    counts: dict[str, int] = field(default_factory=dict)
    tokenizer: dict = field(default_factory=dict)

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["metric", "mean"])
        for k in sorted(self.means):
            w.writerow([k, repr(self.means[k])])
        return buf.getvalue()


def score_example(example: dict, config: TokenizeConfig = TokenizeConfig()) -> dict:
    cand = tokenize(example["candidate"], config)
    refs = [tokenize(r, config) for r in example["references"]]
    _check_refs(refs)
    out = {
        "rouge-1": rouge_n(cand, refs, 1),
        "rouge-2": rouge_n(cand, refs, 2),
        "rouge-l": sum(rouge_l(cand, r) for r in refs) / len(refs),
        "rouge-s": rouge_s(cand, refs),
    }
    w = wer(refs[0], cand)
    out.update(wer=w.wer, substitutions=w.substitutions, deletions=w.deletions, insertions=w.insertions)
    if "source" in example:
        src = tokenize(example["source"], config)
        for n in (1, 2, 3):
            out[f"novel-{n}"] = novel_ngram_percentage(src, cand, n)
    return out


def evaluate_corpus(examples: list[dict], config: TokenizeConfig = TokenizeConfig(), workers: int = 1) -> MetricReport:
    """Score every example; results keep input order whatever ``workers`` is.

    ROUGE-L is averaged over references like the other ROUGE scores; WER uses
    the first reference.
    """
    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            rows = list(pool.map(lambda ex: score_example(ex, config), examples))
    else:
        rows = [score_example(ex, config) for ex in examples]
    means = {}
    for k in SCORE_KEYS + ("novel-1", "novel-2", "novel-3"):
        vals = [r[k] for r in rows if r.get(k) is not None]
        if vals:
            means[k] = sum(vals) / len(vals)
    counts = {k: sum(r[k] for r in rows) for k in ("substitutions", "deletions", "insertions")}
    counts["examples"] = len(rows)
    return MetricReport(rows, means, counts, asdict(config))


def read_jsonl(path) -> list[dict]:
    with open(path, encoding="utf-8") as fh:
        return [json.loads(line) for line in fh if line.strip()]
