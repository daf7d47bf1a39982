"""Corpus-level language metrics: BLEU, ROUGE-L, CIDEr, accuracy, MAE.

All scores are reported on a 0-100 scale. Conventions are pinned here so
results are reproducible:

- Tokenization lowercases and splits punctuation into standalone tokens.
- BLEU pools clipped n-gram counts over the corpus, takes the geometric
  mean of the n-gram precisions, and applies the brevity penalty
  ``exp(1 - r/c)`` when the candidate corpus is not longer than the
  reference corpus. The effective reference length picks, per pair, the
  reference length closest to the candidate's (ties toward the shorter).
  A zero n-gram precision is floored at a small epsilon so BLEU-4 stays
  defined on short answers; the epsilon is echoed in report metadata.
- ROUGE-L computes an LCS F-measure per reference with recall weighted
  by beta^2 (beta = 1.2), keeps the best reference, and averages pairs.
- CIDEr is the plain TF-IDF-cosine variant: counts times
  ``log(N_docs / df)`` per n-gram order 1..4, cosine against each
  reference averaged, then averaged over orders and pairs. The reported
  value is 100 times the raw mean cosine. It needs at least two
  evaluation pairs, otherwise every IDF degenerates to zero.
"""

from __future__ import annotations

import math
import re
from collections import Counter
from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

__all__ = [
    "EvalPair",
    "MetricReport",
    "tokenize",
    "bleu",
    "bleu_all",
    "rouge_l",
    "cider",
    "accuracy",
    "mae",
    "compute_caption_report",
]

BLEU_SMOOTHING_EPS = 1e-9
ROUGE_BETA = 1.2
CIDER_MAX_N = 4

_TOKEN_RE = re.compile(r"\w+|[^\w\s]")


def tokenize(text: str) -> list[str]:
    """Lowercase and split; punctuation becomes standalone tokens."""
    return _TOKEN_RE.findall(text.lower())


@dataclass(frozen=True)
class EvalPair:
    """One candidate against one or more references."""

    id: str
    candidate: str
    references: tuple[str, ...]
    task_tag: str | None = None

    def __post_init__(self) -> None:
        refs = tuple(self.references)
        if not refs:
            raise ValueError(f"pair {self.id!r} has no references")
        object.__setattr__(self, "references", refs)


@dataclass(frozen=True)
class MetricReport:
    """Scores plus the knobs that produced them; None marks undefined."""

    scores: Mapping[str, float | None]
    pair_count: int
    scale_0_100: bool = True
    metadata: Mapping[str, object] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "scores": dict(self.scores),
            "pair_count": self.pair_count,
            "scale_0_100": self.scale_0_100,
            "metadata": dict(self.metadata),
        }


def _ngram_counts(tokens: Sequence[str], n: int) -> Counter:
    return Counter(tuple(tokens[i : i + n]) for i in range(len(tokens) - n + 1))


def _pooled_bleu_stats(pairs: Sequence[EvalPair], max_n: int):
    matches = [0] * (max_n + 1)
    totals = [0] * (max_n + 1)
    cand_len = 0
    ref_len = 0
    for pair in pairs:
        cand = tokenize(pair.candidate)
        refs = [tokenize(r) for r in pair.references]
        cand_len += len(cand)
        ref_len += min(
            (len(r) for r in refs), key=lambda rl: (abs(rl - len(cand)), rl)
        )
        for n in range(1, max_n + 1):
            counts = _ngram_counts(cand, n)
            if not counts:
                continue
            ceiling: Counter = Counter()
            for ref in refs:
                for gram, c in _ngram_counts(ref, n).items():
                    if c > ceiling[gram]:
                        ceiling[gram] = c
            matches[n] += sum(min(c, ceiling[gram]) for gram, c in counts.items())
            totals[n] += sum(counts.values())
    return matches, totals, cand_len, ref_len


def _bleu_from_stats(matches, totals, cand_len, ref_len, max_n, eps) -> float:
    if cand_len == 0:
        return 0.0
    product = 1.0
    for n in range(1, max_n + 1):
        p = matches[n] / totals[n] if totals[n] > 0 else 0.0
        if p == 0.0:
            p = eps
        product *= p
    geo = product ** (1.0 / max_n)
    bp = 1.0 if cand_len > ref_len else math.exp(1.0 - ref_len / cand_len)
    return 100.0 * geo * bp


def bleu(
    pairs: Sequence[EvalPair], max_n: int = 4, smoothing_eps: float = BLEU_SMOOTHING_EPS
) -> float:
    """Corpus BLEU-``max_n``."""
    if not pairs:
        raise ValueError("BLEU needs at least one pair")
    if not 1 <= max_n <= 4:
        raise ValueError("max_n must be in 1..4")
    matches, totals, cand_len, ref_len = _pooled_bleu_stats(pairs, max_n)
    return _bleu_from_stats(matches, totals, cand_len, ref_len, max_n, smoothing_eps)


def bleu_all(
    pairs: Sequence[EvalPair], smoothing_eps: float = BLEU_SMOOTHING_EPS
) -> dict[str, float]:
    """BLEU-1 through BLEU-4 from one pass over the corpus."""
    if not pairs:
        raise ValueError("BLEU needs at least one pair")
    matches, totals, cand_len, ref_len = _pooled_bleu_stats(pairs, 4)
    return {
        f"BLEU{n}": _bleu_from_stats(matches, totals, cand_len, ref_len, n, smoothing_eps)
        for n in range(1, 5)
    }


def _lcs_length(a: Sequence[str], b: Sequence[str]) -> int:
    # standard two-row DP table
    prev = [0] * (len(b) + 1)
    for i in range(1, len(a) + 1):
        cur = [0] * (len(b) + 1)
        ai = a[i - 1]
        for j in range(1, len(b) + 1):
            if ai == b[j - 1]:
                cur[j] = prev[j - 1] + 1
            else:
                cur[j] = cur[j - 1] if cur[j - 1] >= prev[j] else prev[j]
        prev = cur
    return prev[len(b)]


def rouge_l(pairs: Sequence[EvalPair], beta: float = ROUGE_BETA) -> float:
    """Mean best-reference LCS F-measure, recall-weighted by beta^2."""
    if not pairs:
        raise ValueError("ROUGE-L needs at least one pair")
    b2 = beta * beta
    total = 0.0
    for pair in pairs:
        cand = tokenize(pair.candidate)
        best = 0.0
        for ref_text in pair.references:
            ref = tokenize(ref_text)
            if not cand or not ref:
                continue
            lcs = _lcs_length(cand, ref)
            if lcs == 0:
                continue
            prec = lcs / len(cand)
            rec = lcs / len(ref)
            score = ((1.0 + b2) * prec * rec) / (rec + b2 * prec)
            if score > best:
                best = score
        total += best
    return 100.0 * total / len(pairs)


def _tfidf_vector(tokens: Sequence[str], n: int, idf: Mapping) -> dict:
    counts = _ngram_counts(tokens, n)
    return {gram: c * idf[gram] for gram, c in counts.items()}


def _sparse_cosine(u: dict, v: dict) -> float:
    dot = 0.0
    for gram, w in u.items():
        other = v.get(gram)
        if other is not None:
            dot += w * other
    ns_u = 0.0
    for w in u.values():
        ns_u += w * w
    ns_v = 0.0
    for w in v.values():
        ns_v += w * w
    denom = math.sqrt(ns_u * ns_v)
    return dot / denom if denom > 0.0 else 0.0


def cider(pairs: Sequence[EvalPair], max_n: int = CIDER_MAX_N) -> float:
    """Plain CIDEr; the reported value is 100x the raw mean cosine."""
    if len(pairs) < 2:
        raise ValueError(
            "CIDEr needs at least 2 evaluation pairs; document frequencies "
            "degenerate on a single reference document"
        )
    n_docs = len(pairs)
    ref_tokens = [
        [tokenize(r) for r in pair.references] for pair in pairs
    ]

    class _Idf(dict):
        def __missing__(self, gram):
            return math.log(n_docs)  # unseen in references: df clamps to 1

    idfs: list[_Idf] = []
    for n in range(1, max_n + 1):
        df: Counter = Counter()
        for refs in ref_tokens:
            seen: set = set()
            for ref in refs:
                seen.update(_ngram_counts(ref, n).keys())
            df.update(seen)
        idf = _Idf()
        for gram, d in df.items():
            idf[gram] = math.log(n_docs / d)
        idfs.append(idf)

    total = 0.0
    for pair, refs in zip(pairs, ref_tokens):
        cand = tokenize(pair.candidate)
        per_n = 0.0
        for n in range(1, max_n + 1):
            idf = idfs[n - 1]
            cand_vec = _tfidf_vector(cand, n, idf)
            acc = 0.0
            for ref in refs:
                acc += _sparse_cosine(cand_vec, _tfidf_vector(ref, n, idf))
            per_n += acc / len(refs)
        total += per_n / max_n
    return 100.0 * total / n_docs


def _default_normalizer(text: str) -> str:
    return text.strip().lower()


def accuracy(
    preds: Sequence[str],
    gts: Sequence[str],
    normalizer: Callable[[str], str] | None = None,
) -> float:
    """Exact-match percentage after normalization (default: trim+lowercase)."""
    if len(preds) != len(gts):
        raise ValueError("accuracy needs equal-length prediction and GT lists")
    if not preds:
        raise ValueError("accuracy is undefined on empty lists")
    norm = normalizer if normalizer is not None else _default_normalizer
    hits = sum(1 for p, g in zip(preds, gts) if norm(p) == norm(g))
    return 100.0 * hits / len(preds)


def mae(preds: Sequence[float], gts: Sequence[float]) -> float:
    """Mean absolute error over aligned numeric answers."""
    if len(preds) != len(gts):
        raise ValueError("mae needs equal-length lists")
    if not preds:
        raise ValueError("mae is undefined on empty lists")
    total = 0.0
    for p, g in zip(preds, gts):
        p = float(p)
        g = float(g)
        if not (math.isfinite(p) and math.isfinite(g)):
            raise ValueError("mae inputs must be finite")
        total += abs(p - g)
    return total / len(preds)


def _match_any_reference(pair: EvalPair) -> bool:
    cand = _default_normalizer(pair.candidate)
    return any(cand == _default_normalizer(r) for r in pair.references)


def compute_caption_report(
    pairs: Sequence[EvalPair], smoothing_eps: float = BLEU_SMOOTHING_EPS
) -> MetricReport:
    """Full caption-style report: BLEU1-4, CIDEr, ROUGE_L, exact-match ACC.

    CIDEr is reported as None when the corpus is too small for IDF. When
    pairs carry task tags, per-tag sub-reports land in the metadata.
    """
    if not pairs:
        raise ValueError("cannot evaluate an empty corpus")
    scores: dict[str, float | None] = dict(bleu_all(pairs, smoothing_eps))
    try:
        scores["CIDEr"] = cider(pairs)
        cider_note = None
    except ValueError as err:
        scores["CIDEr"] = None
        cider_note = str(err)
    scores["ROUGE_L"] = rouge_l(pairs)
    scores["ACC"] = 100.0 * sum(
        1 for p in pairs if _match_any_reference(p)
    ) / len(pairs)

    metadata: dict[str, object] = {
        "bleu_smoothing_eps": smoothing_eps,
        "rouge_beta": ROUGE_BETA,
        "cider_scale": "100x raw mean TF-IDF cosine",
    }
    if cider_note:
        metadata["cider_note"] = cider_note

    tags = sorted({p.task_tag for p in pairs if p.task_tag is not None})
    if tags:
        per_task: dict[str, dict] = {}
        for tag in tags:
            sub = [p for p in pairs if p.task_tag == tag]
            sub_scores: dict[str, float | None] = dict(bleu_all(sub, smoothing_eps))
            try:
                sub_scores["CIDEr"] = cider(sub)
            except ValueError:
                sub_scores["CIDEr"] = None
            sub_scores["ROUGE_L"] = rouge_l(sub)
            sub_scores["ACC"] = 100.0 * sum(
                1 for p in sub if _match_any_reference(p)
            ) / len(sub)
            per_task[tag] = {"scores": sub_scores, "pair_count": len(sub)}
        metadata["per_task"] = per_task

    return MetricReport(scores=scores, pair_count=len(pairs), metadata=metadata)
