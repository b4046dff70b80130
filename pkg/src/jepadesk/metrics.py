"""From-scratch consensus caption metric (TF-IDF weighted n-gram cosine,
n = 1..4, scaled by 10) and shared scalar metrics."""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass, field

from .errors import EmptyReferences
from .textdata import normalize_text

MAX_N = 4


def _ngrams(words, n):
    return [tuple(words[i:i + n]) for i in range(len(words) - n + 1)]


@dataclass
class NGramIndex:
    """Per-n document frequencies over a reference corpus of M sets."""

    df: list = field(default_factory=lambda: [Counter() for _ in range(MAX_N)])
    m: int = 0

    def idf(self, n, gram):
        # unseen grams get df = 1 (max idf); avoids division by zero
        return math.log(self.m / max(1, self.df[n - 1][gram]))


def build_ngram_index(reference_sets):
    """One 'document' per reference set; presence counts, not totals."""
    if len(reference_sets) < 1:
        raise EmptyReferences("need at least one reference set")
    idx = NGramIndex(m=len(reference_sets))
    for refs in reference_sets:
        seen = set()
        for ref in refs:
            words = normalize_text(ref)
            for n in range(1, MAX_N + 1):
                seen.update((n, g) for g in _ngrams(words, n))
        for n, g in seen:
            idx.df[n - 1][g] += 1
    return idx


def _tfidf_vector(words, n, idx):
    counts = Counter(_ngrams(words, n))
    return {g: c * idx.idf(n, g) for g, c in counts.items()}


def _cosine(a, b):
    # cosine with the zero vector is defined as 0
    dot = sum(v * b.get(g, 0.0) for g, v in a.items())
    na = math.sqrt(sum(v * v for v in a.values()))
    nb = math.sqrt(sum(v * v for v in b.values()))
    if na == 0.0 or nb == 0.0:
        return 0.0
    return dot / (na * nb)


def cider(candidate, references, idx: NGramIndex):
    """10 x mean over n=1..4 of the mean reference cosine between
    TF-IDF n-gram vectors.  Always in [0, 10]."""
    if len(references) == 0:
        raise EmptyReferences("references must be non-empty")
    cand_words = normalize_text(candidate)
    ref_words = [normalize_text(r) for r in references]
    total = 0.0
    for n in range(1, MAX_N + 1):
        cv = _tfidf_vector(cand_words, n, idx)
        score_n = sum(_cosine(cv, _tfidf_vector(rw, n, idx))
                      for rw in ref_words) / len(ref_words)
        total += score_n
    return 10.0 * total / MAX_N


def topk_accuracy(rankings, golds, k):
    """Fraction of items whose gold index appears in the first k ranked
    indices."""
    if k < 1:
        raise ValueError("k must be >= 1")
    if len(rankings) != len(golds):
        raise ValueError("length mismatch")
    hits = sum(1 for r, g in zip(rankings, golds) if g in r.indices[:k])
    return hits / len(rankings)
