"""Caption metrics (BLEU, CIDEr) and multi-label interaction metrics."""
from __future__ import annotations

import math
from collections import Counter
from dataclasses import asdict, dataclass
from typing import Iterable, Sequence

import numpy as np

SPECIAL_TOKENS = frozenset({0, 1, 2})  # PAD, BOS, EOS
BLEU_EPS = 1e-12
METRIC_NAMES = ("bleu4", "cider", "acc", "map", "recall")


@dataclass
class MetricsReport:
    bleu4: float
    cider: float
    acc: float
    map: float
    recall: float
    split: str
    n_samples: int

    def __post_init__(self) -> None:
        for name in ("bleu4", "acc", "map", "recall"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0 + 1e-12:
                raise ValueError(f"{name}={v} outside [0, 1]")
        if self.cider < 0:
            raise ValueError("cider must be non-negative")

    def to_dict(self) -> dict:
        return asdict(self)


def strip_special(tokens: Iterable, special: frozenset = SPECIAL_TOKENS) -> list:
    return [t for t in tokens if t not in special]


def ngrams(tokens: Sequence, n: int) -> Counter:
    return Counter(tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1))


def modified_precision(candidate: Sequence, reference: Sequence, n: int) -> tuple[int, int]:
    """Clipped n-gram matches and total candidate n-grams for one pair."""
    cand = ngrams(candidate, n)
    ref = ngrams(reference, n)
    clipped = sum(min(c, ref[g]) for g, c in cand.items())
    return clipped, sum(cand.values())


def bleu(candidates: Sequence[Sequence], references: Sequence[Sequence], max_n: int = 4,
         special: frozenset = SPECIAL_TOKENS) -> float:
    """Corpus BLEU with one reference per candidate.

    Orders with no clipped matches get precision ``eps / max(total, 1)``, which
    drives the score to ~0 instead of raising on log(0).
    """
    if len(candidates) == 0:
        raise ValueError("no candidates")
    if len(candidates) != len(references):
        raise ValueError("need exactly one reference per candidate")
    matches = [0] * max_n
    totals = [0] * max_n
    cand_len = ref_len = 0
    for cand, ref in zip(candidates, references):
        c = strip_special(cand, special)
        r = strip_special(ref, special)
        if not c:
            raise ValueError("empty candidate after stripping special tokens")
        cand_len += len(c)
        ref_len += len(r)
        for n in range(1, max_n + 1):
            m, t = modified_precision(c, r, n)
            matches[n - 1] += m
            totals[n - 1] += t
    log_p = 0.0
    for m, t in zip(matches, totals):
        p = m / t if m > 0 else BLEU_EPS / max(t, 1)
        log_p += math.log(p) / max_n
    bp = 1.0 if cand_len > ref_len else math.exp(1.0 - ref_len / cand_len)
    return min(1.0, bp * math.exp(log_p))


def cider(candidates: Sequence[Sequence], references: Sequence[Sequence], max_n: int = 4,
          special: frozenset = SPECIAL_TOKENS) -> float:
    """TF-IDF n-gram cosine similarity, averaged over n = 1..max_n, times 10.

    Document frequencies come from the reference set (one document per
    candidate/reference pair).
    """
    if len(candidates) == 0:
        raise ValueError("no candidates")
    if len(candidates) != len(references):
        raise ValueError("need exactly one reference per candidate")
    cands = [strip_special(c, special) for c in candidates]
    refs = [strip_special(r, special) for r in references]
    n_docs = len(refs)
    log_n = math.log(float(n_docs))
    scores = np.zeros(n_docs)
    for n in range(1, max_n + 1):
        ref_grams = [ngrams(r, n) for r in refs]
        df: Counter = Counter()
        for g in ref_grams:
            df.update(g.keys())

        def tfidf(counts: Counter) -> dict:
            return {g: c * (log_n - math.log(max(1.0, df[g]))) for g, c in counts.items()}

        for i, (cand, rg) in enumerate(zip(cands, ref_grams)):
            vc, vr = tfidf(ngrams(cand, n)), tfidf(rg)
            norm_c = math.sqrt(sum(v * v for v in vc.values()))
            norm_r = math.sqrt(sum(v * v for v in vr.values()))
            if norm_c == 0.0 or norm_r == 0.0:
                continue
            dot = sum(v * vr.get(g, 0.0) for g, v in vc.items())
            scores[i] += dot / (norm_c * norm_r) / max_n
    return float(10.0 * scores.mean())


def average_precision(scores: np.ndarray, labels: np.ndarray) -> float:
    """Mean of precision@k over the ranks k holding a positive (ties keep input order)."""
    order = np.argsort(-scores, kind="stable")
    hits = labels[order] > 0
    n_pos = hits.sum()
    if n_pos == 0:
        raise ValueError("average precision is undefined without positives")
    ranks = np.arange(1, len(hits) + 1)
    precision = np.cumsum(hits) / ranks
    return float(precision[hits].sum() / n_pos)


def interaction_metrics(edge_scores: np.ndarray, edge_labels: np.ndarray,
                        threshold: float = 0.5) -> tuple[float, float, float]:
    """(exact-match accuracy, mAP over classes with positives, micro recall)."""
    scores = np.asarray(edge_scores, dtype=np.float64)
    labels = np.asarray(edge_labels) > 0
    if scores.shape != labels.shape or scores.ndim != 2:
        raise ValueError("scores and labels must both be E x K")
    if scores.shape[0] == 0:
        raise ValueError("no edges to evaluate")
    present = labels.any(axis=0)
    if not present.any():
        raise ValueError("no class has a positive label; mAP is undefined")
    pred = scores >= threshold
    acc = float(np.mean(np.all(pred == labels, axis=1)))
    ap = [average_precision(scores[:, k], labels[:, k]) for k in np.flatnonzero(present)]
    tp = np.sum(pred & labels)
    recall = float(tp / labels.sum())
    return acc, float(np.mean(ap)), recall
