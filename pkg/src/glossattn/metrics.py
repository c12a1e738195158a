"""Translation metrics (BLEU, ROUGE-L) and representation diagnostics (ASD, CAD)."""

from __future__ import annotations

import math
from collections import Counter
from typing import Sequence

import numpy as np

from .attention import AttentionMap
from .data import SimilarityMatrix


def _tokens(s) -> list[str]:
    return s.split() if isinstance(s, str) else list(s)


def _ngrams(tokens: Sequence[str], n: int) -> Counter:
    return Counter(tuple(tokens[i : i + n]) for i in range(len(tokens) - n + 1))


def bleu(hypotheses: Sequence, references: Sequence, n_max: int = 4) -> list[float]:
    """Corpus BLEU-1..BLEU-n_max on [0, 1], uniform weights, no smoothing.

    Each hypothesis has a single reference.  Hypotheses and references may be
    strings (whitespace-split) or token lists.
    """
    if len(hypotheses) != len(references):
        raise ValueError(f"{len(hypotheses)} hypotheses vs {len(references)} references")
    if not hypotheses:
        raise ValueError("bleu: empty corpus")
    matches = np.zeros(n_max)
    totals = np.zeros(n_max)
    hyp_len = ref_len = 0
    for hyp, ref in zip(hypotheses, references):
        h, r = _tokens(hyp), _tokens(ref)
        hyp_len += len(h)
        ref_len += len(r)
        for n in range(1, n_max + 1):
            hc, rc = _ngrams(h, n), _ngrams(r, n)
            matches[n - 1] += sum(min(c, rc[g]) for g, c in hc.items())
            totals[n - 1] += max(len(h) - n + 1, 0)
    if hyp_len == 0:
        return [0.0] * n_max
    bp = 1.0 if hyp_len > ref_len else math.exp(1.0 - ref_len / hyp_len)
    scores = []
    log_sum = 0.0
    for n in range(n_max):
        if matches[n] == 0 or not math.isfinite(log_sum):
            log_sum = -math.inf
            scores.append(0.0)
            continue
        log_sum += math.log(matches[n] / totals[n])
        scores.append(bp * math.exp(log_sum / (n + 1)))
    return scores


def lcs_length(a: Sequence, b: Sequence) -> int:
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0]
        for j, y in enumerate(b):
            cur.append(prev[j] + 1 if x == y else max(prev[j + 1], cur[j]))
        prev = cur
    return prev[-1]


def rouge_l(hypothesis, reference, beta: float = 1.2) -> float:
    """LCS F-score, ``(1 + b^2) P R / (R + b^2 P)``."""
    h, r = _tokens(hypothesis), _tokens(reference)
    if not r:
        raise ValueError("rouge_l: empty reference")
    if not h:
        return 0.0
    lcs = lcs_length(h, r)
    p, rec = lcs / len(h), lcs / len(r)
    if p == 0 or rec == 0:
        return 0.0
    return (1 + beta**2) * p * rec / (rec + beta**2 * p)


def corpus_rouge_l(hypotheses: Sequence, references: Sequence, beta: float = 1.2) -> float:
    if len(hypotheses) != len(references) or not hypotheses:
        raise ValueError("corpus_rouge_l: need equal, non-zero counts")
    return float(np.mean([rouge_l(h, r, beta) for h, r in zip(hypotheses, references)]))


def embedding_similarity(embeddings, ids: Sequence[str] | None = None) -> SimilarityMatrix:
    E = np.asarray(embeddings, dtype=np.float64)
    norms = np.linalg.norm(E, axis=1, keepdims=True)
    if np.any(norms == 0):
        raise ValueError("embedding_similarity: zero-norm row")
    unit = E / norms
    S = np.clip(unit @ unit.T, -1.0, 1.0)
    S = 0.5 * (S + S.T)
    np.fill_diagonal(S, 1.0)
    return SimilarityMatrix(list(ids) if ids is not None else [str(i) for i in range(len(E))], S)


def asd(s_hat, s) -> float:
    """Mean absolute off-diagonal gap between two similarity matrices."""
    a = s_hat.values if isinstance(s_hat, SimilarityMatrix) else np.asarray(s_hat, dtype=np.float64)
    b = s.values if isinstance(s, SimilarityMatrix) else np.asarray(s, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ValueError(f"asd: matrices {a.shape} and {b.shape} do not match")
    n = a.shape[0]
    if n < 2:
        raise ValueError("asd: need n >= 2")
    off = ~np.eye(n, dtype=bool)
    return float(np.abs(a - b)[off].sum() / (n * n - n))


def cad(attention, delta: float = 0.1) -> float:
    """Cumulative attention diagonality.

    Attention mass within ``delta * K`` of the rescaled diagonal
    ``r(t) = t (K - 1) / (T_q - 1)``, averaged over query rows.  Gloss
    attention maps are first spread onto their frame grid
    (:meth:`AttentionMap.dense`).
    """
    w = attention.dense() if isinstance(attention, AttentionMap) else np.asarray(attention, dtype=np.float64)
    if not 0.0 < delta <= 1.0:
        raise ValueError(f"delta must be in (0, 1], got {delta}")
    Tq, K = w.shape
    if Tq == 0 or K == 0:
        raise ValueError("cad: empty attention map")
    if Tq == K:
        centre = np.arange(Tq, dtype=np.float64)
    elif Tq == 1:
        centre = np.zeros(1)
    else:
        centre = np.arange(Tq) * (K - 1) / (Tq - 1)
    dist = np.abs(np.arange(K)[None, :] - centre[:, None])
    band = dist <= delta * K + 1e-9
    return float(np.clip((w * band).sum() / Tq, 0.0, 1.0))


def mean_cad(maps: Sequence[AttentionMap], delta: float = 0.1) -> dict[int, float]:
    """Per-layer mean CAD over every (sample, head) map of that layer."""
    per_layer: dict[int, list[float]] = {}
    for m in maps:
        per_layer.setdefault(m.layer, []).append(cad(m, delta))
    return {layer: float(np.mean(v)) for layer, v in sorted(per_layer.items())}
