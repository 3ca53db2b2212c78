"""Accuracy and diversity metrics: pass@k, distinct-n, self-BLEU, perplexity, repetition."""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .numerics import ContractError


def _tokens(text) -> list:
    return text.split() if isinstance(text, str) else list(text)


def _ngrams(tokens: Sequence, n: int) -> list[tuple]:
    return [tuple(tokens[i : i + n]) for i in range(len(tokens) - n + 1)]


def pass_at_k_single(n: int, c: int, k: int) -> float:
    """Unbiased estimate 1 - C(n-c, k) / C(n, k)."""
    if k > n:
        raise ContractError(f"k={k} exceeds n={n}")
    if n - c < k:
        return 1.0
    return 1.0 - math.comb(n - c, k) / math.comb(n, k)


def pass_at_k(flags: Sequence[Sequence[int]], k: int) -> float:
    """Mean unbiased pass@k over prompts; ``flags[p]`` are 0/1 per sample."""
    vals = [pass_at_k_single(len(f), int(sum(f)), k) for f in flags]
    return float(np.mean(vals)) if vals else 0.0


def distinct_n(texts: Iterable, n: int) -> float:
    """Unique n-grams over total n-grams, pooled across ``texts``."""
    if n < 1:
        raise ContractError("n must be at least 1")
    grams = [g for t in texts for g in _ngrams(_tokens(t), n)]
    return len(set(grams)) / len(grams) if grams else 0.0


def ngram_repetition(text, n: int = 4) -> float:
    grams = _ngrams(_tokens(text), n)
    if not grams:
        return 0.0
    return 1.0 - len(set(grams)) / len(grams)


def bleu(hypothesis, references: Sequence, max_n: int = 4) -> float:
    """Sentence BLEU with uniform weights and the closest-length brevity penalty.

    A zero unigram precision makes the score 0.  A zero precision at a higher
    order is replaced by ``1 / (total + 1)`` (add-one on the empty count).
    """
    hyp = _tokens(hypothesis)
    refs = [_tokens(r) for r in references]
    if not hyp:
        return 0.0
    log_p = 0.0
    for n in range(1, max_n + 1):
        counts = Counter(_ngrams(hyp, n))
        max_ref = Counter()
        for r in refs:
            for g, c in Counter(_ngrams(r, n)).items():
                max_ref[g] = max(max_ref[g], c)
        total = sum(counts.values())
        matched = sum(min(c, max_ref[g]) for g, c in counts.items())
        if matched == 0 and n == 1:
            return 0.0
        p = matched / total if matched > 0 else 1.0 / (total + 1)
        log_p += math.log(p) / max_n
    c = len(hyp)
    r = min((len(x) for x in refs), key=lambda L: (abs(L - c), L))
    bp = 1.0 if c > r else math.exp(1.0 - r / c)
    return bp * math.exp(log_p)


def self_bleu_diversity(texts: Sequence, max_n: int = 4) -> float:
    """1 - mean BLEU of each text against all the others."""
    if len(texts) < 2:
        raise ContractError("self-BLEU needs at least two texts")
    scores = [bleu(t, [o for j, o in enumerate(texts) if j != i], max_n) for i, t in enumerate(texts)]
    return float(min(1.0, max(0.0, 1.0 - np.mean(scores))))


def perplexity(logprobs: Sequence[float]) -> float:
    lp = np.asarray(logprobs, dtype=np.float64)
    if lp.size == 0:
        raise ContractError("perplexity of an empty sequence")
    return float(np.exp(-lp.mean()))


@dataclass
class EvalReport:
    pass_at: dict[int, float] = field(default_factory=dict)
    distinct: dict[int, float] = field(default_factory=dict)
    self_bleu_diversity: float = 0.0
    perplexity: float = 1.0
    repetition_4gram: float = 0.0
    mean_length: float = 0.0
    mean_entropy: float = 0.0

    def rows(self) -> list[tuple[str, float]]:
        out = [(f"pass@{k}", v) for k, v in sorted(self.pass_at.items())]
        out += [(f"distinct_{n}", v) for n, v in sorted(self.distinct.items())]
        out += [
            ("self_bleu_diversity", self.self_bleu_diversity),
            ("perplexity", self.perplexity),
            ("repetition_4gram", self.repetition_4gram),
            ("mean_length", self.mean_length),
            ("mean_entropy", self.mean_entropy),
        ]
        return out
