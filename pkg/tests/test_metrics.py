import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from i2b_lpo.metrics import (
    EvalReport,
    bleu,
    distinct_n,
    ngram_repetition,
    pass_at_k,
    pass_at_k_single,
    perplexity,
    self_bleu_diversity,
)
from i2b_lpo.numerics import ContractError


def test_pass_at_k_examples():
    assert all(pass_at_k_single(5, 5, k) == 1.0 for k in range(1, 6))
    assert pass_at_k_single(5, 0, 3) == 0.0
    assert abs(pass_at_k_single(4, 1, 2) - 0.5) < 1e-12
    with pytest.raises(ContractError):
        pass_at_k_single(3, 1, 4)


flag_lists = st.lists(st.lists(st.integers(0, 1), min_size=6, max_size=6), min_size=1, max_size=5)


@settings(max_examples=100, deadline=None)
@given(flag_lists)
def test_pass_at_k_monotone_and_pass1_is_mean(flags):
    vals = [pass_at_k(flags, k) for k in range(1, 7)]
    assert all(b >= a - 1e-15 for a, b in zip(vals, vals[1:]))
    assert abs(vals[0] - np.mean([np.mean(f) for f in flags])) < 1e-12


def test_distinct_examples():
    assert distinct_n(["a b a b"], 1) == 0.5
    assert distinct_n(["a b c d"], 1) == 1.0
    assert abs(distinct_n(["a b a b"], 2) - 2 / 3) < 1e-12
    assert distinct_n([], 2) == 0.0
    assert distinct_n([[1, 2, 1, 2]], 2) == 2 / 3
    with pytest.raises(ContractError):
        distinct_n(["a"], 0)


def test_distinct_pools_across_texts():
    assert distinct_n(["a b", "a b"], 2) == 0.5


@settings(max_examples=100, deadline=None)
@given(st.lists(st.lists(st.integers(0, 4), min_size=1, max_size=12), min_size=1, max_size=4), st.integers(1, 4))
def test_distinct_range(texts, n):
    d = distinct_n(texts, n)
    assert d == 0.0 or 0.0 < d <= 1.0


def test_repetition_examples():
    assert ngram_repetition("a b c d e f", 4) == 0.0
    assert abs(ngram_repetition(" ".join(["x"] * 8), 4) - 0.8) < 1e-12
    assert ngram_repetition("a b", 4) == 0.0
    t = "a b a b a b c"
    assert abs(ngram_repetition(t, 4) - (1 - distinct_n([t], 4))) < 1e-15


def _hand_bleu(hyp, refs):
    """Independent sentence BLEU with add-one smoothing on zero matches."""
    h = hyp.split()
    rs = [r.split() for r in refs]
    logs = 0.0
    for n in range(1, 5):
        grams = [tuple(h[i : i + n]) for i in range(len(h) - n + 1)]
        total = len(grams)
        matched = 0
        for g in set(grams):
            cnt = grams.count(g)
            ref_max = max(sum(1 for i in range(len(r) - n + 1) if tuple(r[i : i + n]) == g) for r in rs)
            matched += min(cnt, ref_max)
        if n == 1 and matched == 0:
            return 0.0
        p = matched / total if matched else 1 / (total + 1)
        logs += math.log(p) / 4
    c = len(h)
    r = sorted((abs(len(x) - c), len(x)) for x in rs)[0][1]
    bp = 1.0 if c > r else math.exp(1 - r / c)
    return bp * math.exp(logs)


TEXTS = ["the cat sat on the mat", "the cat lay on a mat", "a dog sat on the rug today"]


def test_bleu_matches_hand_computation():
    for i, t in enumerate(TEXTS):
        refs = [x for j, x in enumerate(TEXTS) if j != i]
        assert abs(bleu(t, refs) - _hand_bleu(t, refs)) < 1e-12


def test_bleu_first_text_hand_value():
    # unigram 5/6, bigram 3/5, trigram 1/4, 4-gram smoothed 1/(3+1); same length ref -> bp 1
    expected = (5 / 6 * 3 / 5 * 1 / 4 * 1 / 4) ** 0.25
    assert abs(bleu(TEXTS[0], TEXTS[1:]) - expected) < 1e-12


def test_self_bleu_examples():
    assert abs(self_bleu_diversity(["a b c d e"] * 3)) < 1e-9
    assert self_bleu_diversity(["a b c d", "e f g h", "i j k l"]) == 1.0
    expected = 1 - np.mean([_hand_bleu(t, [x for j, x in enumerate(TEXTS) if j != i]) for i, t in enumerate(TEXTS)])
    assert abs(self_bleu_diversity(TEXTS) - expected) < 1e-6
    with pytest.raises(ContractError):
        self_bleu_diversity(["only one"])


def test_perplexity_examples():
    assert abs(perplexity([math.log(0.25)] * 5) - 4.0) < 1e-12
    assert perplexity([0.0, 0.0]) == 1.0
    # exp(-(ln .5 + ln .125) / 2) = exp(2 ln 2)
    assert abs(perplexity([math.log(0.5), math.log(0.125)]) - 4.0) < 1e-12
    assert abs(perplexity([math.log(0.5), math.log(0.25)]) - 2 ** 1.5) < 1e-12
    with pytest.raises(ContractError):
        perplexity([])


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(-20, 0), min_size=1, max_size=30))
def test_perplexity_at_least_one(lps):
    assert perplexity(lps) >= 1.0


def test_report_rows():
    r = EvalReport(pass_at={1: 0.5, 4: 0.75}, distinct={4: 0.9})
    names = [n for n, _ in r.rows()]
    assert names[:3] == ["pass@1", "pass@4", "distinct_4"]
    assert "perplexity" in names and "repetition_4gram" in names
