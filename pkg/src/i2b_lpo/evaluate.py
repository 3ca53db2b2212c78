"""Sampling-based evaluation of a policy on a fixed problem set."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .metrics import (
    EvalReport,
    distinct_n,
    ngram_repetition,
    pass_at_k,
    perplexity,
    self_bleu_diversity,
)
from .model import Policy
from .numerics import ContractError
from .rollout import sample_many
from .tasks import Problem, verify
from .tokens import strip_eos


@dataclass
class PromptRow:
    """Per-prompt summary for the long-form CSV."""

    prompt_id: int
    difficulty: int
    expression: str
    n: int
    correct: int
    distinct_4: float
    self_bleu_diversity: float
    mean_length: float
    mean_entropy: float


PROMPT_COLUMNS = ("prompt_id", "difficulty", "expression", "n", "correct", "distinct_4",
                  "self_bleu_diversity", "mean_length", "mean_entropy")


def evaluate(
    policy: Policy,
    problems: Sequence[Problem],
    n: int,
    ks: Sequence[int],
    rng: np.random.Generator,
    max_new: int = 32,
    temperature: float = 1.0,
) -> tuple[EvalReport, list[PromptRow]]:
    """Draw ``n`` samples per problem and compute accuracy and diversity metrics.

    Lexical metrics work on response token ids with the end marker removed.
    Distinct-n and self-BLEU are computed within each prompt's sample group
    and then averaged over prompts.
    """
    if n < 1 or not problems:
        raise ContractError("need at least one problem and one sample")
    if ks and max(ks) > n:
        raise ContractError(f"k={max(ks)} exceeds n={n}")
    contexts = [p.prompt_tokens for p in problems for _ in range(n)]
    pids = [i for i in range(len(problems)) for _ in range(n)]
    trajs = sample_many(policy, contexts, rng, max_new, temperature, pids)

    flags, rows = [], []
    distinct = {m: [] for m in range(1, 5)}
    sbd, reps, all_lp, lengths, ents = [], [], [], [], []
    for i, prob in enumerate(problems):
        group = trajs[i * n : (i + 1) * n]
        f = [verify(prob, t.tokens, t.id).reward for t in group]
        flags.append(f)
        texts = [strip_eos(t.tokens) for t in group]
        for m in distinct:
            distinct[m].append(distinct_n(texts, m))
        div = self_bleu_diversity(texts) if n >= 2 else 0.0
        sbd.append(div)
        reps.extend(ngram_repetition(x, 4) for x in texts)
        for t in group:
            all_lp.append(t.logprobs)
            lengths.append(t.T)
            ents.append(t.entropies)
        rows.append(PromptRow(
            prompt_id=i,
            difficulty=prob.difficulty,
            expression=prob.expression,
            n=n,
            correct=int(sum(f)),
            distinct_4=distinct[4][-1],
            self_bleu_diversity=div,
            mean_length=float(np.mean([t.T for t in group])),
            mean_entropy=float(np.mean(np.concatenate([t.entropies for t in group]))),
        ))

    report = EvalReport(
        pass_at={k: pass_at_k(flags, k) for k in sorted(set(ks))},
        distinct={m: float(np.mean(v)) for m, v in distinct.items()},
        self_bleu_diversity=float(np.mean(sbd)),
        perplexity=perplexity(np.concatenate(all_lp)),
        repetition_4gram=float(np.mean(reps)),
        mean_length=float(np.mean(lengths)),
        mean_entropy=float(np.mean(np.concatenate(ents))),
    )
    return report, rows


def write_report(report: EvalReport, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["metric", "value"])
        for name, value in report.rows():
            w.writerow([name, repr(float(value))])


def write_prompt_rows(rows: Sequence[PromptRow], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(PROMPT_COLUMNS)
        for r in rows:
            w.writerow([getattr(r, c) if not isinstance(getattr(r, c), float) else repr(getattr(r, c))
                        for c in PROMPT_COLUMNS])
