"""
Evaluation metrics and per-head difficulty probes
=================================================

Score a warm-started policy on held-out problems, then ask which attention
heads of its last layer separate easy from hard prompts.
"""

import numpy as np

from i2b_lpo.evaluate import evaluate
from i2b_lpo.grpo import supervised_warmup
from i2b_lpo.head_probe import differentiation_scores
from i2b_lpo.metrics import distinct_n, pass_at_k_single, self_bleu_diversity
from i2b_lpo.model import ModelConfig, Policy
from i2b_lpo.tasks import generate_problems

# the estimators on their own
print("pass@2 with 1 of 4 correct:", pass_at_k_single(4, 1, 2))
print("distinct-2 of 'a b a b':", distinct_n(["a b a b"], 2))
print("self-BLEU diversity of disjoint texts:", self_bleu_diversity(["a b c d", "e f g h"]))

rng = np.random.default_rng(0)
policy = Policy(ModelConfig(d_model=16, n_layers=2, n_heads=4, max_seq_len=48, d_z=4), seed=0)
supervised_warmup(policy, rng, steps=200, batch=16, lr=3e-3, difficulties=(1, 2, 3), max_operand=9)

report, _ = evaluate(policy, generate_problems(30, rng, (1, 2, 3), 9), 8, [1, 4, 8], rng, max_new=24)
for name, value in report.rows():
    print(f"{name:20s} {value:.4f}")

easy = generate_problems(64, rng, (1, 2), 9)
hard = generate_problems(64, rng, (6, 7, 8, 9), 9)
probe_easy = generate_problems(64, rng, (1, 2), 9)
probe_hard = generate_problems(64, rng, (6, 7, 8, 9), 9)
for row in differentiation_scores(policy, hard, easy, probe_hard=probe_hard, probe_easy=probe_easy,
                                  n_boot=100, rng=rng):
    print(f"layer {row.layer} head {row.head}: delta {row.delta:+.4f} (se {row.se:.4f})")
