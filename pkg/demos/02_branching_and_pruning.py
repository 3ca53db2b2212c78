"""
Entropy-triggered branching and IB pruning
==========================================

Sample a few base rollouts, fill an entropy history, branch each base at a
high-entropy step with latent-steered continuations, then keep the top
trajectories by advantage-weighted entropy.
"""

import numpy as np

from i2b_lpo.branching import EntropyHistory, expand_many
from i2b_lpo.cvae import CVAE
from i2b_lpo.grpo import group_advantages, supervised_warmup
from i2b_lpo.ib import ib_score, prune
from i2b_lpo.model import ModelConfig, Policy
from i2b_lpo.rollout import sample_many
from i2b_lpo.tasks import generate_problem, reward
from i2b_lpo.tokens import decode

rng = np.random.default_rng(0)
policy = Policy(ModelConfig(d_model=16, n_layers=2, n_heads=2, max_seq_len=48, d_z=4), seed=0)
# a short supervised warm start so some samples earn reward
supervised_warmup(policy, rng, steps=400, batch=16, lr=3e-3, difficulties=(1,), max_operand=9)
cvae = CVAE.for_policy(policy, d_enc=8, seed=0)
problem = generate_problem(1, rng, max_operand=9)
print("problem:", problem.prompt, "answer", problem.answer)

# warm the entropy history with a batch of plain samples
history = EntropyHistory()
for t in sample_many(policy, [problem.prompt_tokens] * 16, rng, 24):
    history.extend(t.entropies)
print(f"threshold (top 5% of {len(history)} entropies): {history.threshold():.3f}")

# M = 2 bases, K = 3 branches each; redraw until the group has mixed rewards
for attempt in range(50):
    bases = sample_many(policy, [problem.prompt_tokens] * 2, rng, 24)
    (bset,) = expand_many([bases], 3, cvae, policy, rng, history, max_new=24)
    for t in bset.trajectories:
        t.reward = float(reward(problem, t.tokens))
    if 0 < sum(t.reward for t in bset.trajectories) < len(bset):
        break
for t in bset.trajectories:
    where = "base" if not t.is_branch else f"branch of {t.lineage.parent_id} at t*={t.lineage.t_star}"
    print(f"  id {t.id:3d} {where:24s} reward {t.reward:.0f}  {decode(t.tokens)!r}")

# group advantages, IB scores, keep N = 4
adv = group_advantages([t.reward for t in bset.trajectories])
for t, a in zip(bset.trajectories, adv):
    t.advantage = float(a)
kept = prune(bset.trajectories, 4)
print("kept (id, IB score):", [(t.id, round(ib_score(t).value, 4)) for t in kept])
