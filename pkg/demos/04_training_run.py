"""
A short training run in every mode
==================================

Run a few iterations of each training mode on the smoke preset and print the
per-iteration report: reward, pass@1, entropy, response length, loss.
"""

import dataclasses
from pathlib import Path

from i2b_lpo.cli import load_config
from i2b_lpo.grpo import run_training

cfg = load_config(str(Path(__file__).resolve().parents[1] / "configs" / "smoke.conf"), sft_steps=100)

for mode in ("grpo_only", "entropy_reg", "i2b_no_branch", "i2b_no_ib", "i2b"):
    res = run_training(dataclasses.replace(cfg, mode=mode, iterations=4))
    print(mode)
    for r in res.reports:
        print(f"  it {r.iteration}  reward {r.mean_reward:.3f}  pass1 {r.pass1:.3f}  H {r.mean_entropy:.3f}"
              f"  len {r.mean_len:5.1f}  loss {r.loss:+.4f}  tokens {r.sampled_tokens}")
