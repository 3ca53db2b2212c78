import dataclasses
import math

import numpy as np
import pytest
import torch

from i2b_lpo.grpo import (
    Trainer,
    TrainConfig,
    clipped_surrogate,
    group_advantages,
    resolve_mode,
    run_training,
    surrogate_terms,
    train_step,
)
from i2b_lpo.model import Policy
from i2b_lpo.numerics import ContractError, finite_difference_check
from i2b_lpo.tasks import generate_problems

TOY = dict(d_model=16, n_layers=2, n_heads=2, max_seq_len=40, max_new=16, d_z=4, d_enc=8, max_operand=9,
           difficulties="1", train_pool=8, filter_data=False, sft_steps=0, batch_prompts=2, M=2, K=3, N=4)


def toy_cfg(**kw):
    return TrainConfig(**{**TOY, **kw})


def test_group_advantage_examples():
    assert group_advantages([1, 1, 1, 1]).tolist() == [0, 0, 0, 0]
    a = group_advantages([1, 0])
    assert abs(a[0] - 1) < 1e-6 and abs(a[1] + 1) < 1e-6
    assert np.allclose(group_advantages([1, 0, 0, 1]), [1, -1, -1, 1], atol=1e-6)
    with pytest.raises(ContractError):
        group_advantages([1])


def test_group_advantages_are_centered():
    rng = np.random.default_rng(0)
    for _ in range(100):
        r = rng.integers(0, 2, size=rng.integers(2, 33))
        assert abs(group_advantages(r).mean()) < 1e-9


def test_surrogate_term_examples():
    assert abs(surrogate_terms(2.0, 1.0) - 1.28) < 1e-12
    assert abs(surrogate_terms(0.5, -1.0) + 0.8) < 1e-12
    assert surrogate_terms(1.0, 0.7) == 0.7


def test_surrogate_on_policy_is_minus_mean_advantage():
    lp = torch.tensor([-0.3, -1.2, -2.0], dtype=torch.float64)
    adv = torch.tensor([0.5, -1.0, 2.0], dtype=torch.float64)
    assert abs(float(clipped_surrogate(lp, lp, adv)) + float(adv.mean())) < 1e-15


def test_surrogate_matches_termwise_formula():
    old = torch.zeros(2, dtype=torch.float64)
    new = torch.tensor([math.log(2.0), math.log(0.5)], dtype=torch.float64)
    adv = torch.tensor([1.0, -1.0], dtype=torch.float64)
    assert abs(float(clipped_surrogate(new, old, adv)) - (-(1.28 - 0.8) / 2)) < 1e-12


def test_surrogate_shape_mismatch():
    with pytest.raises(ContractError):
        clipped_surrogate(torch.zeros(3), torch.zeros(2), torch.zeros(3))


def test_surrogate_gradient_matches_fd():
    rng = np.random.default_rng(3)
    old = rng.normal(size=6)
    adv = rng.normal(size=6)
    # keep every ratio away from the clip kinks
    x = old + rng.choice([-0.6, -0.05, 0.05, 0.5], size=6)
    assert finite_difference_check(lambda t: clipped_surrogate(t, old, adv), x) < 1e-4


def test_mode_plans():
    assert resolve_mode(toy_cfg(mode="grpo_only")).K == 0
    assert resolve_mode(toy_cfg(mode="grpo_only")).gamma_ib == 0
    assert resolve_mode(toy_cfg(mode="i2b_no_branch")).K == 0
    assert resolve_mode(toy_cfg(mode="i2b_no_ib")).N is None
    assert resolve_mode(toy_cfg(mode="fusion_logit")).injection_mode == "logit_fusion"
    assert resolve_mode(toy_cfg(mode="entropy_reg", entropy_coef=0.1)).entropy_coef == 0.1
    with pytest.raises(ContractError):
        resolve_mode(toy_cfg(N=9))
    with pytest.raises(ContractError):
        toy_cfg(mode="ppo")


def _run(cfg, iters=3):
    res = run_training(dataclasses.replace(cfg, iterations=iters))
    return res


def test_loss_decomposes_into_surrogate_and_ib():
    res = _run(toy_cfg(gamma_ib=0.5), iters=4)
    for r in res.reports:
        assert r.loss == r.surrogate - 0.5 * r.ib_term


def test_entropy_bonus_enters_loss():
    res = _run(toy_cfg(mode="entropy_reg", entropy_coef=0.2), iters=2)
    for r in res.reports:
        assert abs(r.loss - (r.surrogate - 0.2 * r.entropy_term)) < 1e-15


def test_i2b_without_branches_matches_no_branch_mode():
    a = _run(toy_cfg(mode="i2b", K=0))
    b = _run(toy_cfg(mode="i2b_no_branch"))
    for p, q in zip(a.policy.parameters(), b.policy.parameters()):
        assert torch.equal(p, q)


def test_i2b_k0_gamma0_is_grpo():
    a = _run(toy_cfg(mode="i2b", K=0, gamma_ib=0.0), iters=4)
    b = _run(toy_cfg(mode="grpo_only"), iters=4)
    for p, q in zip(a.policy.parameters(), b.policy.parameters()):
        assert torch.equal(p, q)
    assert [r.loss for r in a.reports] == [r.loss for r in b.reports]


def test_runs_are_deterministic():
    a = _run(toy_cfg(), iters=3)
    b = _run(toy_cfg(), iters=3)
    assert [r.csv_row()[:-1] for r in a.reports] == [r.csv_row()[:-1] for r in b.reports]


def test_retained_groups_have_centered_advantages():
    cfg = toy_cfg()
    pol = Policy(cfg.model_config(), seed=0)
    rng = np.random.default_rng(0)
    tr = Trainer(cfg, pol, rng=rng)
    probs = generate_problems(2, rng, (1,), 9)
    for _ in range(3):
        tr.step(probs)
        for s in tr.last_sets:
            assert len(s) == cfg.M * (cfg.K + 1) and len(s.pruned) == cfg.N
            adv = [t.advantage for t in s.pruned]
            assert abs(np.mean(adv)) < 1e-9


def test_zero_reward_batch_proceeds(monkeypatch):
    import i2b_lpo.grpo as g

    monkeypatch.setattr(g, "verify", lambda p, toks, tid=0: type("R", (), {"reward": 0})())
    cfg = toy_cfg()
    pol = Policy(cfg.model_config(), seed=0)
    rng = np.random.default_rng(0)
    before = [p.detach().clone() for p in pol.backbone_parameters()]
    rep = train_step(generate_problems(2, rng, (1,), 9), pol, None, cfg, rng)
    assert rep.mean_reward == 0 and rep.loss == 0 and rep.grad_norm == 0
    # zero advantages leave the backbone where it was; only the CVAE pathway moves
    assert all(torch.equal(a, b) for a, b in zip(before, pol.backbone_parameters()))


def test_gradient_norm_finite_throughout():
    res = _run(toy_cfg(iterations=0), iters=20)
    assert all(math.isfinite(r.grad_norm) and math.isfinite(r.loss) for r in res.reports)


def test_report_columns():
    res = _run(toy_cfg(), iters=1)
    row = res.reports[0].csv_row()
    assert len(row) == 9 and row[0] == "1"


def test_token_budget_stops_training():
    full = _run(toy_cfg(), iters=6)
    used = sum(r.sampled_tokens for r in full.reports[:3])
    res = run_training(toy_cfg(iterations=6, token_budget=used))
    assert len(res.reports) == 3
    assert [r.loss for r in res.reports] == [r.loss for r in full.reports[:3]]
