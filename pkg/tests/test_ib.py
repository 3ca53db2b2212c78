import itertools
import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from i2b_lpo.ib import (
    SequencingError,
    ib_objective,
    ib_objective_from_entropies,
    ib_score,
    prune,
)
from i2b_lpo.model import ModelConfig, Policy
from i2b_lpo.numerics import ContractError, module_gradcheck
from i2b_lpo.records import Trajectory
from i2b_lpo.rollout import sample_many, token_stats
from i2b_lpo.tokens import encode


def make(tid, adv, entropies, reward=0.0):
    h = np.asarray(entropies, dtype=float)
    return Trajectory(tid, 0, [1], [2] * len(h), np.zeros(len(h)), h, reward=reward, advantage=adv)


def test_score_examples():
    assert ib_score(make(1, 0.0, [0.3, 0.9])).value == 0.0
    assert abs(ib_score(make(1, 1.0, [math.log(2)] * 5)).value - math.log(2)) < 1e-15
    s = ib_score(make(1, -1.0, [0.2, 0.7, 1.1]))
    assert s.value <= 0 and abs(s.value + np.mean([0.2, 0.7, 1.1])) < 1e-15


def test_score_terms_and_sum_switch():
    s = ib_score(make(3, 0.5, [1.0, 2.0, 3.0]))
    assert s.terms.tolist() == [0.5, 1.0, 1.5]
    assert abs(s.value - s.terms.mean()) < 1e-12 and s.trajectory_id == 3
    assert ib_score(make(3, 0.5, [1.0, 2.0, 3.0]), "sum").value == 3.0


def test_score_needs_advantage():
    t = make(1, None, [1.0])
    with pytest.raises(SequencingError):
        ib_score(t)


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(0.01, 3.0), min_size=1, max_size=20), st.floats(-3, 3), st.floats(0.01, 2))
def test_score_strictly_increasing_in_advantage(h, a, d):
    assert ib_score(make(1, a + d, h)).value > ib_score(make(1, a, h)).value


def test_prune_examples():
    pool = [make(1, 1.0, [3.0]), make(2, 1.0, [1.0]), make(3, 1.0, [2.0])]
    assert [t.id for t in prune(pool, 2)] == [1, 3]
    assert prune(pool, 3) == pool
    with pytest.raises(ContractError):
        prune(pool, 4)


def test_prune_tie_rule():
    pool = [make(5, 1.0, [1.0], reward=0.0), make(4, 1.0, [1.0], reward=1.0), make(2, 1.0, [1.0], reward=0.0)]
    assert [t.id for t in prune(pool, 2)] == [4, 2]


def test_prune_32_to_8():
    rng = np.random.default_rng(0)
    pool = [make(i, rng.normal(), rng.uniform(0, 2, 10)) for i in range(32)]
    assert len(prune(pool, 8)) == 8


@settings(max_examples=150, deadline=None)
@given(st.integers(1, 12), st.integers(0, 2**31 - 1))
def test_prune_matches_exhaustive_search(n, seed):
    rng = np.random.default_rng(seed)
    pool = [make(i, float(rng.normal()), rng.uniform(0, 2, rng.integers(1, 8)), float(rng.integers(0, 2))) for i in range(n)]
    N = int(rng.integers(1, n + 1))
    scores = {t.id: ib_score(t).value for t in pool}
    best = max(sum(scores[t.id] for t in sub) for sub in itertools.combinations(pool, N))
    assert sum(scores[t.id] for t in prune(pool, N)) == best


def test_objective_examples():
    hs = [torch.tensor([0.3, 0.5], dtype=torch.float64, requires_grad=True)]
    out = ib_objective_from_entropies(hs, [0.0])
    out.backward()
    assert float(out.detach()) == 0.0 and hs[0].grad.abs().max() == 0
    with pytest.raises(ContractError):
        ib_objective_from_entropies([], [])


def test_single_positive_trajectory_gradient_is_entropy_gradient():
    pol = Policy(ModelConfig(d_model=8, n_layers=2, n_heads=2, max_seq_len=24, d_z=4), seed=0)
    tr = sample_many(pol, [encode("4+4=")], np.random.default_rng(0), 8)[0]
    tr.advantage = 1.0
    w = pol.head
    g1 = torch.autograd.grad(ib_objective(pol, [tr]), w)[0]
    _, hs = token_stats(pol, [tr])
    g2 = torch.autograd.grad(hs[0].mean(), w)[0]
    assert torch.allclose(g1, g2, atol=1e-14, rtol=0)


def test_objective_gradient_matches_fd():
    pol = Policy(ModelConfig(d_model=8, n_layers=2, n_heads=2, max_seq_len=24, d_z=4), seed=1)
    trs = sample_many(pol, [encode("2*3="), encode("9-1=")], np.random.default_rng(0), 8)
    for t, a in zip(trs, (0.8, -1.2)):
        t.advantage = a
    params = dict(pol.named_parameters())
    errs = module_gradcheck(lambda: ib_objective(pol, trs), params, max_coords=5)
    assert max(errs.values()) < 1e-4


def test_objective_requires_advantages():
    pol = Policy(ModelConfig(d_model=8, n_layers=2, n_heads=2, max_seq_len=24, d_z=4), seed=1)
    tr = sample_many(pol, [encode("2*3=")], np.random.default_rng(0), 4)[0]
    with pytest.raises(SequencingError):
        ib_objective(pol, [tr])
    with pytest.raises(ContractError):
        ib_objective(pol, [])


def test_clamped_terms_within_entropy_bound():
    rng = np.random.default_rng(2)
    for i in range(200):
        h = rng.uniform(0, math.log(16), 50)
        a = float(np.clip(rng.normal(scale=2), -1, 1))
        s = ib_score(make(i, a, h))
        assert np.all(np.abs(s.terms) <= h)
