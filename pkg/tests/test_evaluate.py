import numpy as np
import pytest

from i2b_lpo.evaluate import PROMPT_COLUMNS, evaluate, write_prompt_rows, write_report
from i2b_lpo.model import ModelConfig, Policy
from i2b_lpo.numerics import ContractError
from i2b_lpo.tasks import generate_problems


@pytest.fixture(scope="module")
def setup():
    pol = Policy(ModelConfig(d_model=16, n_layers=2, n_heads=2, max_seq_len=40, d_z=4), seed=0)
    probs = generate_problems(5, np.random.default_rng(0), (1, 2), 9)
    return pol, probs


def test_report_ranges(setup):
    pol, probs = setup
    rep, rows = evaluate(pol, probs, 4, [1, 2, 4], np.random.default_rng(0), max_new=16)
    assert len(rows) == 5
    for k in (1, 2, 4):
        assert 0 <= rep.pass_at[k] <= 1
    assert rep.pass_at[1] <= rep.pass_at[2] <= rep.pass_at[4]
    assert rep.perplexity >= 1 and 0 <= rep.repetition_4gram <= 1
    assert 0 <= rep.self_bleu_diversity <= 1 and rep.mean_length > 0
    assert rep.pass_at[1] == np.mean([r.correct / r.n for r in rows])


def test_same_seed_same_report(setup):
    pol, probs = setup
    a, _ = evaluate(pol, probs, 3, [1], np.random.default_rng(7), max_new=16)
    b, _ = evaluate(pol, probs, 3, [1], np.random.default_rng(7), max_new=16)
    assert a == b


def test_k_above_n(setup):
    pol, probs = setup
    with pytest.raises(ContractError):
        evaluate(pol, probs, 2, [3], np.random.default_rng(0))


def test_csv_writers(setup, tmp_path):
    pol, probs = setup
    rep, rows = evaluate(pol, probs, 2, [1], np.random.default_rng(0), max_new=16)
    write_report(rep, tmp_path / "e.csv")
    write_prompt_rows(rows, tmp_path / "p.csv")
    e = (tmp_path / "e.csv").read_text().splitlines()
    assert e[0] == "metric,value" and e[1].startswith("pass@1,")
    p = (tmp_path / "p.csv").read_text().splitlines()
    assert p[0] == ",".join(PROMPT_COLUMNS) and len(p) == 6
