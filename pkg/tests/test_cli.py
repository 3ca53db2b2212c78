import csv
import json
from pathlib import Path

import numpy as np
import pytest

from i2b_lpo.cli import (
    EXIT_USAGE,
    UsageError,
    cmd_eval,
    cmd_probe_heads,
    cmd_replay,
    cmd_train,
    format_config,
    load_config,
    main,
    parse_config,
)
from i2b_lpo.grpo import TrainConfig
from i2b_lpo.model import ModelConfig, Policy, save_policy
from i2b_lpo.tasks import dump_problems, generate_problems

SMOKE = str(Path(__file__).resolve().parents[1] / "configs" / "smoke.conf")


def read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.reader(fh))


def test_parse_config_types_and_comments():
    kw = parse_config("# comment\nlr = 0.5\nK = 3  # trailing\n\nfilter_data = off\ndifficulties = 1,2\n")
    assert kw == {"lr": 0.5, "K": 3, "filter_data": False, "difficulties": "1,2"}


@pytest.mark.parametrize("text", ["bogus = 1", "lr = 1\nlr = 2", "K = three", "filter_data = maybe", "just words"])
def test_parse_config_rejects(text):
    with pytest.raises(UsageError):
        parse_config(text)


def test_config_round_trip(tmp_path):
    cfg = load_config(SMOKE, mode="i2b_no_ib", seed=4)
    (tmp_path / "c.conf").write_text(format_config(cfg))
    assert load_config(str(tmp_path / "c.conf")) == cfg


def test_bad_mode_is_usage_error():
    with pytest.raises(UsageError):
        load_config(SMOKE, mode="ppo")
    assert main(["train", "--config", SMOKE, "--mode", "ppo"]) != 0


@pytest.fixture(scope="module")
def train_run(tmp_path_factory):
    return cmd_train(SMOKE, "i2b", 0, str(tmp_path_factory.mktemp("runs") / "i2b"))


def test_train_layout(train_run):
    names = {p.name for p in train_run.iterdir()}
    assert {"train.csv", "checkpoint.bin", "manifest.json", "config.txt"} <= names
    rows = read_csv(train_run / "train.csv")
    assert rows[0] == ["iter", "mean_reward", "pass1", "mean_entropy", "mean_len", "ib_mean", "loss", "grad_norm", "seconds"]
    assert len(rows) == 1 + 3
    assert (train_run / "train.csv").read_bytes().count(b"\r") == 0
    m = json.loads((train_run / "manifest.json").read_text())
    assert m["command"] == "train" and m["seeds"]["run"] == 0 and "train.csv" in m["outputs"]


def test_replay_reproduces_train_csv(train_run, tmp_path):
    d, same = cmd_replay(str(train_run / "manifest.json"), str(tmp_path / "again"))
    assert same == {"train.csv": True}
    assert (d / "train.csv").read_bytes() == (train_run / "train.csv").read_bytes()


def test_no_branch_preset_equals_explicit_k0(tmp_path):
    a = cmd_train(SMOKE, "i2b_no_branch", 1, str(tmp_path / "a"))
    conf = tmp_path / "k0.conf"
    conf.write_text(Path(SMOKE).read_text().replace("K = 3", "K = 0"))
    b = cmd_train(str(conf), "i2b", 1, str(tmp_path / "b"))
    assert (a / "train.csv").read_bytes() == (b / "train.csv").read_bytes()


def test_eval_single_sample_pass1_is_mean_reward(train_run, tmp_path):
    d = cmd_eval(str(train_run / "checkpoint.bin"), 1, "1", 0, str(tmp_path / "e"), SMOKE)
    metrics = dict(read_csv(d / "eval.csv")[1:])
    prompts = read_csv(d / "eval_prompts.csv")
    correct = [int(r[prompts[0].index("correct")]) for r in prompts[1:]]
    assert float(metrics["pass@1"]) == np.mean(correct)
    assert len(prompts) == 1 + 4


def test_eval_is_deterministic_and_replayable(train_run, tmp_path):
    a = cmd_eval(str(train_run / "checkpoint.bin"), 3, "1,2", 5, str(tmp_path / "a"), SMOKE)
    b = cmd_eval(str(train_run / "checkpoint.bin"), 3, "1,2", 5, str(tmp_path / "b"), SMOKE)
    assert (a / "eval.csv").read_bytes() == (b / "eval.csv").read_bytes()
    _, same = cmd_replay(str(a / "manifest.json"), str(tmp_path / "c"))
    assert all(same.values()) and len(same) == 2


def test_eval_k_above_n(train_run, tmp_path):
    with pytest.raises(UsageError):
        cmd_eval(str(train_run / "checkpoint.bin"), 2, "1,4", 0, str(tmp_path / "e"), SMOKE)
    assert main(["eval", "--checkpoint", str(train_run / "checkpoint.bin"), "--n", "2", "--k", "4"]) == EXIT_USAGE


def test_missing_checkpoint():
    assert main(["eval", "--checkpoint", "/nonexistent/ckpt.bin"]) == EXIT_USAGE


def test_untrained_policy_rarely_solves_difficulty_one(tmp_path):
    ckpt = tmp_path / "raw.bin"
    save_policy(Policy(ModelConfig(d_model=16, n_layers=2, n_heads=2, max_seq_len=48, d_z=4), seed=0), ckpt)
    probs = generate_problems(50, np.random.default_rng(0), (1,), 9)
    dump_problems(probs, tmp_path / "d1.tsv")
    d = cmd_eval(str(ckpt), 4, "1", 0, str(tmp_path / "e"), SMOKE, str(tmp_path / "d1.tsv"))
    assert float(dict(read_csv(d / "eval.csv")[1:])["pass@1"]) < 0.2


def test_probe_heads_rows_and_symmetry(train_run, tmp_path):
    d = cmd_probe_heads(str(train_run / "checkpoint.bin"), 0, str(tmp_path / "h"), n=8)
    rows = read_csv(d / "heads.csv")
    assert len(rows) - 1 == 2  # one probed layer, two heads
    probs = generate_problems(8, np.random.default_rng(1), (3,), 9)
    dump_problems(probs, tmp_path / "same.tsv")
    d2 = cmd_probe_heads(str(train_run / "checkpoint.bin"), 0, str(tmp_path / "h2"), n=8,
                         easy=str(tmp_path / "same.tsv"), hard=str(tmp_path / "same.tsv"))
    assert all(float(r[4]) == 0.0 for r in read_csv(d2 / "heads.csv")[1:])
    _, same = cmd_replay(str(d / "manifest.json"), str(tmp_path / "h3"))
    assert same == {"heads.csv": True}


def test_main_train_prints_run_dir(tmp_path, capsys):
    assert main(["train", "--config", SMOKE, "--mode", "grpo_only", "--seed", "2", "--out", str(tmp_path / "r")]) == 0
    assert capsys.readouterr().out.strip() == str(tmp_path / "r")


def test_defaults_cover_every_config_key():
    assert set(parse_config(format_config(TrainConfig()))) == set(TrainConfig.__dataclass_fields__)
