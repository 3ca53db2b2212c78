"""Command-line harness: ``train``, ``eval``, ``probe-heads`` and ``replay``.

Every command writes its CSVs plus a ``manifest.json`` describing how to
reproduce them.  ``replay`` re-executes a manifest into a fresh directory and
checks the CSVs byte for byte.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import hashlib
import json
import math
import os
import sys
import time
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch

from .cvae import CVAE
from .evaluate import evaluate, write_prompt_rows, write_report
from .grpo import CSV_COLUMNS, MODES, TrainConfig, run_training
from .head_probe import EASY_MAX, HARD_MIN, differentiation_scores, write_heads_csv
from .model import load_policy_entries, read_container, save_policy
from .numerics import ContractError
from .tasks import generate_problems, load_problems

EXIT_USAGE = 2
EXIT_NONFINITE = 3


class UsageError(Exception):
    pass


# ---------------------------------------------------------------- config
_TRUE = {"1", "true", "yes", "on"}
_FALSE = {"0", "false", "no", "off"}


def _coerce(key: str, raw: str, default):
    if isinstance(default, bool):
        v = raw.lower()
        if v in _TRUE:
            return True
        if v in _FALSE:
            return False
        raise UsageError(f"{key}: expected a boolean, got {raw!r}")
    try:
        return type(default)(raw)
    except ValueError:
        raise UsageError(f"{key}: expected {type(default).__name__}, got {raw!r}") from None


def parse_config(text: str) -> dict:
    """Parse flat ``key = value`` lines into typed TrainConfig overrides.

    Blank lines and ``#`` comments are ignored; unknown or repeated keys are
    rejected.
    """
    defaults = {f.name: f.default for f in dataclasses.fields(TrainConfig)}
    out = {}
    for n, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"line {n}: expected 'key = value'")
        key, raw = (x.strip() for x in line.split("=", 1))
        if key not in defaults:
            raise UsageError(f"line {n}: unknown key {key!r}")
        if key in out:
            raise UsageError(f"line {n}: duplicate key {key!r}")
        out[key] = _coerce(key, raw, defaults[key])
    return out


def load_config(path: Optional[str], **overrides) -> TrainConfig:
    kw = parse_config(Path(path).read_text()) if path else {}
    kw.update({k: v for k, v in overrides.items() if v is not None})
    if "mode" in kw and kw["mode"] not in MODES:
        raise UsageError(f"unknown mode {kw['mode']!r}; choose from {', '.join(MODES)}")
    try:
        return TrainConfig(**kw)
    except ContractError as e:
        raise UsageError(str(e)) from None


def format_config(cfg: TrainConfig) -> str:
    return "".join(f"{k} = {str(v).lower() if isinstance(v, bool) else v}\n" for k, v in dataclasses.asdict(cfg).items())


# ---------------------------------------------------------------- io helpers
def sha256_file(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _run_dir(out: Optional[str], label: str, seed: int) -> Path:
    if out:
        d = Path(out)
    else:
        d = Path("runs") / f"{time.strftime('%Y%m%d-%H%M%S')}-{label}-{seed}"
    d.mkdir(parents=True, exist_ok=True)
    return d


def _csv_finite(path) -> bool:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    for row in rows[1:]:
        for cell in row:
            try:
                if not math.isfinite(float(cell)):
                    return False
            except ValueError:
                continue
    return True


def _write_manifest(d: Path, command: str, args: dict, config: Optional[TrainConfig], inputs: dict, outputs: Sequence[str]):
    manifest = {
        "command": command,
        "args": args,
        "config": dataclasses.asdict(config) if config is not None else None,
        "seeds": {"run": args.get("seed")},
        "inputs": {k: sha256_file(v) for k, v in inputs.items() if v},
        "outputs": {name: sha256_file(d / name) for name in outputs},
        "layout": sorted(outputs) + ["manifest.json"],
        "torch_threads": torch.get_num_threads(),
    }
    (d / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return manifest


def load_checkpoint(path):
    entries = read_container(path)
    policy = load_policy_entries(entries)
    cvae = CVAE.from_entries(entries) if "cvae_config.d_z" in entries else None
    return policy, cvae


# ---------------------------------------------------------------- commands
def cmd_train(config: Optional[str], mode: Optional[str], seed: Optional[int], out: Optional[str]) -> Path:
    cfg = load_config(config, mode=mode, seed=seed)
    d = _run_dir(out, cfg.mode, cfg.seed)
    (d / "config.txt").write_text(format_config(cfg))
    with open(d / "train.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CSV_COLUMNS)

        def on_report(rep):
            if not cfg.log_wall_time:
                rep = dataclasses.replace(rep, seconds=0.0)
            w.writerow(rep.csv_row())
            fh.flush()

        res = run_training(cfg, on_report=on_report)
    save_policy(res.policy, d / "checkpoint.bin", extra=res.cvae.entries())
    _write_manifest(
        d, "train", {"config": "config.txt", "mode": cfg.mode, "seed": cfg.seed}, cfg,
        {"config.txt": d / "config.txt"}, ["train.csv", "checkpoint.bin"],
    )
    if not _csv_finite(d / "train.csv"):
        raise FloatingPointError("non-finite values in train.csv")
    return d


def _parse_ks(k: str) -> list[int]:
    try:
        ks = [int(x) for x in str(k).split(",") if x.strip()]
    except ValueError:
        raise UsageError(f"--k expects a comma-separated list of integers, got {k!r}") from None
    if not ks or min(ks) < 1:
        raise UsageError("--k needs positive integers")
    return ks


def cmd_eval(checkpoint: str, n: int, k: str, seed: int, out: Optional[str], config: Optional[str] = None,
             problems: Optional[str] = None) -> Path:
    ks = _parse_ks(k)
    if n < 1:
        raise UsageError("--n must be positive")
    if max(ks) > n:
        raise UsageError(f"k={max(ks)} exceeds n={n}")
    if not checkpoint or not Path(checkpoint).exists():
        raise UsageError(f"checkpoint {checkpoint!r} not found")
    cfg = load_config(config, seed=seed)
    policy, _ = load_checkpoint(checkpoint)
    rng = np.random.default_rng(seed)
    probs = load_problems(problems) if problems else generate_problems(
        cfg.eval_problems, rng, cfg.difficulty_levels, cfg.max_operand)
    if not probs:
        raise UsageError("empty problem set")
    report, rows = evaluate(policy, probs, n, ks, rng, cfg.max_new, cfg.temperature)
    d = _run_dir(out, "eval", seed)
    write_report(report, d / "eval.csv")
    write_prompt_rows(rows, d / "eval_prompts.csv")
    _write_manifest(
        d, "eval", {"checkpoint": str(checkpoint), "n": n, "k": k, "seed": seed, "config": config, "problems": problems},
        cfg, {"checkpoint": checkpoint, "config": config, "problems": problems}, ["eval.csv", "eval_prompts.csv"],
    )
    if not (_csv_finite(d / "eval.csv") and _csv_finite(d / "eval_prompts.csv")):
        raise FloatingPointError("non-finite values in evaluation output")
    return d


def cmd_probe_heads(checkpoint: str, seed: int, out: Optional[str], n: int = 64,
                    easy: Optional[str] = None, hard: Optional[str] = None, layer: int = -1) -> Path:
    if not checkpoint or not Path(checkpoint).exists():
        raise UsageError(f"checkpoint {checkpoint!r} not found")
    if n < 2:
        raise UsageError("--n must be at least 2")
    policy, _ = load_checkpoint(checkpoint)
    rng = np.random.default_rng(seed)
    max_op = 9
    easy_set = load_problems(easy) if easy else generate_problems(n, rng, range(1, EASY_MAX + 1), max_op)
    hard_set = load_problems(hard) if hard else generate_problems(n, rng, range(HARD_MIN, 10), max_op)
    if not easy_set or not hard_set:
        raise UsageError("both cohorts must be non-empty")
    probe_easy = generate_problems(n, rng, range(1, EASY_MAX + 1), max_op)
    probe_hard = generate_problems(n, rng, range(HARD_MIN, 10), max_op)
    rows = differentiation_scores(policy, hard_set, easy_set, layer, probe_hard, probe_easy)
    d = _run_dir(out, "heads", seed)
    write_heads_csv(rows, d / "heads.csv")
    _write_manifest(
        d, "probe-heads", {"checkpoint": str(checkpoint), "seed": seed, "n": n, "easy": easy, "hard": hard, "layer": layer},
        None, {"checkpoint": checkpoint, "easy": easy, "hard": hard}, ["heads.csv"],
    )
    if not _csv_finite(d / "heads.csv"):
        raise FloatingPointError("non-finite values in heads.csv")
    return d


def cmd_replay(manifest_path: str, out: Optional[str]) -> tuple[Path, dict[str, bool]]:
    """Re-run a manifest's command and compare every CSV it produced."""
    src = Path(manifest_path)
    m = json.loads(src.read_text())
    a = m["args"]
    base = src.parent
    target = out or str(base.parent / (base.name + "-replay"))
    if m["command"] == "train":
        d = cmd_train(str(base / a["config"]), a["mode"], a["seed"], target)
    elif m["command"] == "eval":
        d = cmd_eval(a["checkpoint"], a["n"], a["k"], a["seed"], target, a["config"], a["problems"])
    elif m["command"] == "probe-heads":
        d = cmd_probe_heads(a["checkpoint"], a["seed"], target, a["n"], a["easy"], a["hard"], a["layer"])
    else:
        raise UsageError(f"unknown command {m['command']!r} in manifest")
    same = {name: sha256_file(d / name) == digest for name, digest in m["outputs"].items() if name.endswith(".csv")}
    return d, same


# ---------------------------------------------------------------- entry point
def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="i2b-lpo", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="run one training pipeline")
    t.add_argument("--config", help="flat key = value config file")
    t.add_argument("--mode", choices=MODES)
    t.add_argument("--seed", type=int)
    t.add_argument("--out", help="output directory (default runs/<timestamp>-<mode>-<seed>)")

    e = sub.add_parser("eval", help="sample and score a checkpoint")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--n", type=int, default=10, help="samples per prompt")
    e.add_argument("--k", default="1", help="comma-separated pass@k values")
    e.add_argument("--seed", type=int, default=0)
    e.add_argument("--config", help="config supplying difficulties, max_operand, max_new, eval_problems")
    e.add_argument("--problems", help="problem file (difficulty<TAB>expression<TAB>answer)")
    e.add_argument("--out")

    h = sub.add_parser("probe-heads", help="difficulty attribution per attention head")
    h.add_argument("--checkpoint", required=True)
    h.add_argument("--n", type=int, default=64, help="problems per cohort")
    h.add_argument("--seed", type=int, default=0)
    h.add_argument("--easy", help="easy cohort problem file")
    h.add_argument("--hard", help="hard cohort problem file")
    h.add_argument("--layer", type=int, default=-1)
    h.add_argument("--out")

    r = sub.add_parser("replay", help="re-run a manifest and compare its CSVs")
    r.add_argument("manifest")
    r.add_argument("--out")
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    threads = os.environ.get("I2B_THREADS")
    if threads:
        try:
            torch.set_num_threads(max(1, int(threads)))
        except ValueError:
            print(f"error: I2B_THREADS must be an integer, got {threads!r}", file=sys.stderr)
            return EXIT_USAGE
    try:
        args = build_parser().parse_args(argv)
    except SystemExit as e:  # argparse reports usage problems by exiting
        return int(e.code or 0)
    try:
        if args.command == "train":
            d = cmd_train(args.config, args.mode, args.seed, args.out)
        elif args.command == "eval":
            d = cmd_eval(args.checkpoint, args.n, args.k, args.seed, args.out, args.config, args.problems)
        elif args.command == "probe-heads":
            d = cmd_probe_heads(args.checkpoint, args.seed, args.out, args.n, args.easy, args.hard, args.layer)
        else:
            d, same = cmd_replay(args.manifest, args.out)
            for name, ok in sorted(same.items()):
                print(f"{name}: {'identical' if ok else 'DIFFERS'}")
            if not all(same.values()):
                return 1
    except (UsageError, FileNotFoundError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except FloatingPointError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_NONFINITE
    print(d)
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
