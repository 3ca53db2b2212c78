"""Synthetic arithmetic problems with exact-match verification."""

from __future__ import annotations

import re
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np

from .numerics import ContractError
from .tokens import EOS, decode, encode

OPERATORS = "+-*"
MAX_DIFFICULTY = 9
_INT_RUN = re.compile(r"-?\d+")


class FrontierEmpty(RuntimeError):
    """Every problem was filtered out; widen the difficulty range."""


@dataclass(frozen=True)
class Problem:
    expression: str  # without the trailing "="
    answer: str
    difficulty: int

    @property
    def prompt(self) -> str:
        return self.expression + "="

    @property
    def prompt_tokens(self) -> list[int]:
        return encode(self.prompt)


@dataclass(frozen=True)
class RewardRecord:
    trajectory_id: int
    reward: int
    parse_ok: bool


def _apply(a: int, op: str, b: int) -> int:
    if op == "+":
        return a + b
    if op == "-":
        return a - b
    return a * b


def solution_steps(expression: str) -> list[tuple[int, str, int, int]]:
    """Reduce ``expression`` one binary operation at a time.

    Multiplications go first, left to right, then additions and
    subtractions left to right.  Returns ``(a, op, b, result)`` per step.
    """
    nums = [int(x) for x in re.findall(r"\d+", expression)]
    ops = re.findall(r"[+\-*]", expression)
    if len(nums) != len(ops) + 1:
        raise ContractError(f"malformed expression {expression!r}")
    steps = []
    while "*" in ops:
        i = ops.index("*")
        r = nums[i] * nums[i + 1]
        steps.append((nums[i], "*", nums[i + 1], r))
        nums[i : i + 2] = [r]
        del ops[i]
    while ops:
        op = ops.pop(0)
        r = _apply(nums[0], op, nums[1])
        steps.append((nums[0], op, nums[1], r))
        nums[0:2] = [r]
    return steps


def evaluate_expression(expression: str) -> int:
    steps = solution_steps(expression)
    return steps[-1][3] if steps else int(expression)


def solution_trace(expression: str) -> str:
    """Worked solution, e.g. ``"7*3=21;12+21=33"`` for ``12+7*3``."""
    return ";".join(f"{a}{op}{b}={r}" for a, op, b, r in solution_steps(expression))


def generate_problem(difficulty: int, rng: np.random.Generator, max_operand: int = 99) -> Problem:
    """Expression with ``difficulty`` binary operations over [0, max_operand]."""
    if not 1 <= difficulty <= MAX_DIFFICULTY:
        raise ContractError(f"difficulty must be in [1, {MAX_DIFFICULTY}], got {difficulty}")
    operands = rng.integers(0, max_operand + 1, size=difficulty + 1)
    ops = rng.integers(0, len(OPERATORS), size=difficulty)
    expr = str(int(operands[0]))
    for o, x in zip(ops, operands[1:]):
        expr += OPERATORS[int(o)] + str(int(x))
    return Problem(expr, str(evaluate_expression(expr)), difficulty)


def generate_problems(
    n: int, rng: np.random.Generator, difficulties: Sequence[int] = (1, 2, 3), max_operand: int = 99
) -> list[Problem]:
    levels = rng.choice(np.asarray(difficulties), size=n)
    return [generate_problem(int(d), rng, max_operand) for d in levels]


def parse_answer(problem: Problem, generated: str | Sequence[int]) -> Optional[str]:
    """Final signed-integer run after the last "=" of prompt + response."""
    if not isinstance(generated, str):
        ids = list(generated)
        if EOS in ids:
            ids = ids[: ids.index(EOS)]
        generated = decode(ids)
    text = problem.prompt + generated.split("E", 1)[0].split("<eos>", 1)[0]
    tail = text[text.rfind("=") + 1 :]
    runs = _INT_RUN.findall(tail)
    return runs[-1] if runs else None


def canonical(s: str) -> str:
    return str(int(s))


def verify(problem: Problem, generated: str | Sequence[int], trajectory_id: int = 0) -> RewardRecord:
    """Exact-match reward; malformed output scores 0 rather than raising."""
    try:
        ans = parse_answer(problem, generated)
    except Exception:
        ans = None
    if ans is None:
        return RewardRecord(trajectory_id, 0, False)
    return RewardRecord(trajectory_id, int(canonical(ans) == problem.answer), True)


def reward(problem: Problem, generated) -> int:
    return verify(problem, generated).reward


def filter_dataset(
    problems: Sequence[Problem],
    policy,
    rng: np.random.Generator,
    n_probe: int = 8,
    length_cap: int = 32,
    temperature: float = 1.0,
) -> list[Problem]:
    """Keep problems on the policy's learning frontier.

    Drops problems solved by every probe and problems failed by every probe
    when all probes ran to ``length_cap`` without finishing.
    """
    from .rollout import generate

    if n_probe < 2:
        raise ContractError("n_probe must be at least 2")
    contexts = [p.prompt_tokens for p in problems for _ in range(n_probe)]
    gens = generate(policy, contexts, rng, length_cap, temperature)
    kept = []
    for i, p in enumerate(problems):
        chunk = gens[i * n_probe : (i + 1) * n_probe]
        solved = [reward(p, g.tokens) for g in chunk]
        overlong = [g.truncated for g in chunk]
        if keep_for_frontier(solved, overlong):
            kept.append(p)
    if not kept:
        raise FrontierEmpty("no problem on the learning frontier")
    return kept


def keep_for_frontier(solved: Sequence[int], overlong: Sequence[bool]) -> bool:
    if all(solved):
        return False
    if not any(solved) and all(overlong):
        return False
    return True


def dump_problems(problems: Iterable[Problem], path) -> None:
    lines = [f"{p.difficulty}\t{p.expression}\t{p.answer}\n" for p in problems]
    Path(path).write_text("".join(lines), newline="\n")


def load_problems(path) -> list[Problem]:
    out = []
    for line in Path(path).read_text().splitlines():
        if not line.strip():
            continue
        d, expr, ans = line.split("\t")
        out.append(Problem(expr, ans, int(d)))
    return out
