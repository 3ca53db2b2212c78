"""Entropy-triggered branching of base rollouts into M x (K+1) pools."""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field
from typing import Iterable, Optional, Sequence

import numpy as np

from .model import InjectionState, Policy
from .numerics import ContractError
from .records import Lineage, Trajectory
from .rollout import generate, next_id

MAX_BRANCH_DEPTH = 4


class HistoryCold(RuntimeError):
    """Too few entropy observations for a percentile query."""


class EntropyHistory:
    """Sliding window of observed token entropies.

    The threshold is the smallest value among the top ``top_percent`` percent
    of the window (nearest rank counted from the top), so at least
    ``ceil(n * top_percent / 100)`` entries lie at or above it.
    """

    MIN_SIZE = 20

    def __init__(self, capacity: int = 50_000, top_percent: int = 5):
        self.values: deque[float] = deque(maxlen=capacity)
        self.top_percent = top_percent

    def __len__(self) -> int:
        return len(self.values)

    def extend(self, entropies: Iterable[float]) -> None:
        self.values.extend(float(h) for h in entropies)

    def threshold(self) -> float:
        n = len(self.values)
        if n < self.MIN_SIZE:
            raise HistoryCold(f"entropy history holds {n} < {self.MIN_SIZE} values")
        k = max(1, -(-n * self.top_percent // 100))
        return float(np.sort(np.fromiter(self.values, dtype=np.float64))[n - k])


def detect_bifurcation(traj: Trajectory, history: EntropyHistory, rng: np.random.Generator) -> Optional[int]:
    """Uniform draw from the steps whose entropy reaches the threshold.

    Returns a 1-based step index, or None when no step qualifies.
    """
    if traj.T < 1:
        raise ContractError("trajectory has no tokens")
    tau = history.threshold()
    omega = np.flatnonzero(traj.entropies >= tau) + 1
    if omega.size == 0:
        return None
    return int(omega[rng.integers(omega.size)])


def extract_prefix(traj: Trajectory, t_star: int, prompt: Optional[Sequence[int]] = None) -> list[int]:
    """Context [q, o_1, ..., o_{t*-1}] for branching at step t*."""
    if not 1 <= t_star <= traj.T:
        raise ContractError(f"t* = {t_star} outside [1, {traj.T}]")
    q = list(traj.prompt if prompt is None else prompt)
    return q + list(traj.tokens[: t_star - 1])


@dataclass
class BranchSet:
    prompt_id: int
    M: int
    K: int
    trajectories: list[Trajectory]
    pruned: Optional[list[Trajectory]] = None
    t_stars: dict[int, int] = field(default_factory=dict)

    def __post_init__(self):
        if len(self.trajectories) != self.M * (self.K + 1):
            raise ContractError("branch set must hold M * (K + 1) trajectories")

    def __len__(self) -> int:
        return len(self.trajectories)

    def bases(self) -> list[Trajectory]:
        return [t for t in self.trajectories if not t.is_branch]


def choose_split(traj: Trajectory, history: EntropyHistory, rng: np.random.Generator) -> Optional[int]:
    """Bifurcation point, or None when the history is cold or no step qualifies."""
    try:
        return detect_bifurcation(traj, history, rng)
    except HistoryCold:
        return None


def expand_many(
    groups: Sequence[Sequence[Trajectory]],
    K: int,
    cvae,
    policy: Policy,
    rng: np.random.Generator,
    history: EntropyHistory,
    max_new: int,
    temperature: float = 1.0,
    mode: str = "psa",
    max_depth: int = MAX_BRANCH_DEPTH,
) -> list[BranchSet]:
    """Branch every base rollout of every prompt group K times.

    A base with a bifurcation point t* gets K latent-steered continuations of
    its first t*-1 tokens.  A base without one (cold history, or no step at
    the threshold) gets K plain rollouts resampled from the prompt.  Bases
    are never modified.
    """
    from .cvae import sample_latents_many

    if K < 0:
        raise ContractError("K must be nonnegative")
    if K == 0:
        return [BranchSet(g[0].prompt_id if g else -1, len(g), 0, list(g)) for g in groups]
    bases = [b for g in groups for b in g]
    splits = [choose_split(b, history, rng) for b in bases]
    steered = [i for i, t in enumerate(splits) if t is not None]
    contexts = {i: extract_prefix(bases[i], splits[i]) for i in steered}
    latents = {}
    if steered:
        latents = dict(zip(steered, sample_latents_many([contexts[i] for i in steered], K, cvae, policy, rng)))

    jobs = {"steer": [], "plain": []}  # (base index, draw, context, injection, budget)
    for bi, b in enumerate(bases):
        t = splits[bi]
        for j in range(1, K + 1):
            if t is None:
                jobs["plain"].append((bi, j, list(b.prompt), InjectionState(), max_new))
                continue
            ctx = contexts[bi]
            inj = InjectionState(mode, latents[bi][j - 1], len(ctx) - 1) if b.depth < max_depth else InjectionState()
            jobs["steer" if inj.mode != "none" else "plain"].append((bi, j, ctx, inj, max_new - (t - 1)))

    branches: dict[int, list[Trajectory]] = {i: [] for i in range(len(bases))}
    for kind in ("steer", "plain"):
        batch = jobs[kind]
        if not batch:
            continue
        injections = [x[3] for x in batch] if kind == "steer" else None
        gens = generate(policy, [x[2] for x in batch], rng, [x[4] for x in batch], temperature, injections)
        for g, (bi, j, ctx, inj, _) in zip(gens, batch):
            b, t = bases[bi], splits[bi]
            s = 0 if t is None else t - 1
            branches[bi].append(Trajectory(
                id=next_id(),
                prompt_id=b.prompt_id,
                prompt=list(b.prompt),
                tokens=list(b.tokens[:s]) + g.tokens,
                logprobs=np.concatenate([b.logprobs[:s], g.logprobs]),
                entropies=np.concatenate([b.entropies[:s], g.entropies]),
                truncated=g.truncated,
                lineage=Lineage(b.id, t, j),
                latent=inj.latent,
                mode=inj.mode,
                own_start=s,
                depth=b.depth + 1,
            ))

    out, i = [], 0
    for g in groups:
        members, t_stars = [], {}
        for b in g:
            members.append(b)
            members.extend(sorted(branches[i], key=lambda tr: tr.lineage.draw))
            if splits[i] is not None:
                t_stars[b.id] = splits[i]
            i += 1
        out.append(BranchSet(g[0].prompt_id, len(g), K, members, t_stars=t_stars))
    return out


def expand(base_rollouts, K, cvae, policy, rng, history, max_new, temperature=1.0, mode="psa") -> BranchSet:
    """Branch set for one prompt's M base rollouts."""
    if len(base_rollouts) < 1:
        raise ContractError("need at least one base rollout")
    return expand_many([base_rollouts], K, cvae, policy, rng, history, max_new, temperature, mode)[0]


def dump_branch_set(bs: BranchSet, scores: Optional[dict[int, float]] = None) -> list[str]:
    """Tab-separated records: id, parent, t*, draw, reward, ib_score, kept."""
    kept = {t.id for t in bs.pruned} if bs.pruned is not None else None
    lines = ["id\tparent\tt_star\tdraw\treward\tib_score\tkept"]
    for t in bs.trajectories:
        lin = t.lineage
        lines.append(
            "\t".join(
                [
                    str(t.id),
                    str(lin.parent_id) if lin else "-",
                    str(lin.t_star) if lin and lin.t_star is not None else "-",
                    str(lin.draw) if lin else "-",
                    "-" if t.reward is None else f"{t.reward:g}",
                    "-" if not scores or t.id not in scores else repr(scores[t.id]),
                    "-" if kept is None else str(int(t.id in kept)),
                ]
            )
        )
    return lines
