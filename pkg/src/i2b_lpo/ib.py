"""Information-bottleneck trajectory score, top-N pruning and auxiliary objective."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
import torch

from .numerics import ContractError, DTYPE
from .records import Trajectory

BETA = 2.0
GAMMA_IB = 0.003


class SequencingError(RuntimeError):
    """Advantages must be assigned before IB scoring."""


@dataclass(frozen=True)
class IbScore:
    value: float
    terms: np.ndarray
    trajectory_id: int


def ib_score(traj: Trajectory, normalize: str = "mean") -> IbScore:
    """Advantage-weighted token entropy, averaged (or summed) over the response.

    The trajectory's scalar advantage multiplies every token's entropy.
    """
    if traj.advantage is None:
        raise SequencingError(f"trajectory {traj.id} has no advantage yet")
    terms = float(traj.advantage) * traj.entropies
    if traj.T == 0:
        return IbScore(0.0, terms, traj.id)
    value = float(terms.mean()) if normalize == "mean" else float(terms.sum())
    return IbScore(value, terms, traj.id)


def prune(pool: Sequence[Trajectory], N: int, normalize: str = "mean") -> list[Trajectory]:
    """Top-N trajectories by IB score, returned in pool order.

    Ties go to the higher reward, then the lower trajectory id.
    """
    pool = list(getattr(pool, "trajectories", pool))
    if N > len(pool):
        raise ContractError(f"cannot keep {N} of {len(pool)} trajectories")
    if N == len(pool):
        return pool
    scores = [ib_score(t, normalize).value for t in pool]
    order = sorted(
        range(len(pool)),
        key=lambda i: (-scores[i], -(pool[i].reward or 0.0), pool[i].id),
    )
    keep = set(order[:N])
    return [t for i, t in enumerate(pool) if i in keep]


def ib_objective_from_entropies(
    entropies: Sequence[torch.Tensor], advantages: Sequence[float], normalize: str = "mean"
) -> torch.Tensor:
    """(1/N) sum_r score_r with differentiable entropies and constant advantages."""
    if len(entropies) == 0:
        raise ContractError("IB objective needs at least one trajectory")
    per = []
    for h, a in zip(entropies, advantages):
        s = h.sum() if normalize == "sum" else h.mean()
        per.append(float(a) * s)
    return torch.stack(per).mean()


def ib_objective(policy, trajs: Sequence[Trajectory], normalize: str = "mean", temperature: float = 1.0) -> torch.Tensor:
    """Auxiliary IB objective with entropies recomputed under ``policy``."""
    from .rollout import token_stats

    if len(trajs) == 0:
        raise ContractError("IB objective needs at least one trajectory")
    for t in trajs:
        if t.advantage is None:
            raise SequencingError(f"trajectory {t.id} has no advantage yet")
    _, hs = token_stats(policy, trajs, temperature)
    return ib_objective_from_entropies(hs, [t.advantage for t in trajs], normalize)
