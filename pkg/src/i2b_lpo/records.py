"""Plain data records passed between the rollout, branching and training code."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np


@dataclass(frozen=True)
class LatentCode:
    """A latent steering vector with its provenance."""

    z: np.ndarray
    source: str = "prior"  # "prior" | "posterior"
    index: int = 1

    def __post_init__(self):
        object.__setattr__(self, "z", np.asarray(self.z, dtype=np.float64).reshape(-1))

    @property
    def dim(self) -> int:
        return self.z.shape[0]


@dataclass(frozen=True)
class Lineage:
    """Where a branch came from.  ``t_star`` is None for a plain resample."""

    parent_id: int
    t_star: Optional[int]
    draw: int


@dataclass
class Trajectory:
    """One sampled response.

    ``tokens`` are the generated ids o_1..o_T (EOS included when emitted).
    ``own_start`` is the 0-based index of the first token this trajectory
    generated itself; tokens before it were copied from the parent.
    """

    id: int
    prompt_id: int
    prompt: list[int]
    tokens: list[int]
    logprobs: np.ndarray
    entropies: np.ndarray
    truncated: bool = False
    lineage: Optional[Lineage] = None
    latent: Optional[LatentCode] = None
    mode: str = "none"
    own_start: int = 0
    depth: int = 0
    reward: Optional[float] = None
    advantage: Optional[float] = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.logprobs = np.asarray(self.logprobs, dtype=np.float64)
        self.entropies = np.asarray(self.entropies, dtype=np.float64)
        if not (len(self.tokens) == len(self.logprobs) == len(self.entropies)):
            raise ValueError("tokens, logprobs and entropies must have equal length")

    @property
    def T(self) -> int:
        return len(self.tokens)

    @property
    def is_branch(self) -> bool:
        return self.lineage is not None

    @property
    def injection_start(self) -> int:
        """Absolute sequence row whose logits predict the first own token."""
        return len(self.prompt) + self.own_start - 1
