"""Difficulty-sensitive attention heads: head ablation, centroid probe, differentiation scores."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
import torch

from .model import Policy
from .numerics import ContractError, DTYPE
from .tasks import Problem
from .tokens import EOS

HARD_MIN = 6
EASY_MAX = 2


@dataclass(frozen=True)
class HeadAttribution:
    layer: int
    head: int
    s_hard: float
    s_easy: float
    delta: float
    se: float = float("nan")

    def __post_init__(self):
        if self.delta != self.s_hard - self.s_easy:
            raise ContractError("delta must equal s_hard - s_easy")


def head_isolated_states(H, W_o, i: int, last: Optional[Sequence[int]] = None) -> np.ndarray:
    """Output-map projection of head ``i`` alone at each sequence's last position.

    ``H`` has shape (batch, seq, heads, d_head) and ``W_o`` maps the
    concatenated heads (heads * d_head) to the model width.  ``last`` gives
    the last real position per row; by default the final column is used.
    """
    H = torch.as_tensor(H, dtype=DTYPE)
    W_o = torch.as_tensor(W_o, dtype=DTYPE)
    if H.dim() != 4:
        raise ContractError("expected attention outputs of shape (batch, seq, heads, d_head)")
    B, L, nh, dh = H.shape
    if not 0 <= i < nh:
        raise ContractError(f"head index {i} outside [0, {nh})")
    idx = torch.full((B,), L - 1, dtype=torch.long) if last is None else torch.as_tensor(list(last), dtype=torch.long)
    rows = H[torch.arange(B), idx]  # (B, nh, dh)
    masked = torch.zeros_like(rows)
    masked[:, i] = rows[:, i]
    return (masked.reshape(B, nh * dh) @ W_o.T).detach().numpy()


def fit_difficulty_probe(states, labels) -> np.ndarray:
    """Unit vector from the easy centroid to the hard centroid (label 1 = hard)."""
    X = np.asarray(states, dtype=np.float64)
    y = np.asarray(labels).astype(bool)
    if X.ndim != 2 or len(X) != len(y):
        raise ContractError("states must be (n, d) with one label per row")
    if y.all() or not y.any():
        raise ContractError("difficulty probe needs both classes")
    v = X[y].mean(axis=0) - X[~y].mean(axis=0)
    norm = np.linalg.norm(v)
    if norm == 0.0:
        raise ContractError("class means coincide; probe direction is undefined")
    return v / norm


def head_difficulty_score(z, v_diff) -> float:
    z = np.asarray(z, dtype=np.float64)
    v = np.asarray(v_diff, dtype=np.float64)
    if z.shape != v.shape:
        raise ContractError(f"dimension mismatch {z.shape} vs {v.shape}")
    return float(z @ v / np.linalg.norm(v))


def _layer_heads(policy: Policy, problems: Sequence[Problem], layer: int):
    seqs = [p.prompt_tokens for p in problems]
    L = max(len(s) for s in seqs)
    buf = torch.full((len(seqs), L), EOS, dtype=torch.long)
    for r, s in enumerate(seqs):
        buf[r, : len(s)] = torch.as_tensor(s)
    with torch.no_grad():
        _, heads = policy(buf, return_heads=True)
    return heads[layer], [len(s) - 1 for s in seqs]


def head_states(policy: Policy, problems: Sequence[Problem], layer: int = -1) -> np.ndarray:
    """Head-isolated last-token states, shape (n_problems, n_heads, d_model)."""
    H, last = _layer_heads(policy, problems, layer)
    W_o = policy.blocks[layer].wo
    return np.stack([head_isolated_states(H, W_o, i, last) for i in range(H.shape[2])], axis=1)


def _scores(states: np.ndarray, probes: np.ndarray) -> np.ndarray:
    # states (n, heads, d), probes (heads, d) unit rows -> (n, heads)
    return np.einsum("nhd,hd->nh", states, probes)


def differentiation_scores(
    policy: Policy,
    hard: Sequence[Problem],
    easy: Sequence[Problem],
    layer: int = -1,
    probe_hard: Optional[Sequence[Problem]] = None,
    probe_easy: Optional[Sequence[Problem]] = None,
    n_boot: int = 0,
    rng: Optional[np.random.Generator] = None,
) -> list[HeadAttribution]:
    """Per-head mean probe projection on each cohort and their difference.

    Each head gets its own centroid probe, fitted on ``probe_hard`` and
    ``probe_easy`` (the scored cohorts themselves when omitted).  With
    ``n_boot > 0`` the standard error of each difference is estimated by
    resampling both cohorts with replacement, probes held fixed.
    """
    if not hard or not easy:
        raise ContractError("both cohorts must be non-empty")
    n_layers = len(policy.blocks)
    layer_idx = layer % n_layers
    Sh = head_states(policy, hard, layer)
    Se = head_states(policy, easy, layer)
    Ph = Sh if probe_hard is None else head_states(policy, probe_hard, layer)
    Pe = Se if probe_easy is None else head_states(policy, probe_easy, layer)
    n_heads = Sh.shape[1]
    probes = np.empty((n_heads, Sh.shape[2]))
    for i in range(n_heads):
        X = np.concatenate([Ph[:, i], Pe[:, i]])
        y = np.r_[np.ones(len(Ph)), np.zeros(len(Pe))]
        try:
            probes[i] = fit_difficulty_probe(X, y)
        except ContractError:
            probes[i] = 0.0
    sh, se = _scores(Sh, probes), _scores(Se, probes)
    errs = np.full(n_heads, np.nan)
    if n_boot > 0:
        rng = rng if rng is not None else np.random.default_rng(0)
        boots = np.empty((n_boot, n_heads))
        for b in range(n_boot):
            ih = rng.integers(len(sh), size=len(sh))
            ie = rng.integers(len(se), size=len(se))
            boots[b] = sh[ih].mean(0) - se[ie].mean(0)
        errs = boots.std(axis=0, ddof=1)
    out = []
    for i in range(n_heads):
        a, b = float(sh[:, i].mean()), float(se[:, i].mean())
        out.append(HeadAttribution(layer_idx, i, a, b, a - b, float(errs[i])))
    return out


HEAD_COLUMNS = ("layer", "head", "s_hard", "s_easy", "delta")


def write_heads_csv(rows: Sequence[HeadAttribution], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(HEAD_COLUMNS)
        for r in rows:
            w.writerow([r.layer, r.head, repr(r.s_hard), repr(r.s_easy), repr(r.delta)])
