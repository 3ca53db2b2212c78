"""Autoregressive sampling and per-token recomputation of logprobs/entropies."""

from __future__ import annotations

import itertools
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
import torch

from .model import BatchInjection, CapacityError, InjectionState, Policy, token_entropy
from .numerics import ContractError, DTYPE, log_softmax
from .records import Trajectory
from .tokens import EOS

_ids = itertools.count(1)


def next_id() -> int:
    return next(_ids)


def reset_ids(start: int = 1) -> None:
    """Restart trajectory numbering (run-level determinism)."""
    global _ids
    _ids = itertools.count(start)


@dataclass
class Generated:
    tokens: list[int]
    logprobs: np.ndarray
    entropies: np.ndarray
    truncated: bool


@torch.no_grad()
def generate(
    policy: Policy,
    contexts: Sequence[Sequence[int]],
    rng: np.random.Generator,
    max_new: int | Sequence[int],
    temperature: float = 1.0,
    injections: Optional[Sequence[InjectionState]] = None,
    eos: int = EOS,
) -> list[Generated]:
    """Sample continuations for a batch of contexts.

    Sequences are right-padded; causality makes padding invisible to the
    rows that are read.  One uniform per row is drawn from ``rng`` at every
    step, whether or not the row is still active, so results depend only on
    the batch composition and the seed.
    """
    if temperature <= 0:
        raise ContractError("temperature must be positive")
    B = len(contexts)
    if B == 0:
        return []
    limits = np.full(B, max_new, dtype=np.int64) if np.isscalar(max_new) else np.asarray(max_new, dtype=np.int64)
    lens = np.array([len(c) for c in contexts], dtype=np.int64)
    if (lens == 0).any():
        raise ContractError("empty context")
    total = int((lens + limits).max())
    if total > policy.cfg.max_seq_len:
        raise CapacityError(f"context + max_new = {total} exceeds max_seq_len {policy.cfg.max_seq_len}")
    buf = torch.full((B, total), eos, dtype=torch.long)
    for i, c in enumerate(contexts):
        buf[i, : len(c)] = torch.as_tensor(list(c), dtype=torch.long)
    inj = BatchInjection.stack(injections) if injections is not None else None

    out_tok = [[] for _ in range(B)]
    out_lp = [[] for _ in range(B)]
    out_h = [[] for _ in range(B)]
    active = limits > 0
    cur = lens.copy()
    rows = torch.arange(B)
    while active.any():
        width = int(cur.max())
        logits = policy(buf[:, :width], inj)
        last = logits[rows, torch.as_tensor(cur - 1)] / temperature
        logp = log_softmax(last)
        ent = token_entropy(last)
        cdf = torch.cumsum(torch.exp(logp), dim=-1)
        u = torch.as_tensor(rng.random(B), dtype=DTYPE) * cdf[:, -1]
        choice = torch.searchsorted(cdf, u[:, None], right=True)[:, 0].clamp(max=logp.shape[-1] - 1)
        for i in np.flatnonzero(active):
            tok = int(choice[i])
            buf[i, cur[i]] = tok
            out_tok[i].append(tok)
            out_lp[i].append(float(logp[i, tok]))
            out_h[i].append(float(ent[i]))
            cur[i] += 1
            if tok == eos or len(out_tok[i]) >= limits[i]:
                active[i] = False
    return [
        Generated(t, np.array(lp), np.array(h), truncated=(not t or t[-1] != eos))
        for t, lp, h in zip(out_tok, out_lp, out_h)
    ]


def sample_rollout(
    prompt: Sequence[int],
    policy: Policy,
    injection: Optional[InjectionState] = None,
    temperature: float = 1.0,
    max_new: int = 32,
    rng: Optional[np.random.Generator] = None,
    prompt_id: int = 0,
) -> Trajectory:
    """Sample one trajectory for ``prompt``."""
    rng = rng if rng is not None else np.random.default_rng()
    inj = [injection] if injection is not None and injection.mode != "none" else None
    (g,) = generate(policy, [list(prompt)], rng, max_new, temperature, inj)
    return Trajectory(
        id=next_id(),
        prompt_id=prompt_id,
        prompt=list(prompt),
        tokens=g.tokens,
        logprobs=g.logprobs,
        entropies=g.entropies,
        truncated=g.truncated,
        latent=injection.latent if inj else None,
        mode=injection.mode if inj else "none",
    )


def sample_many(
    policy: Policy,
    prompts: Sequence[Sequence[int]],
    rng: np.random.Generator,
    max_new: int,
    temperature: float = 1.0,
    prompt_ids: Optional[Sequence[int]] = None,
) -> list[Trajectory]:
    """Plain (uninjected) rollouts, one per entry of ``prompts``."""
    gens = generate(policy, prompts, rng, max_new, temperature)
    pids = prompt_ids if prompt_ids is not None else range(len(prompts))
    return [
        Trajectory(next_id(), pid, list(p), g.tokens, g.logprobs, g.entropies, g.truncated)
        for p, g, pid in zip(prompts, gens, pids)
    ]


def _padded(seqs: Sequence[Sequence[int]]) -> torch.Tensor:
    L = max(len(s) for s in seqs)
    buf = torch.full((len(seqs), L), EOS, dtype=torch.long)
    for i, s in enumerate(seqs):
        buf[i, : len(s)] = torch.as_tensor(list(s), dtype=torch.long)
    return buf


def _gather(logits, trajs, temperature):
    lps, hs = [], []
    logits = logits / temperature
    for i, tr in enumerate(trajs):
        P, T = len(tr.prompt), tr.T
        rows = logits[i, P - 1 : P - 1 + T]
        logp = log_softmax(rows)
        tok = torch.as_tensor(tr.tokens, dtype=torch.long)
        lps.append(logp.gather(-1, tok[:, None])[:, 0])
        hs.append(-(torch.exp(logp) * logp).sum(-1))
    return lps, hs


def token_stats(
    policy: Policy, trajs: Sequence[Trajectory], temperature: float = 1.0
) -> tuple[list[torch.Tensor], list[torch.Tensor]]:
    """Differentiable per-token logprobs and entropies under current params.

    Tokens a branch copied from its parent are scored by the plain pass, the
    branch's own tokens by the pass carrying its latent, which reproduces the
    conditions each token was sampled under.
    """
    n = len(trajs)
    lps: list = [None] * n
    hs: list = [None] * n
    if n == 0:
        return [], []
    seqs = [tr.prompt + tr.tokens for tr in trajs]
    plain_lp, plain_h = _gather(policy(_padded(seqs)), trajs, temperature)
    by_mode: dict[str, list[int]] = {}
    for i, tr in enumerate(trajs):
        if tr.latent is not None and tr.mode != "none":
            by_mode.setdefault(tr.mode, []).append(i)
    inj_lp, inj_h = {}, {}
    for mode, idx in by_mode.items():
        states = [InjectionState(mode, trajs[i].latent, trajs[i].injection_start) for i in idx]
        sub = [trajs[i] for i in idx]
        lp, h = _gather(policy(_padded([seqs[i] for i in idx]), BatchInjection.stack(states)), sub, temperature)
        for j, i in enumerate(idx):
            inj_lp[i], inj_h[i] = lp[j], h[j]
    for i, tr in enumerate(trajs):
        if i in inj_lp:
            s = tr.own_start
            lps[i] = torch.cat([plain_lp[i][:s], inj_lp[i][s:]])
            hs[i] = torch.cat([plain_h[i][:s], inj_h[i][s:]])
        else:
            lps[i], hs[i] = plain_lp[i], plain_h[i]
    return lps, hs
