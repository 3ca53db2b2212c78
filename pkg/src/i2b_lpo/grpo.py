"""Group-relative policy optimization with latent branching and IB pruning."""

from __future__ import annotations

import dataclasses
import time
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
import torch

from . import ib as ibmod
from .branching import EntropyHistory, expand_many, extract_prefix
from .cvae import CVAE, CvaeTrainer
from .model import ModelConfig, Policy
from .numerics import ContractError, DTYPE
from .records import Trajectory
from .rollout import reset_ids, sample_many, token_stats
from .tasks import Problem, generate_problems, solution_trace, verify
from .tokens import EOS, encode

MODES = (
    "grpo_only",
    "entropy_reg",
    "i2b",
    "i2b_no_ib",
    "i2b_no_branch",
    "fusion_input",
    "fusion_logit",
)

CSV_COLUMNS = ("iter", "mean_reward", "pass1", "mean_entropy", "mean_len", "ib_mean", "loss", "grad_norm", "seconds")


@dataclass
class TrainConfig:
    mode: str = "i2b"
    seed: int = 0
    iterations: int = 300
    # rollout / branching
    M: int = 4
    K: int = 7
    N: int = 8
    temperature: float = 1.0
    max_new: int = 32
    history_window: int = 50_000
    injection_mode: str = "psa"
    # objective
    gamma_ib: float = 0.003
    beta_ib: float = 2.0
    ib_normalize: str = "mean"
    eps_low: float = 0.2
    eps_high: float = 0.28
    entropy_coef: float = 0.0
    group_after_prune: bool = True
    # optimizer
    optimizer: str = "sgd"
    lr: float = 1e-3
    momentum: float = 0.9
    max_grad_norm: float = 0.0
    batch_prompts: int = 8
    # cvae
    cvae_lr: float = 0.02
    cvae_steps: int = 1
    d_enc: int = 32
    # model
    d_model: int = 64
    n_layers: int = 4
    n_heads: int = 4
    max_seq_len: int = 128
    d_z: int = 16
    psa_layers: str = ""
    decay_steps: int = 0  # 0 -> max_new // 2
    # tasks
    difficulties: str = "1,2,3"
    max_operand: int = 99
    train_pool: int = 512
    filter_data: bool = True
    n_probe: int = 8
    # supervised warm start
    sft_steps: int = 400
    sft_batch: int = 32
    sft_lr: float = 3e-3
    # harness
    eval_problems: int = 100
    token_budget: int = 0  # stop once this many tokens were sampled; 0 -> no cap
    log_wall_time: bool = False

    def __post_init__(self):
        if self.mode not in MODES:
            raise ContractError(f"unknown mode {self.mode!r}; choose from {', '.join(MODES)}")
        if self.eps_low <= 0 or self.eps_high <= 0:
            raise ContractError("clip bounds must be positive")
        if self.M < 1 or self.K < 0:
            raise ContractError("M must be >= 1 and K >= 0")

    @property
    def difficulty_levels(self) -> tuple[int, ...]:
        return tuple(int(x) for x in str(self.difficulties).split(",") if x.strip())

    def model_config(self) -> ModelConfig:
        layers = tuple(int(x) for x in self.psa_layers.split(",") if x.strip()) or None
        return ModelConfig(
            d_model=self.d_model,
            n_layers=self.n_layers,
            n_heads=self.n_heads,
            max_seq_len=self.max_seq_len,
            d_z=self.d_z,
            psa_layers=layers,
            decay_steps=self.decay_steps or max(1, self.max_new // 2),
        )


@dataclass(frozen=True)
class Plan:
    """Mode-resolved pipeline switches."""

    K: int
    N: Optional[int]  # None: keep the whole pool
    gamma_ib: float
    entropy_coef: float
    injection_mode: str


def resolve_mode(cfg: TrainConfig) -> Plan:
    mode = cfg.mode
    if mode in ("grpo_only", "entropy_reg"):
        return Plan(0, None, 0.0, cfg.entropy_coef if mode == "entropy_reg" else 0.0, "psa")
    if mode == "i2b_no_ib":
        return Plan(cfg.K, None, 0.0, 0.0, cfg.injection_mode)
    K = 0 if mode == "i2b_no_branch" else cfg.K
    inj = {"fusion_input": "input_fusion", "fusion_logit": "logit_fusion"}.get(mode, cfg.injection_mode)
    if cfg.N > cfg.M * (K + 1) and K > 0:
        raise ContractError(f"N={cfg.N} exceeds the pool size {cfg.M * (K + 1)}")
    return Plan(K, cfg.N, cfg.gamma_ib, 0.0, inj)


def group_advantages(rewards: Sequence[float], eps: float = 1e-8) -> np.ndarray:
    """(r - mean) / (std + eps) within one prompt's group; all-equal -> zeros."""
    r = np.asarray(rewards, dtype=np.float64)
    if r.size < 2:
        raise ContractError("group advantages need at least two rewards")
    if np.all(r == r[0]):
        return np.zeros_like(r)
    return (r - r.mean()) / (r.std() + eps)


def clipped_surrogate(new_logprobs, old_logprobs, advantages, eps_low: float = 0.2, eps_high: float = 0.28) -> torch.Tensor:
    """Negative mean of min(rho * A, clip(rho, 1 - eps_low, 1 + eps_high) * A)."""
    new = torch.as_tensor(new_logprobs, dtype=DTYPE)
    old = torch.as_tensor(old_logprobs, dtype=DTYPE)
    adv = torch.as_tensor(advantages, dtype=DTYPE)
    if new.shape != old.shape or new.shape != adv.shape:
        raise ContractError(f"shape mismatch {tuple(new.shape)}, {tuple(old.shape)}, {tuple(adv.shape)}")
    ratio = torch.exp(new - old)
    unclipped = ratio * adv
    clipped = torch.clamp(ratio, 1.0 - eps_low, 1.0 + eps_high) * adv
    return -torch.minimum(unclipped, clipped).mean()


def surrogate_terms(ratio: float, adv: float, eps_low: float = 0.2, eps_high: float = 0.28) -> float:
    return float(min(ratio * adv, min(max(ratio, 1 - eps_low), 1 + eps_high) * adv))


@dataclass
class UpdateReport:
    iteration: int
    mean_reward: float
    pass1: float
    mean_entropy: float
    mean_len: float
    ib_mean: float
    loss: float
    surrogate: float
    ib_term: float
    entropy_term: float
    grad_norm: float
    seconds: float
    sampled_tokens: int = 0

    def csv_row(self) -> list[str]:
        vals = [self.iteration, self.mean_reward, self.pass1, self.mean_entropy, self.mean_len,
                self.ib_mean, self.loss, self.grad_norm, self.seconds]
        return [str(vals[0])] + [repr(float(v)) for v in vals[1:]]


def build_optimizer(cfg: TrainConfig, params) -> torch.optim.Optimizer:
    if cfg.optimizer == "sgd":
        return torch.optim.SGD(params, lr=cfg.lr)
    if cfg.optimizer == "momentum":
        return torch.optim.SGD(params, lr=cfg.lr, momentum=cfg.momentum)
    if cfg.optimizer == "adam":
        return torch.optim.Adam(params, lr=cfg.lr)
    raise ContractError(f"unknown optimizer {cfg.optimizer!r}")


def supervised_warmup(
    policy: Policy,
    rng: np.random.Generator,
    steps: int,
    batch: int = 32,
    lr: float = 3e-3,
    difficulties: Sequence[int] = (1, 2, 3),
    max_operand: int = 99,
) -> list[float]:
    """Teacher-forced training on worked solutions ``prompt + trace + EOS``.

    Stands in for the pretrained backbone an RL run would start from.
    """
    if steps <= 0:
        return []
    opt = torch.optim.Adam(policy.backbone_parameters(), lr=lr)
    losses = []
    for _ in range(steps):
        probs = generate_problems(batch, rng, difficulties, max_operand)
        seqs = [(p.prompt_tokens, encode(solution_trace(p.expression)) + [EOS]) for p in probs]
        L = max(len(a) + len(b) for a, b in seqs)
        if L > policy.cfg.max_seq_len:
            raise ContractError("worked solution longer than the context window")
        buf = torch.full((batch, L), EOS, dtype=torch.long)
        mask = torch.zeros(batch, L, dtype=DTYPE)
        for i, (a, b) in enumerate(seqs):
            buf[i, : len(a) + len(b)] = torch.as_tensor(a + b)
            mask[i, len(a) - 1 : len(a) + len(b) - 1] = 1.0
        logits = policy(buf)
        logp = torch.log_softmax(logits[:, :-1], dim=-1)
        tgt = buf[:, 1:]
        nll = -logp.gather(-1, tgt[..., None])[..., 0]
        loss = (nll * mask[:, :-1]).sum() / mask.sum()
        opt.zero_grad()
        loss.backward()
        opt.step()
        losses.append(float(loss.detach()))
    policy.version += 1
    return losses


class Trainer:
    """Sequences rollout -> branch -> score -> prune -> update for one run."""

    def __init__(self, cfg: TrainConfig, policy: Policy, cvae: Optional[CVAE] = None, rng: Optional[np.random.Generator] = None):
        self.cfg = cfg
        self.plan = resolve_mode(cfg)
        self.policy = policy
        self.cvae = cvae if cvae is not None else CVAE.for_policy(policy, d_enc=cfg.d_enc, seed=cfg.seed, mode=self.plan.injection_mode)
        self.cvae.mode = self.plan.injection_mode
        self.rng = rng if rng is not None else np.random.default_rng(cfg.seed)
        self.history = EntropyHistory(cfg.history_window)
        self.optimizer = build_optimizer(cfg, policy.parameters())
        self.cvae_trainer = CvaeTrainer(self.cvae, policy, cfg.cvae_lr)
        self.iteration = 0
        self.last_sets = []

    def rollout_pool(self, problems: Sequence[Problem]):
        cfg, plan = self.cfg, self.plan
        M = cfg.M
        contexts = [p.prompt_tokens for p in problems for _ in range(M)]
        pids = [i for i in range(len(problems)) for _ in range(M)]
        bases = sample_many(self.policy, contexts, self.rng, cfg.max_new, cfg.temperature, pids)
        self.history.extend(h for b in bases for h in b.entropies)
        groups = [bases[i * M : (i + 1) * M] for i in range(len(problems))]
        sets = expand_many(groups, plan.K, self.cvae, self.policy, self.rng, self.history,
                           cfg.max_new, cfg.temperature, plan.injection_mode)
        for s in sets:
            for t in s.trajectories:
                if t.is_branch:
                    self.history.extend(t.entropies[t.own_start :])
                t.reward = float(verify(problems[t.prompt_id], t.tokens, t.id).reward)
        return bases, sets

    def select(self, sets) -> list[list[Trajectory]]:
        cfg, plan = self.cfg, self.plan
        kept = []
        for s in sets:
            pool = s.trajectories
            adv = group_advantages([t.reward for t in pool]) if len(pool) >= 2 else np.zeros(len(pool))
            for t, a in zip(pool, adv):
                t.advantage = float(a)
            if plan.N is not None:
                R = ibmod.prune(pool, min(plan.N, len(pool)), cfg.ib_normalize)
                if cfg.group_after_prune and len(R) >= 2:
                    for t, a in zip(R, group_advantages([t.reward for t in R])):
                        t.advantage = float(a)
            else:
                R = list(pool)
            s.pruned = R
            kept.append(R)
        return kept

    def step(self, problems: Sequence[Problem]) -> UpdateReport:
        t0 = time.perf_counter()
        cfg, plan = self.cfg, self.plan
        bases, sets = self.rollout_pool(problems)
        kept = self.select(sets)
        batch = [t for R in kept for t in R]

        lps, hs = token_stats(self.policy, batch, cfg.temperature)
        new = torch.cat(lps)
        old = torch.as_tensor(np.concatenate([t.logprobs for t in batch]), dtype=DTYPE)
        adv = torch.as_tensor(np.concatenate([np.full(t.T, t.advantage) for t in batch]), dtype=DTYPE)
        surr = clipped_surrogate(new, old, adv, cfg.eps_low, cfg.eps_high)
        loss = surr
        ib_val = 0.0
        if plan.gamma_ib > 0:
            ib_t = ibmod.ib_objective_from_entropies(hs, [t.advantage for t in batch], cfg.ib_normalize)
            loss = loss - plan.gamma_ib * ib_t
            ib_val = float(ib_t.detach())
        ent_val = float(torch.cat(hs).detach().mean())
        if plan.entropy_coef > 0:
            ent_t = torch.cat(hs).mean()
            loss = loss - plan.entropy_coef * ent_t

        self.optimizer.zero_grad()
        loss.backward()
        grads = [p.grad for p in self.policy.parameters() if p.grad is not None]
        gnorm = float(torch.sqrt(sum((g * g).sum() for g in grads))) if grads else 0.0
        if cfg.max_grad_norm > 0:
            torch.nn.utils.clip_grad_norm_(self.policy.parameters(), cfg.max_grad_norm)
        self.optimizer.step()
        self.policy.version += 1

        if plan.K > 0 and cfg.cvae_steps > 0:
            pairs = []
            for s in sets:
                for b in s.bases():
                    t = s.t_stars.get(b.id)
                    if t is not None:
                        pairs.append((extract_prefix(b, t), b.tokens[t - 1 :]))
            for _ in range(cfg.cvae_steps if pairs else 0):
                self.cvae_trainer.step(pairs, self.rng)

        self.iteration += 1
        self.last_sets = sets
        scores = [ibmod.ib_score(t, cfg.ib_normalize).value for t in batch]
        return UpdateReport(
            iteration=self.iteration,
            mean_reward=float(np.mean([t.reward for t in batch])),
            pass1=float(np.mean([b.reward for b in bases])),
            mean_entropy=float(np.mean(np.concatenate([b.entropies for b in bases]))),
            mean_len=float(np.mean([b.T for b in bases])),
            ib_mean=float(np.mean(scores)),
            loss=float(loss.detach()),
            surrogate=float(surr.detach()),
            ib_term=ib_val,
            entropy_term=ent_val,
            grad_norm=gnorm,
            seconds=time.perf_counter() - t0,
            sampled_tokens=int(sum(t.T - t.own_start for s in sets for t in s.trajectories)),
        )


def train_step(problems, policy, cvae, config: TrainConfig, rng, trainer: Optional[Trainer] = None) -> UpdateReport:
    """One pipeline iteration; pass ``trainer`` to keep history and optimizer state."""
    trainer = trainer or Trainer(config, policy, cvae, rng)
    return trainer.step(problems)


@dataclass
class RunResult:
    policy: Policy
    cvae: CVAE
    reports: list[UpdateReport]
    train_problems: list[Problem]


def prepare_policy(cfg: TrainConfig, rng: np.random.Generator) -> Policy:
    policy = Policy(cfg.model_config(), seed=cfg.seed)
    supervised_warmup(policy, rng, cfg.sft_steps, cfg.sft_batch, cfg.sft_lr, cfg.difficulty_levels, cfg.max_operand)
    return policy


def prepare_problems(cfg: TrainConfig, policy: Policy, rng: np.random.Generator) -> list[Problem]:
    from .tasks import FrontierEmpty, filter_dataset

    pool = generate_problems(cfg.train_pool, rng, cfg.difficulty_levels, cfg.max_operand)
    if not cfg.filter_data:
        return pool
    try:
        return filter_dataset(pool, policy, rng, cfg.n_probe, cfg.max_new, cfg.temperature)
    except FrontierEmpty:
        return pool


def run_training(cfg: TrainConfig, policy: Optional[Policy] = None, problems: Optional[list[Problem]] = None,
                 on_report=None) -> RunResult:
    """Warm start (unless ``policy`` is given), filter data, then iterate.

    With ``token_budget`` set, iteration stops at the first step that brings
    the sampled-token count to the budget or beyond.
    """
    reset_ids()
    rng = np.random.default_rng(cfg.seed)
    if policy is None:
        policy = prepare_policy(cfg, rng)
    if problems is None:
        problems = prepare_problems(cfg, policy, rng)
    trainer = Trainer(cfg, policy, rng=rng)
    reports = []
    spent = 0
    for _ in range(cfg.iterations):
        if cfg.token_budget and spent >= cfg.token_budget:
            break
        idx = rng.integers(len(problems), size=cfg.batch_prompts)
        rep = trainer.step([problems[i] for i in idx])
        spent += rep.sampled_tokens
        reports.append(rep)
        if on_report is not None:
            on_report(rep)
    return RunResult(policy, trainer.cvae, reports, problems)
