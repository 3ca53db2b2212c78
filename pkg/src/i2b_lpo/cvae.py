"""Conditional VAE over bifurcation contexts.

Contexts and continuations are summarised by mean-pooling the frozen
policy's final hidden states; small affine heads map the summaries to
diagonal Gaussians for the prior p(z|c) and the posterior q(z|x,c).  The
decoder is the policy itself with the latent injected.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
import torch
from torch import nn

from .model import BatchInjection, InjectionState, Policy, read_container, write_container
from .numerics import DTYPE, ShapeError, log_softmax
from .records import LatentCode
from .tokens import EOS

LOGVAR_MIN, LOGVAR_MAX = -10.0, 10.0


@dataclass
class GaussianParams:
    mu: torch.Tensor
    logvar: torch.Tensor

    def __post_init__(self):
        self.mu = torch.as_tensor(self.mu, dtype=DTYPE)
        self.logvar = torch.clamp(torch.as_tensor(self.logvar, dtype=DTYPE), LOGVAR_MIN, LOGVAR_MAX)


def _linear(n_in: int, n_out: int, g: torch.Generator) -> nn.Linear:
    lin = nn.Linear(n_in, n_out, dtype=DTYPE)
    with torch.no_grad():
        lin.weight.copy_(torch.randn(n_out, n_in, generator=g, dtype=DTYPE) / np.sqrt(n_in))
        lin.bias.zero_()
    return lin


class CVAE(nn.Module):
    def __init__(self, d_model: int, d_z: int, d_enc: int = 32, seed: int = 0, mode: str = "psa"):
        super().__init__()
        g = torch.Generator().manual_seed(seed + 7919)
        self.d_model, self.d_z, self.d_enc, self.mode = d_model, d_z, d_enc, mode
        self.ctx_map = _linear(d_model, d_enc, g)
        self.cont_map = _linear(d_model, d_enc, g)
        self.prior_mu = _linear(d_enc, d_z, g)
        self.prior_logvar = _linear(d_enc, d_z, g)
        self.post_mu = _linear(2 * d_enc, d_z, g)
        self.post_logvar = _linear(2 * d_enc, d_z, g)
        with torch.no_grad():
            for lin in (self.prior_logvar, self.post_logvar):
                lin.weight.mul_(0.1)

    @classmethod
    def for_policy(cls, policy: Policy, **kw) -> "CVAE":
        return cls(policy.cfg.d_model, policy.cfg.d_z, **kw)

    def entries(self) -> dict[str, np.ndarray]:
        out = {f"cvae.{k}": v.detach().numpy() for k, v in self.state_dict().items()}
        out["cvae_config.d_model"] = np.asarray(self.d_model, dtype=np.float64)
        out["cvae_config.d_z"] = np.asarray(self.d_z, dtype=np.float64)
        out["cvae_config.d_enc"] = np.asarray(self.d_enc, dtype=np.float64)
        return out

    @classmethod
    def from_entries(cls, entries: dict[str, np.ndarray], mode: str = "psa") -> "CVAE":
        m = cls(int(entries["cvae_config.d_model"]), int(entries["cvae_config.d_z"]), int(entries["cvae_config.d_enc"]), mode=mode)
        m.load_state_dict({k[5:]: torch.from_numpy(v) for k, v in entries.items() if k.startswith("cvae.")})
        return m

    def save(self, path) -> None:
        write_container(path, self.entries())

    @classmethod
    def load(cls, path, mode: str = "psa") -> "CVAE":
        return cls.from_entries(read_container(path), mode=mode)


def mean_pool(hidden: torch.Tensor, mask: torch.Tensor | None = None) -> torch.Tensor:
    """Mean over the sequence axis (-2), optionally restricted by a 0/1 mask."""
    if mask is None:
        return hidden.mean(dim=-2)
    m = mask.to(DTYPE)[..., None]
    return (hidden * m).sum(dim=-2) / m.sum(dim=-2)


def _pooled_hidden(policy: Policy, seqs: Sequence[Sequence[int]], spans: Sequence[tuple[int, int]]) -> torch.Tensor:
    L = max(len(s) for s in seqs)
    buf = torch.full((len(seqs), L), EOS, dtype=torch.long)
    mask = torch.zeros(len(seqs), L)
    for i, (s, (a, b)) in enumerate(zip(seqs, spans)):
        buf[i, : len(s)] = torch.as_tensor(list(s))
        mask[i, a:b] = 1
    with torch.no_grad():
        _, hidden = policy(buf, return_hidden=True)
    return mean_pool(hidden, mask)


def encode_context(contexts, cvae: CVAE, policy: Policy) -> torch.Tensor:
    """Pooled frozen-policy hidden states of each context, affinely mapped.

    Accepts one token sequence or a list of them; returns (d_enc,) or
    (B, d_enc) accordingly.
    """
    single = len(contexts) > 0 and np.isscalar(contexts[0])
    seqs = [list(contexts)] if single else [list(c) for c in contexts]
    pooled = _pooled_hidden(policy, seqs, [(0, len(s)) for s in seqs])
    out = cvae.ctx_map(pooled)
    return out[0] if single else out


def encode_continuation(contexts, continuations, cvae: CVAE, policy: Policy) -> torch.Tensor:
    seqs = [list(c) + list(x) for c, x in zip(contexts, continuations)]
    spans = [(len(c), len(c) + len(x)) for c, x in zip(contexts, continuations)]
    return cvae.cont_map(_pooled_hidden(policy, seqs, spans))


def prior(context_vec: torch.Tensor, cvae: CVAE) -> GaussianParams:
    return GaussianParams(cvae.prior_mu(context_vec), cvae.prior_logvar(context_vec))


def posterior(context_vec: torch.Tensor, cont_vec: torch.Tensor, cvae: CVAE) -> GaussianParams:
    x = torch.cat([context_vec, cont_vec], dim=-1)
    return GaussianParams(cvae.post_mu(x), cvae.post_logvar(x))


def reparameterize(g: GaussianParams, eps) -> torch.Tensor:
    """z = mu + exp(logvar / 2) * eps."""
    eps = torch.as_tensor(eps, dtype=DTYPE)
    if eps.shape[-1] != g.mu.shape[-1]:
        raise ShapeError("noise dimension does not match the latent dimension")
    return g.mu + torch.exp(0.5 * g.logvar) * eps


def kl_divergence(q: GaussianParams, p: GaussianParams) -> torch.Tensor:
    """KL(q || p) for diagonal Gaussians, summed over the last axis."""
    if q.mu.shape[-1] != p.mu.shape[-1]:
        raise ShapeError("latent dimensions differ")
    var_ratio = torch.exp(q.logvar - p.logvar)
    diff = (q.mu - p.mu) ** 2 * torch.exp(-p.logvar)
    return 0.5 * (var_ratio + diff - 1.0 - (q.logvar - p.logvar)).sum(dim=-1)


def sample_latents(context, K: int, cvae: CVAE, policy: Policy, rng: np.random.Generator) -> list[LatentCode]:
    """K independent prior draws for one bifurcation context."""
    return sample_latents_many([context], K, cvae, policy, rng)[0]


def sample_latents_many(contexts, K: int, cvae: CVAE, policy: Policy, rng: np.random.Generator) -> list[list[LatentCode]]:
    if K < 1:
        raise ValueError("K must be at least 1")
    with torch.no_grad():
        g = prior(encode_context([list(c) for c in contexts], cvae, policy), cvae)
        eps = torch.as_tensor(rng.standard_normal((len(contexts), K, cvae.d_z)), dtype=DTYPE)
        z = g.mu[:, None, :] + torch.exp(0.5 * g.logvar)[:, None, :] * eps
    return [[LatentCode(z[i, j].numpy(), "prior", j + 1) for j in range(K)] for i in range(len(contexts))]


@dataclass
class ElboTerms:
    loss: torch.Tensor
    reconstruction: torch.Tensor
    kl: torch.Tensor


def elbo_loss(
    batch: Sequence[tuple[Sequence[int], Sequence[int]]],
    cvae: CVAE,
    policy: Policy,
    eps: np.ndarray,
    force_prior: bool = False,
    kl_weight: float = 1.0,
) -> ElboTerms:
    """Negative ELBO averaged over the batch.

    Reconstruction is the negative log-likelihood of each continuation under
    the policy with the posterior sample injected from the split point on.
    ``force_prior`` uses the prior as the posterior (KL term exactly 0).
    """
    ctx = [list(c) for c, _ in batch]
    cont = [list(x) for _, x in batch]
    c_vec = encode_context(ctx, cvae, policy)
    p = prior(c_vec, cvae)
    q = p if force_prior else posterior(c_vec, encode_continuation(ctx, cont, cvae, policy), cvae)
    z = reparameterize(q, eps)
    seqs = [c + x for c, x in zip(ctx, cont)]
    L = max(len(s) for s in seqs)
    buf = torch.full((len(seqs), L), EOS, dtype=torch.long)
    for i, s in enumerate(seqs):
        buf[i, : len(s)] = torch.as_tensor(s)
    start = torch.tensor([len(c) - 1 for c in ctx], dtype=torch.long)
    logits = policy(buf, BatchInjection(cvae.mode, z, start))
    logp = log_softmax(logits)
    nll = []
    for i, (c, x) in enumerate(zip(ctx, cont)):
        rows = logp[i, len(c) - 1 : len(c) - 1 + len(x)]
        nll.append(-rows.gather(-1, torch.as_tensor(x)[:, None]).sum())
    recon = torch.stack(nll).mean()
    kl = kl_divergence(q, p).mean()
    return ElboTerms(recon + kl_weight * kl, recon, kl)


class CvaeTrainer:
    """Gradient descent on CVAE heads plus the policy's injection maps.

    The policy backbone is frozen: only ``cvae.parameters()`` and
    ``policy.injection_parameters()`` receive updates.
    """

    def __init__(self, cvae: CVAE, policy: Policy, lr: float = 0.02, train_injection: bool = True):
        self.cvae, self.policy, self.lr = cvae, policy, lr
        self.params = list(cvae.parameters()) + (policy.injection_parameters() if train_injection else [])

    def step(self, batch, rng: np.random.Generator, force_prior: bool = False) -> ElboTerms:
        eps = rng.standard_normal((len(batch), self.cvae.d_z))
        terms = elbo_loss(batch, self.cvae, self.policy, eps, force_prior=force_prior)
        grads = torch.autograd.grad(terms.loss, self.params, allow_unused=True)
        with torch.no_grad():
            for p, g in zip(self.params, grads):
                if g is not None:
                    p.sub_(self.lr * g)
        return ElboTerms(terms.loss.detach(), terms.reconstruction.detach(), terms.kl.detach())


def elbo_step(batch, cvae: CVAE, policy: Policy, rng: np.random.Generator, lr: float = 0.02) -> ElboTerms:
    """One ELBO gradient step; returns the pre-step loss decomposition."""
    return CvaeTrainer(cvae, policy, lr).step(batch, rng)
