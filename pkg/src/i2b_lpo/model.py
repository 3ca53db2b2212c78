"""Decoder-only transformer policy with latent injection pathways.

Three ways of conditioning generation on a latent code ``z`` are supported:

* ``psa``: pseudo self-attention.  In every layer listed in
  ``ModelConfig.psa_layers`` the attention-input RMSNorm scale becomes
  ``w + gamma(t) * Proj(z)`` and one latent-derived key/value row is
  prepended to the keys and values of every head.  The pseudo row is visible
  to all query positions and carries no position embedding.
* ``input_fusion``: a projection of ``z`` is added to every input embedding.
* ``logit_fusion``: a projection of ``z`` is added to every output logit row.

The pseudo slot has a learned scalar gate ``g`` that multiplies its
unnormalised attention weight by ``g**2``.  With ``g = 1`` (the initial value)
the attention is exactly ``softmax(Q K'^T / sqrt(d)) V'``; with ``g = 0`` the
slot is removed and the plain pass is reproduced bit for bit.
"""

from __future__ import annotations

import io
import math
import struct
from dataclasses import asdict, dataclass, field
from typing import Optional, Sequence

import numpy as np
import torch
from torch import nn

from .numerics import DTYPE, RMS_EPS, ContractError, ShapeError, log_softmax, rms_normalize
from .records import LatentCode
from .tokens import VOCAB_SIZE, VocabularyError

MODES = ("none", "psa", "input_fusion", "logit_fusion")


class CapacityError(ValueError):
    """Sequence longer than the model's context window."""


@dataclass
class ModelConfig:
    vocab_size: int = VOCAB_SIZE
    d_model: int = 64
    n_layers: int = 4
    n_heads: int = 4
    max_seq_len: int = 128
    psa_layers: Optional[tuple[int, ...]] = None  # None -> last half of the layers
    d_z: int = 16
    d_ff: Optional[int] = None
    gamma0: float = 5e-2
    gamma_floor: float = 5e-4
    decay_steps: int = 16

    def __post_init__(self):
        if self.psa_layers is None:
            self.psa_layers = tuple(range(self.n_layers // 2, self.n_layers))
        self.psa_layers = tuple(sorted(int(i) for i in self.psa_layers))
        if self.d_ff is None:
            self.d_ff = 4 * self.d_model
        if self.d_model % self.n_heads:
            raise ContractError("n_heads must divide d_model")
        if any(not 0 <= i < self.n_layers for i in self.psa_layers):
            raise ContractError("psa_layers must lie in [0, n_layers)")
        if self.d_z <= 0:
            raise ContractError("d_z must be positive")

    @property
    def d_head(self) -> int:
        return self.d_model // self.n_heads


def decay_factor(t, gamma0: float = 5e-2, floor: float = 5e-4, steps: int = 16):
    """Injection strength gamma(t): exponential anneal from gamma0 to floor.

    The floor is reached exactly at ``t = steps`` and held afterwards.  Works
    elementwise on integer tensors as well as on plain ints.
    """
    if gamma0 == 0.0:
        return torch.zeros_like(t, dtype=DTYPE) if torch.is_tensor(t) else 0.0
    ratio = (floor / gamma0) ** (1.0 / steps)
    if torch.is_tensor(t):
        g = gamma0 * torch.pow(torch.tensor(ratio, dtype=DTYPE), t.to(DTYPE))
        g = torch.clamp(g, min=floor)
        return torch.where(t >= steps, torch.full_like(g, floor), g)
    if t >= steps:
        return floor
    return max(gamma0 * ratio**t, floor)


@dataclass
class InjectionState:
    """Latent conditioning for one sequence.

    ``start`` is the absolute row whose logits predict the first token generated
    under the latent; the decay clock for row ``p`` is ``max(0, p - start)``.
    """

    mode: str = "none"
    latent: Optional[LatentCode] = None
    start: int = 0

    def __post_init__(self):
        if self.mode not in MODES:
            raise ContractError(f"unknown injection mode {self.mode!r}")
        if (self.mode == "none") != (self.latent is None):
            raise ContractError("mode 'none' iff no latent")

    @staticmethod
    def none() -> "InjectionState":
        return InjectionState()


@dataclass
class BatchInjection:
    """Batched injection: one latent and decay origin per row of the batch."""

    mode: str
    z: torch.Tensor  # (B, d_z)
    start: torch.Tensor  # (B,) long

    @staticmethod
    def stack(states: Sequence[InjectionState]) -> Optional["BatchInjection"]:
        modes = {s.mode for s in states}
        if modes == {"none"}:
            return None
        if len(modes) != 1:
            raise ContractError("a batch must share one injection mode")
        z = torch.as_tensor(np.stack([s.latent.z for s in states]), dtype=DTYPE)
        start = torch.tensor([s.start for s in states], dtype=torch.long)
        return BatchInjection(modes.pop(), z, start)


class Block(nn.Module):
    def __init__(self, cfg: ModelConfig, psa: bool):
        super().__init__()
        d, f = cfg.d_model, cfg.d_ff
        self.psa = psa
        self.n_heads = cfg.n_heads
        self.norm1 = nn.Parameter(torch.ones(d, dtype=DTYPE))
        self.wq = nn.Parameter(torch.empty(d, d, dtype=DTYPE))
        self.wk = nn.Parameter(torch.empty(d, d, dtype=DTYPE))
        self.wv = nn.Parameter(torch.empty(d, d, dtype=DTYPE))
        self.wo = nn.Parameter(torch.empty(d, d, dtype=DTYPE))
        self.norm2 = nn.Parameter(torch.ones(d, dtype=DTYPE))
        self.w1 = nn.Parameter(torch.empty(f, d, dtype=DTYPE))
        self.b1 = nn.Parameter(torch.zeros(f, dtype=DTYPE))
        self.w2 = nn.Parameter(torch.empty(d, f, dtype=DTYPE))
        if psa:
            self.proj_phi = nn.Parameter(torch.empty(d, cfg.d_z, dtype=DTYPE))
            self.wkz = nn.Parameter(torch.empty(d, cfg.d_z, dtype=DTYPE))
            self.wvz = nn.Parameter(torch.empty(d, cfg.d_z, dtype=DTYPE))
            self.gate = nn.Parameter(torch.ones((), dtype=DTYPE))


class Policy(nn.Module):
    """Parameters of the policy; ``version`` counts optimizer steps."""

    def __init__(self, cfg: ModelConfig, seed: int = 0):
        super().__init__()
        self.cfg = cfg
        d, V = cfg.d_model, cfg.vocab_size
        self.tok_emb = nn.Parameter(torch.empty(V, d, dtype=DTYPE))
        self.pos_emb = nn.Parameter(torch.empty(cfg.max_seq_len, d, dtype=DTYPE))
        self.blocks = nn.ModuleList(Block(cfg, i in cfg.psa_layers) for i in range(cfg.n_layers))
        self.norm_f = nn.Parameter(torch.ones(d, dtype=DTYPE))
        self.head = nn.Parameter(torch.empty(V, d, dtype=DTYPE))
        self.fusion_in = nn.Parameter(torch.empty(d, cfg.d_z, dtype=DTYPE))
        self.fusion_logit = nn.Parameter(torch.empty(V, cfg.d_z, dtype=DTYPE))
        self.version = 0
        self.reset_parameters(seed)

    def reset_parameters(self, seed: int) -> None:
        g = torch.Generator().manual_seed(seed)
        d = self.cfg.d_model
        std = 0.02
        resid_std = std / math.sqrt(2 * self.cfg.n_layers)
        with torch.no_grad():
            for name, p in self.named_parameters():
                leaf = name.rsplit(".", 1)[-1]
                if leaf.startswith("norm") or leaf in ("b1",):
                    continue
                if leaf == "gate":
                    p.fill_(1.0)
                elif leaf in ("wo", "w2"):
                    p.copy_(torch.randn(p.shape, generator=g, dtype=DTYPE) * resid_std)
                elif leaf in ("proj_phi", "wkz", "wvz", "fusion_in", "fusion_logit"):
                    p.copy_(torch.randn(p.shape, generator=g, dtype=DTYPE) / math.sqrt(self.cfg.d_z))
                elif leaf in ("tok_emb", "pos_emb", "head"):
                    p.copy_(torch.randn(p.shape, generator=g, dtype=DTYPE) * 0.1)
                else:
                    p.copy_(torch.randn(p.shape, generator=g, dtype=DTYPE) / math.sqrt(d))

    # parameter groups -------------------------------------------------
    INJECTION_LEAVES = ("proj_phi", "wkz", "wvz", "gate", "fusion_in", "fusion_logit")

    def injection_parameters(self) -> list[nn.Parameter]:
        return [p for n, p in self.named_parameters() if n.rsplit(".", 1)[-1] in self.INJECTION_LEAVES]

    def backbone_parameters(self) -> list[nn.Parameter]:
        return [p for n, p in self.named_parameters() if n.rsplit(".", 1)[-1] not in self.INJECTION_LEAVES]

    def zero_injection_(self) -> None:
        """Zero every injection weight, including the pseudo-slot gates."""
        with torch.no_grad():
            for p in self.injection_parameters():
                p.zero_()

    # forward ----------------------------------------------------------
    def forward(
        self,
        tokens,
        injection: InjectionState | BatchInjection | None = None,
        return_hidden: bool = False,
        return_heads: bool = False,
    ):
        tokens = torch.as_tensor(tokens, dtype=torch.long)
        single = tokens.dim() == 1
        if single:
            tokens = tokens[None]
        B, L = tokens.shape
        cfg = self.cfg
        if L > cfg.max_seq_len:
            raise CapacityError(f"sequence length {L} exceeds max_seq_len {cfg.max_seq_len}")
        if L == 0:
            raise ContractError("empty token sequence")
        if int(tokens.min()) < 0 or int(tokens.max()) >= cfg.vocab_size:
            raise VocabularyError("token id outside the vocabulary")
        inj = injection
        if isinstance(inj, InjectionState):
            inj = BatchInjection.stack([inj] * B)
        if inj is not None and inj.z.shape != (B, cfg.d_z):
            raise ShapeError(f"latent batch shape {tuple(inj.z.shape)} != {(B, cfg.d_z)}")
        mode = inj.mode if inj is not None else "none"

        h = self.tok_emb[tokens] + self.pos_emb[:L]
        if mode == "input_fusion":
            h = input_fusion(h, inj.z @ self.fusion_in.T)

        gamma = None
        if mode == "psa":
            rows = torch.arange(L)[None, :] - inj.start[:, None]
            gamma = decay_factor(rows.clamp(min=0), cfg.gamma0, cfg.gamma_floor, cfg.decay_steps)

        heads_out = []
        for block in self.blocks:
            use_psa = mode == "psa" and block.psa
            if use_psa:
                shift = inj.z @ block.proj_phi.T  # (B, d)
                xn = modulated_norm(h, block.norm1, shift[:, None, :], gamma[:, :, None])
            else:
                xn = rms_normalize(h, block.norm1)
            q = _split(xn @ block.wq.T, block.n_heads)
            k = _split(xn @ block.wk.T, block.n_heads)
            v = _split(xn @ block.wv.T, block.n_heads)
            if use_psa:
                kz = _split((inj.z @ block.wkz.T)[:, None, :], block.n_heads)
                vz = _split((inj.z @ block.wvz.T)[:, None, :], block.n_heads)
                att = psa_attention(q, k, v, kz, vz, block.gate, causal=True)
            else:
                att = causal_attention(q, k, v)
            if return_heads:
                heads_out.append(att.transpose(1, 2))  # (B, L, H, dh)
            h = h + _merge(att) @ block.wo.T
            xn = rms_normalize(h, block.norm2)
            h = h + torch.nn.functional.gelu(xn @ block.w1.T + block.b1) @ block.w2.T
        hidden = rms_normalize(h, self.norm_f)
        logits = hidden @ self.head.T
        if mode == "logit_fusion":
            logits = logit_fusion(logits, (inj.z @ self.fusion_logit.T)[:, None, :])

        if single:
            logits, hidden = logits[0], hidden[0]
            heads_out = [x[0] for x in heads_out]
        if not (return_hidden or return_heads):
            return logits
        out = [logits]
        if return_hidden:
            out.append(hidden)
        if return_heads:
            out.append(heads_out)
        return tuple(out)


def _split(x: torch.Tensor, n_heads: int) -> torch.Tensor:
    B, L, D = x.shape
    return x.view(B, L, n_heads, D // n_heads).transpose(1, 2)


def _merge(x: torch.Tensor) -> torch.Tensor:
    B, H, L, dh = x.shape
    return x.transpose(1, 2).reshape(B, L, H * dh)


def _causal_scores(q, k):
    L, S = q.shape[-2], k.shape[-2]
    scores = (q @ k.transpose(-1, -2)) / math.sqrt(q.shape[-1])
    mask = torch.ones(L, S, dtype=torch.bool).triu(1 + S - L)
    return scores.masked_fill(mask, float("-inf"))


def causal_attention(q, k, v, causal: bool = True):
    """Plain scaled dot-product attention over (..., L, d) tensors."""
    scores = _causal_scores(q, k) if causal else (q @ k.transpose(-1, -2)) / math.sqrt(q.shape[-1])
    m = scores.amax(dim=-1, keepdim=True)
    e = torch.exp(scores - m)
    return (e @ v) / e.sum(dim=-1, keepdim=True)


def psa_attention(q, k, v, kz, vz, gate=1.0, causal: bool = True):
    """Attention with one latent pseudo key/value row prepended.

    ``q, k, v`` are (..., l, d); ``kz, vz`` are (..., 1, d).  The pseudo row is
    exempt from the causal mask.  Its unnormalised weight is scaled by
    ``gate**2``; gate 1 is the ungated form, gate 0 removes the slot exactly.
    """
    q, k, v = (torch.as_tensor(t, dtype=DTYPE) for t in (q, k, v))
    kz, vz = torch.as_tensor(kz, dtype=DTYPE), torch.as_tensor(vz, dtype=DTYPE)
    if kz.shape[-1] != k.shape[-1] or vz.shape[-1] != v.shape[-1] or kz.shape[-2] != 1:
        raise ShapeError("pseudo key/value must be single rows matching the head width")
    gate = torch.as_tensor(gate, dtype=DTYPE)
    scores = _causal_scores(q, k) if causal else (q @ k.transpose(-1, -2)) / math.sqrt(q.shape[-1])
    m_real = scores.amax(dim=-1, keepdim=True)
    s_z = (q * kz).sum(dim=-1, keepdim=True) / math.sqrt(q.shape[-1]) + torch.log(gate * gate)
    m = torch.maximum(m_real, s_z)
    e = torch.exp(scores - m)
    e_z = torch.exp(s_z - m)
    return (e @ v + e_z * vz) / (e.sum(dim=-1, keepdim=True) + e_z)


def modulated_norm(x, w, shift, gamma):
    """RMSNorm with scale ``w + gamma * shift`` (shift = Proj(z))."""
    return rms_normalize(x, w + gamma * shift)


def input_fusion(embeddings, z_proj):
    """Add the projected latent to every position's input embedding."""
    e = torch.as_tensor(embeddings, dtype=DTYPE)
    zp = torch.as_tensor(z_proj, dtype=DTYPE)
    if zp.dim() == e.dim() - 1:
        zp = zp.unsqueeze(-2)
    return e + zp


def logit_fusion(logits, p_z):
    """Superimpose a latent logit adjustment on every output row."""
    return torch.as_tensor(logits, dtype=DTYPE) + torch.as_tensor(p_z, dtype=DTYPE)


def token_entropy(logits_row) -> torch.Tensor:
    """Shannon entropy (nats) of softmax over the last axis."""
    logp = log_softmax(logits_row)
    return -(torch.exp(logp) * logp).sum(dim=-1)


# checkpoints ----------------------------------------------------------------
#
# Container layout (little endian):
#   magic  b"I2BCKPT1"
#   uint32 entry count
#   per entry, sorted by name:
#     uint16 name length, utf-8 name bytes
#     uint8  ndim, ndim x uint32 dims
#     prod(dims) float64 values, row major
# Model hyperparameters are stored as entries named "config.<field>".

MAGIC = b"I2BCKPT1"


def write_container(path, entries: dict[str, np.ndarray]) -> None:
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<I", len(entries)))
    for name in sorted(entries):
        arr = np.array(entries[name], dtype="<f8", order="C")
        nb = name.encode("utf-8")
        buf.write(struct.pack("<H", len(nb)))
        buf.write(nb)
        buf.write(struct.pack("<B", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        buf.write(arr.tobytes())
    with open(path, "wb") as fh:
        fh.write(buf.getvalue())


def read_container(path) -> dict[str, np.ndarray]:
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:8] != MAGIC:
        raise ValueError(f"{path}: not a checkpoint container")
    (count,) = struct.unpack_from("<I", data, 8)
    off = 12
    out = {}
    for _ in range(count):
        (n,) = struct.unpack_from("<H", data, off)
        off += 2
        name = data[off : off + n].decode("utf-8")
        off += n
        (ndim,) = struct.unpack_from("<B", data, off)
        off += 1
        shape = struct.unpack_from(f"<{ndim}I", data, off)
        off += 4 * ndim
        size = int(np.prod(shape)) if ndim else 1
        out[name] = np.frombuffer(data, dtype="<f8", count=size, offset=off).reshape(shape).copy()
        off += 8 * size
    return out


def config_entries(cfg: ModelConfig, prefix: str = "config.") -> dict[str, np.ndarray]:
    out = {}
    for k, v in asdict(cfg).items():
        out[prefix + k] = np.asarray(v if v is not None else [], dtype=np.float64)
    return out


def config_from_entries(entries: dict[str, np.ndarray], prefix: str = "config.") -> ModelConfig:
    kw = {}
    for f in ModelConfig.__dataclass_fields__.values():
        arr = entries[prefix + f.name]
        if f.name == "psa_layers":
            kw[f.name] = tuple(int(x) for x in arr.reshape(-1))
        elif f.name in ("gamma0", "gamma_floor"):
            kw[f.name] = float(arr)
        else:
            kw[f.name] = int(arr)
    return ModelConfig(**kw)


def policy_entries(policy: Policy) -> dict[str, np.ndarray]:
    out = config_entries(policy.cfg)
    out["version"] = np.asarray(policy.version, dtype=np.float64)
    for name, p in policy.named_parameters():
        out["policy." + name] = p.detach().numpy()
    return out


def load_policy_entries(entries: dict[str, np.ndarray]) -> Policy:
    policy = Policy(config_from_entries(entries))
    with torch.no_grad():
        for name, p in policy.named_parameters():
            p.copy_(torch.from_numpy(entries["policy." + name]))
    policy.version = int(entries.get("version", 0))
    return policy


def save_policy(policy: Policy, path, extra: dict[str, np.ndarray] | None = None) -> None:
    entries = policy_entries(policy)
    if extra:
        entries.update(extra)
    write_container(path, entries)


def load_policy(path) -> Policy:
    return load_policy_entries(read_container(path))
