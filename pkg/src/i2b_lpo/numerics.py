"""Dense float64 tensor substrate.

Tensors are ``torch.Tensor`` objects in double precision; the autograd tape
is torch's.  This module adds the few primitives the rest of the package
relies on plus a central-difference gradient checker used as a test oracle.
"""

from __future__ import annotations

from typing import Callable

import numpy as np
import torch

DTYPE = torch.float64
RMS_EPS = 1e-6

Tensor = torch.Tensor


class NumericInputError(ValueError):
    """Raised when an input contains NaN or infinite values."""


class ShapeError(ValueError):
    """Raised when tensor shapes do not agree."""


class ContractError(ValueError):
    """Raised when an operation's precondition is violated."""


def as_tensor(x, requires_grad: bool = False) -> Tensor:
    t = torch.as_tensor(x, dtype=DTYPE)
    if requires_grad:
        t = t.detach().clone().requires_grad_(True)
    return t


def softmax(logits, dim: int = -1) -> Tensor:
    """Max-subtracted softmax along ``dim``.

    Raises NumericInputError on NaN/Inf input and ContractError on empty input.
    """
    x = as_tensor(logits)
    if x.numel() == 0 or x.shape[dim] == 0:
        raise ContractError("softmax of an empty vector")
    if not torch.isfinite(x).all():
        raise NumericInputError("softmax input must be finite")
    shifted = x - x.max(dim=dim, keepdim=True).values
    e = torch.exp(shifted)
    return e / e.sum(dim=dim, keepdim=True)


def log_softmax(logits, dim: int = -1) -> Tensor:
    x = as_tensor(logits)
    shifted = x - x.max(dim=dim, keepdim=True).values.detach()
    return shifted - torch.logsumexp(shifted, dim=dim, keepdim=True)


def rms_normalize(x, w, eps: float = RMS_EPS) -> Tensor:
    """``w * x / sqrt(mean(x**2) + eps)`` over the last axis.

    ``w`` broadcasts against ``x``; a per-position scale of the same shape as
    ``x`` is allowed (used by latent norm modulation).
    """
    x = as_tensor(x)
    w = as_tensor(w)
    if w.shape[-1] != x.shape[-1]:
        raise ShapeError(f"scale length {w.shape[-1]} != input length {x.shape[-1]}")
    inv = torch.rsqrt((x * x).mean(dim=-1, keepdim=True) + eps)
    return w * (x * inv)


def backward(loss: Tensor, retain_graph: bool = False) -> None:
    """Populate ``.grad`` on every leaf reachable from a scalar ``loss``.

    Gradients accumulate across calls until the leaves are reset.
    """
    if loss.dim() != 0 and loss.numel() != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {tuple(loss.shape)}")
    loss.reshape(()).backward(retain_graph=retain_graph)


def finite_difference_check(
    f: Callable[[Tensor], Tensor],
    theta,
    step: float = 1e-6,
    analytic: Tensor | None = None,
) -> float:
    """Max over coordinates of ``|g - g_fd| / max(1, |g|)``.

    ``g`` is the autograd gradient of ``f`` at ``theta`` unless ``analytic``
    is supplied; ``g_fd`` is the central difference with the given step.
    NaN in either route propagates to the return value.
    """
    theta = as_tensor(theta).detach().clone()
    if analytic is None:
        th = theta.clone().requires_grad_(True)
        out = f(th)
        (g,) = torch.autograd.grad(out, th, allow_unused=True)
        g = torch.zeros_like(theta) if g is None else g.detach()
    else:
        g = as_tensor(analytic).reshape(theta.shape)
    flat = theta.reshape(-1)
    fd = torch.empty_like(flat)
    with torch.no_grad():
        for i in range(flat.numel()):
            plus = flat.clone()
            plus[i] += step
            minus = flat.clone()
            minus[i] -= step
            fp = float(f(plus.reshape(theta.shape)))
            fm = float(f(minus.reshape(theta.shape)))
            fd[i] = (fp - fm) / (2.0 * step)
    g = g.reshape(-1)
    err = (g - fd).abs() / torch.clamp(g.abs(), min=1.0)
    if torch.isnan(err).any():
        return float("nan")
    return float(err.max()) if err.numel() else 0.0


def module_gradcheck(
    loss_fn: Callable[[], Tensor],
    params: dict[str, Tensor],
    step: float = 1e-6,
    max_coords: int | None = None,
    rng: np.random.Generator | None = None,
) -> dict[str, float]:
    """Finite-difference check of ``loss_fn`` against every tensor in ``params``.

    The tensors are perturbed in place and restored.  With ``max_coords``
    set, a random subset of coordinates per tensor is probed.
    Returns the max relative error per parameter name.
    """
    rng = rng or np.random.default_rng(0)
    for p in params.values():
        p.grad = None
    loss = loss_fn()
    grads = torch.autograd.grad(loss, list(params.values()), allow_unused=True)
    report: dict[str, float] = {}
    with torch.no_grad():
        for (name, p), g in zip(params.items(), grads):
            g = torch.zeros_like(p) if g is None else g
            flat = p.view(-1)
            gflat = g.reshape(-1)
            idx = np.arange(flat.numel())
            if max_coords is not None and flat.numel() > max_coords:
                idx = rng.choice(flat.numel(), size=max_coords, replace=False)
            worst = 0.0
            for i in idx:
                orig = float(flat[i])
                flat[i] = orig + step
                fp = float(loss_fn())
                flat[i] = orig - step
                fm = float(loss_fn())
                flat[i] = orig
                fd = (fp - fm) / (2.0 * step)
                a = float(gflat[i])
                e = abs(a - fd) / max(1.0, abs(a))
                if np.isnan(e):
                    worst = float("nan")
                    break
                worst = max(worst, e)
            report[name] = worst
    return report
