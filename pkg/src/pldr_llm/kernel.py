"""Numeric kernel: differentiable primitives used throughout the model.

Tensors are ``torch.Tensor`` and the reverse-mode tape is torch autograd.
The matrix-exponential trace carries its own forward algorithm and
vector-Jacobian rule; everything else is composed from torch ops.
"""

from __future__ import annotations

import math
from typing import Callable, Optional, Sequence

import torch

from .errors import ContractError, DimensionError, InputError

DEFAULT_POWER_FLOOR = 1e-12

# Taylor degree applied after scaling the argument to 1-norm <= 1.
# Truncation error is bounded by 1/(TAYLOR_DEGREE + 1)! ~ 8e-18.
TAYLOR_DEGREE = 18


def _check_square(m: torch.Tensor) -> None:
    if m.dim() < 2 or m.shape[-1] != m.shape[-2]:
        raise DimensionError(f"expected (..., d, d) square matrices, got shape {tuple(m.shape)}")


def _expm_scaled_squared(m: torch.Tensor) -> torch.Tensor:
    """e^m for a batch of square matrices by scaling-and-squaring.

    Each matrix gets its own squaring count s = ceil(log2(||m||_1)), so the
    Taylor polynomial is only ever evaluated on arguments with norm <= 1.
    """
    d = m.shape[-1]
    norm = m.abs().sum(dim=-2).amax(dim=-1)  # induced 1-norm
    squarings = torch.clamp(torch.ceil(torch.log2(norm.clamp_min(1e-300))), min=0).to(torch.int64)
    scale = torch.pow(2.0, -squarings.to(m.dtype))
    x = m * scale[..., None, None]

    eye = torch.eye(d, dtype=m.dtype, device=m.device).expand_as(m)
    # Horner: I + x(I + x/2(I + x/3(...)))
    e = eye.clone()
    for k in range(TAYLOR_DEGREE, 0, -1):
        e = eye + (x @ e) / k

    n_max = int(squarings.max().item()) if squarings.numel() else 0
    for k in range(n_max):
        active = (squarings > k)[..., None, None]
        e = torch.where(active, e @ e, e)
    return e


class _ExpmTrace(torch.autograd.Function):
    @staticmethod
    def forward(ctx, m):
        e = _expm_scaled_squared(m)
        tr = torch.diagonal(e, dim1=-2, dim2=-1).sum(-1)
        ctx.save_for_backward(e)
        return tr

    @staticmethod
    def backward(ctx, grad_tr):
        (e,) = ctx.saved_tensors
        # d tr(e^M) / dM = (e^M)^T
        return grad_tr[..., None, None] * e.transpose(-1, -2)


def expm_trace(m: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    """Trace of the matrix exponential, batched over leading dims.

    Returns ``(trace, overflow)``. Where the exponential leaves the floating
    point range, ``trace`` is ``+inf`` and ``overflow`` is True; no exception
    is raised for that case.
    """
    _check_square(m)
    if not torch.isfinite(m).all():
        raise InputError("expm_trace input contains non-finite entries")
    tr = _ExpmTrace.apply(m)
    overflow = ~torch.isfinite(tr)
    if overflow.any():
        tr = torch.where(overflow, torch.full_like(tr, math.inf), tr)
    return tr, overflow


def elementwise_power(a: torch.Tensor, p: torch.Tensor, floor: float = DEFAULT_POWER_FLOOR) -> torch.Tensor:
    """Entrywise a ** p computed as exp(p * ln(max(a, floor)))."""
    if floor <= 0:
        raise InputError(f"power floor must be positive, got {floor}")
    if (a < 0).any():
        raise InputError("elementwise_power base must be entrywise non-negative")
    base = a.clamp_min(floor)
    val = torch.exp(p * torch.log(base))
    # Unit exponents return the base bit-exactly. The correction is detached so
    # gradients (incl. d/dP = base ln base) still come from the exp-log path;
    # val and base are within a few ulps, so val + (base - val) == base exactly.
    snap = torch.where(p == 1, base, val)
    return val + (snap - val).detach()


def masked_softmax(scores: torch.Tensor, mask: Optional[torch.Tensor]) -> torch.Tensor:
    """Softmax over the last axis; ``mask`` is True where a position is disallowed."""
    if mask is None:
        shifted = scores - scores.amax(dim=-1, keepdim=True).detach()
        w = torch.exp(shifted)
        return w / w.sum(dim=-1, keepdim=True)
    mask = mask.to(torch.bool)
    if mask.all(dim=-1).any():
        raise ContractError("masked_softmax: a row has no allowed position")
    filled = scores.masked_fill(mask, -math.inf)
    shifted = filled - filled.amax(dim=-1, keepdim=True).detach()
    w = torch.exp(shifted).masked_fill(mask, 0.0)
    return w / w.sum(dim=-1, keepdim=True)


def causal_mask(n_tok: int, device=None) -> torch.Tensor:
    """(n_tok, n_tok) boolean mask, True above the diagonal (future keys)."""
    return torch.ones(n_tok, n_tok, dtype=torch.bool, device=device).triu(1)


def layer_norm(x: torch.Tensor, gain: torch.Tensor, bias: torch.Tensor, eps: float = 1e-5) -> torch.Tensor:
    """LayerNorm over the last axis with biased variance."""
    if x.shape[-1] == 0:
        raise DimensionError("layer_norm over a zero-length axis")
    if gain.shape[-1] != x.shape[-1] or bias.shape[-1] != x.shape[-1]:
        raise DimensionError(
            f"layer_norm width mismatch: x {x.shape[-1]}, gain {gain.shape[-1]}, bias {bias.shape[-1]}"
        )
    mean = x.mean(dim=-1, keepdim=True)
    var = (x - mean).pow(2).mean(dim=-1, keepdim=True)
    return (x - mean) / torch.sqrt(var + eps) * gain + bias


def grad_check(
    f: Callable[[torch.Tensor], torch.Tensor],
    x: torch.Tensor,
    step: float = 1e-5,
    coords: Optional[Sequence[int]] = None,
) -> float:
    """Max over coordinates of |g_fd - g_ad| / max(1, |g_fd|).

    ``g_fd`` are central finite differences, ``g_ad`` the autograd gradient.
    ``coords`` restricts the comparison to a subset of flat indices.
    """
    x0 = x.detach().clone()
    xg = x0.clone().requires_grad_(True)
    y = f(xg)
    if y.numel() != 1:
        raise DimensionError("grad_check needs a scalar-valued function")
    if not torch.isfinite(y).all():
        raise InputError("grad_check: f(x) is not finite")
    (g_ad,) = torch.autograd.grad(y, xg, allow_unused=True)
    if g_ad is None:
        g_ad = torch.zeros_like(x0)
    g_ad = g_ad.reshape(-1)

    flat = x0.reshape(-1)
    idx = range(flat.numel()) if coords is None else coords
    worst = 0.0
    with torch.no_grad():
        for i in idx:
            orig = flat[i].item()
            flat[i] = orig + step
            fp = f(x0).item()
            flat[i] = orig - step
            fm = f(x0).item()
            flat[i] = orig
            g_fd = (fp - fm) / (2 * step)
            err = abs(g_fd - g_ad[i].item()) / max(1.0, abs(g_fd))
            worst = max(worst, err)
    return worst
