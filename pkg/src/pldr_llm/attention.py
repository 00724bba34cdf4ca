"""Power law graph attention (PLGA).

Per head, the block learns a metric tensor ``A_LM`` over the d_k embedding
dimensions from the queries, raises it entrywise to learned power
coefficients ``P`` to get the potential tensor ``A_P``, mixes potential
columns into the energy-curvature tensor ``G_LM`` and scores attention by
projecting rotated queries and keys onto ``G_LM``.

Causality: the metric learner at position t only sees queries at positions
<= t (running token average of the query Gram product), so every tensor
used to score row t is a function of the prefix. The deductive outputs
reported for a sequence are those of its last (non-pad) position, which
is the metric learned from the whole sequence.
"""

from __future__ import annotations

import math
from typing import NamedTuple, Optional

import torch
import torch.nn as nn
import torch.nn.functional as F

from .config import AttentionConfig
from .errors import ConfigError, DimensionError
from .kernel import causal_mask, elementwise_power, layer_norm, masked_softmax


def swiglu_ffn(x: torch.Tensor, w_gate: torch.Tensor, w_val: torch.Tensor, w_out: torch.Tensor) -> torch.Tensor:
    """(Swish(x W_gate) * (x W_val)) W_out, no biases."""
    if not (x.shape[-1] == w_gate.shape[0] == w_val.shape[0]):
        raise DimensionError(
            f"swiglu input width {x.shape[-1]} does not match weights {tuple(w_gate.shape)}/{tuple(w_val.shape)}"
        )
    if w_gate.shape != w_val.shape or w_out.shape[0] != w_gate.shape[1]:
        raise DimensionError(
            f"swiglu weight shapes inconsistent: {tuple(w_gate.shape)}, {tuple(w_val.shape)}, {tuple(w_out.shape)}"
        )
    return (F.silu(x @ w_gate) * (x @ w_val)) @ w_out


def iswiglu(x: torch.Tensor) -> torch.Tensor:
    """x * Swish(x) = x^2 sigmoid(x), non-negative everywhere."""
    return x * F.silu(x)


def rotary_apply(x: torch.Tensor, positions: torch.Tensor, base: float = 10000.0) -> torch.Tensor:
    """Rotate dimension pairs (2i, 2i+1) of ``x[..., n_tok, d_k]`` by pos * base^(-2i/d_k)."""
    d_k = x.shape[-1]
    if d_k % 2:
        raise ConfigError(f"rotary embeddings need an even width, got {d_k}")
    positions = torch.as_tensor(positions, device=x.device)
    if positions.shape[-1] != x.shape[-2]:
        raise DimensionError(f"{positions.shape[-1]} positions for {x.shape[-2]} tokens")
    if (positions < 0).any():
        raise ConfigError("rotary positions must be non-negative")
    inv_freq = base ** (-torch.arange(0, d_k, 2, dtype=torch.float64, device=x.device) / d_k)
    angle = positions.to(torch.float64)[:, None] * inv_freq[None, :]
    cos = torch.cos(angle).to(x.dtype)
    sin = torch.sin(angle).to(x.dtype)
    x0, x1 = x[..., 0::2], x[..., 1::2]
    out = torch.stack((x0 * cos - x1 * sin, x0 * sin + x1 * cos), dim=-1)
    return out.flatten(-2)


def energy_curvature(a_p: torch.Tensor, w_g: torch.Tensor, b_g: torch.Tensor) -> torch.Tensor:
    """G_LM = A_P W_G + b_G (bias broadcast over rows)."""
    return a_p @ w_g + b_g.unsqueeze(-2)


class SwiGLU(nn.Module):
    def __init__(self, d_in: int, gated_size: int, out_size: int, std: float = 0.02):
        super().__init__()
        self.w_gate = nn.Parameter(torch.empty(d_in, gated_size))
        self.w_val = nn.Parameter(torch.empty(d_in, gated_size))
        self.w_out = nn.Parameter(torch.empty(gated_size, out_size))
        for w in (self.w_gate, self.w_val, self.w_out):
            nn.init.normal_(w, 0.0, std)

    def forward(self, x):
        return swiglu_ffn(x, self.w_gate, self.w_val, self.w_out)


class LayerNorm(nn.Module):
    def __init__(self, width: int, eps: float = 1e-5):
        super().__init__()
        self.gain = nn.Parameter(torch.ones(width))
        self.bias = nn.Parameter(torch.zeros(width))
        self.eps = eps

    def forward(self, x):
        return layer_norm(x, self.gain, self.bias, self.eps)


class ResidualUnit(nn.Module):
    """x + F2(F1(x)) with two SwiGLU feedforward networks."""

    def __init__(self, width: int, gated_size: int, std: float):
        super().__init__()
        self.ff1 = SwiGLU(width, gated_size, width, std)
        self.ff2 = SwiGLU(width, gated_size, width, std)

    def forward(self, x):
        return x + self.ff2(self.ff1(x))


class MetricLearner(nn.Module):
    """Residual network producing the non-negative metric tensor A_LM.

    Shared by all heads of a layer. Input is the running-average Gram
    product of the head's queries, LayerNorm-ed along rows.
    """

    def __init__(self, cfg: AttentionConfig):
        super().__init__()
        d_k, lin = cfg.d_k, cfg.metric_linear_size
        self.d_k = d_k
        self.w_a = nn.Parameter(torch.eye(d_k) + cfg.init_std * torch.randn(d_k, d_k))
        self.norm = LayerNorm(d_k, cfg.ln_eps)
        if cfg.flavor == "v9":
            self.pre = nn.Parameter(torch.empty(d_k, lin))
            self.post = nn.Parameter(torch.empty(lin, d_k))
            nn.init.normal_(self.pre, 0.0, 1.0 / math.sqrt(d_k))
            nn.init.normal_(self.post, 0.0, 1.0 / math.sqrt(lin))
        else:
            self.register_parameter("pre", None)
            self.register_parameter("post", None)
        self.units = nn.ModuleList(
            ResidualUnit(lin, cfg.metric_gated_size, cfg.init_std) for _ in range(cfg.residual_units)
        )

    def gram(self, q: torch.Tensor) -> torch.Tensor:
        """Causal running mean of (q_s W_a)^T q_s over s <= t: (..., T, d_k, d_k)."""
        qa = q @ self.w_a
        outer = qa.unsqueeze(-1) * q.unsqueeze(-2)
        counts = torch.arange(1, q.shape[-2] + 1, dtype=q.dtype, device=q.device)
        return outer.cumsum(dim=-3) / counts[:, None, None]

    def forward(self, q: torch.Tensor) -> torch.Tensor:
        if q.shape[-1] != self.d_k:
            raise DimensionError(f"metric learner expects width {self.d_k}, got {q.shape[-1]}")
        if q.shape[-2] < 1:
            raise DimensionError("metric learner needs at least one token")
        x = self.norm(self.gram(q))
        if self.pre is not None:
            x = x @ self.pre
        for unit in self.units:
            x = unit(x)
        if self.post is not None:
            x = x @ self.post
        return iswiglu(x)


class DeductiveHead(NamedTuple):
    """Per-layer deductive tensors at the reporting position: (B, h, d_k, d_k)."""

    a_lm: torch.Tensor
    a_p: torch.Tensor
    g_lm: torch.Tensor


class PLGAttention(nn.Module):
    def __init__(self, cfg: AttentionConfig):
        super().__init__()
        self.cfg = cfg
        d, h, d_k = cfg.d_model, cfg.n_heads, cfg.d_k
        self.n_heads, self.d_k = h, d_k
        self.wq = nn.Parameter(torch.empty(d, d))
        self.wk = nn.Parameter(torch.empty(d, d))
        self.wv = nn.Parameter(torch.empty(d, d))
        self.wo = nn.Parameter(torch.empty(d, d))
        for w in (self.wq, self.wk, self.wv, self.wo):
            nn.init.normal_(w, 0.0, cfg.init_std)
        self.metric = MetricLearner(cfg)
        # identity exponent and identity superposition at init: A_P = G_LM = A_LM
        self.p = nn.Parameter(torch.ones(h, d_k, d_k))
        self.w_g = nn.Parameter(torch.eye(d_k).repeat(h, 1, 1))
        self.b_g = nn.Parameter(torch.zeros(h, d_k))

    def _split(self, x):
        b, t, _ = x.shape
        return x.view(b, t, self.n_heads, self.d_k).transpose(1, 2)

    def forward(
        self,
        x: torch.Tensor,
        lengths: Optional[torch.Tensor] = None,
        return_attention: bool = False,
    ):
        """x: (B, T, d_model). Returns (y, DeductiveHead[, E_LM])."""
        if x.dim() != 3 or x.shape[-1] != self.cfg.d_model:
            raise DimensionError(f"expected (B, T, {self.cfg.d_model}), got {tuple(x.shape)}")
        b, t, d = x.shape
        q = self._split(x @ self.wq)
        k = self._split(x @ self.wk)
        v = self._split(x @ self.wv)

        a_lm = self.metric(q)  # (B, h, T, d_k, d_k), content only, pre-rotary
        a_p = elementwise_power(a_lm, self.p[None, :, None], self.cfg.power_floor)
        g = energy_curvature(a_p, self.w_g[None, :, None], self.b_g[None, :, None])

        pos = torch.arange(t, device=x.device)
        q_r = rotary_apply(q, pos, self.cfg.rope_base)
        k_r = rotary_apply(k, pos, self.cfg.rope_base)
        # score[t, s] = (q_t G_t) . (k_s G_t) = q_t G_t G_t^T k_s
        qg = torch.einsum("bhtd,bhtde->bhte", q_r, g)
        u = torch.einsum("bhte,bhtfe->bhtf", qg, g)
        scores = u @ k_r.transpose(-1, -2) / math.sqrt(self.d_k)
        e_lm = masked_softmax(scores, causal_mask(t, x.device))
        y = (e_lm @ v).transpose(1, 2).reshape(b, t, d) @ self.wo

        if lengths is None:
            last = torch.full((b,), t - 1, dtype=torch.long, device=x.device)
        else:
            last = torch.as_tensor(lengths, device=x.device).long() - 1
        idx = torch.arange(b, device=x.device)
        ded = DeductiveHead(a_lm[idx, :, last], a_p[idx, :, last], g[idx, :, last])
        if return_attention:
            return y, ded, e_lm
        return y, ded
