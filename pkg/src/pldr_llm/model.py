"""Decoder-only PLDR language model."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Optional

import torch
import torch.nn as nn

from .attention import LayerNorm, PLGAttention, SwiGLU
from .config import ModelConfig
from .errors import InputError

log = logging.getLogger(__name__)


@dataclass
class DeductiveOutputs:
    """Deductive tensors for every layer and head.

    ``a_lm``, ``a_p``, ``g_lm`` have shape (B, L, h, d_k, d_k) and are taken
    at the last non-pad position of each sample; ``p`` is (L, h, d_k, d_k).
    """

    a_lm: torch.Tensor
    a_p: torch.Tensor
    g_lm: torch.Tensor
    p: torch.Tensor

    def detach(self) -> "DeductiveOutputs":
        return DeductiveOutputs(self.a_lm.detach(), self.a_p.detach(), self.g_lm.detach(), self.p.detach())


@dataclass
class ForwardResult:
    logits: torch.Tensor  # (B, T, vocab)
    deductive: DeductiveOutputs
    beyond_context: bool = False


class DecoderLayer(nn.Module):
    """Post-norm block: LN(x + PLGA(x)) then LN(h + FFN(h))."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.attn = PLGAttention(cfg.attention)
        self.norm1 = LayerNorm(cfg.d_model, cfg.ln_eps)
        self.ffn = SwiGLU(cfg.d_model, cfg.ffn_gated_size, cfg.d_model, cfg.init_std)
        self.norm2 = LayerNorm(cfg.d_model, cfg.ln_eps)

    def forward(self, x, lengths=None):
        a, ded = self.attn(x, lengths)
        h1 = self.norm1(x + a)
        return self.norm2(h1 + self.ffn(h1)), ded


class PLDRModel(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self._warned_context = False
        self.embedding = nn.Parameter(torch.empty(cfg.vocab_size, cfg.d_model))
        nn.init.normal_(self.embedding, 0.0, 0.02)
        self.embed_norm = LayerNorm(cfg.d_model, cfg.ln_eps)
        self.layers = nn.ModuleList(DecoderLayer(cfg) for _ in range(cfg.n_layers))
        self.head = nn.Parameter(torch.empty(cfg.d_model, cfg.vocab_size))
        nn.init.normal_(self.head, 0.0, cfg.init_std)

    def embed(self, tokens: torch.Tensor) -> torch.Tensor:
        if tokens.numel() and (tokens.min() < 0 or tokens.max() >= self.cfg.vocab_size):
            raise InputError(f"token id outside [0, {self.cfg.vocab_size})")
        x = self.embedding[tokens] * math.sqrt(self.cfg.d_model)
        return self.embed_norm(x)

    def forward(self, tokens: torch.Tensor, lengths: Optional[torch.Tensor] = None) -> ForwardResult:
        """tokens: (B, T) ids. ``lengths`` picks the reporting position of deductive outputs."""
        tokens = torch.as_tensor(tokens)
        if tokens.dim() == 1:
            tokens = tokens.unsqueeze(0)
        if tokens.dim() != 2 or tokens.shape[0] == 0 or tokens.shape[1] == 0:
            raise InputError(f"expected a non-empty (B, T) token batch, got shape {tuple(tokens.shape)}")
        beyond = tokens.shape[1] > self.cfg.context_length
        if beyond and not self._warned_context:
            # once per model; decoding past the context would otherwise warn every step
            log.warning("sequence of %d tokens exceeds context length %d", tokens.shape[1], self.cfg.context_length)
            self._warned_context = True
        x = self.embed(tokens)
        per_layer = []
        for layer in self.layers:
            x, ded = layer(x, lengths)
            per_layer.append(ded)
        logits = x @ self.head
        deductive = DeductiveOutputs(
            a_lm=torch.stack([d.a_lm for d in per_layer], dim=1),
            a_p=torch.stack([d.a_p for d in per_layer], dim=1),
            g_lm=torch.stack([d.g_lm for d in per_layer], dim=1),
            p=torch.stack([layer.attn.p for layer in self.layers]),
        )
        return ForwardResult(logits, deductive, beyond)

    def named_parameter_groups(self):
        """(decayed, not decayed) parameter name lists.

        LayerNorm gains/biases, the energy-curvature bias and the power
        coefficients are excluded from weight decay.
        """
        decay, no_decay = [], []
        for name, p in self.named_parameters():
            leaf = name.rsplit(".", 1)[-1]
            if p.dim() < 2 or leaf in ("p", "b_g", "gain", "bias"):
                no_decay.append(name)
            else:
                decay.append(name)
        return decay, no_decay


def param_count(cfg: ModelConfig) -> int:
    """Closed-form number of learned scalars in ``PLDRModel(cfg)``."""
    d, h, d_k, v = cfg.d_model, cfg.n_heads, cfg.d_k, cfg.vocab_size
    lin, gated = cfg.metric_linear_size, cfg.metric_gated_size

    metric = d_k * d_k + 2 * d_k  # W_a + row LayerNorm
    metric += cfg.residual_units * 2 * 3 * lin * gated
    if cfg.flavor == "v9":
        metric += 2 * d_k * lin
    heads = h * (2 * d_k * d_k + d_k)  # P, W_G, b_G
    attn = 4 * d * d + metric + heads
    ffn = 3 * d * cfg.ffn_gated_size
    per_layer = attn + ffn + 2 * 2 * d
    return 2 * v * d + 2 * d + cfg.n_layers * per_layer
