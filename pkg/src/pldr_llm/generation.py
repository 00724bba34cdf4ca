"""Autoregressive decoding: greedy, top-k and nucleus (top-p) sampling.

Each step recomputes the full prefix; there is no KV cache. Temperature is
fixed at 1.
"""

from __future__ import annotations

from typing import Optional

import torch

from .errors import ConfigError, InputError


def nucleus_mask(probs: torch.Tensor, top_p: float) -> torch.Tensor:
    """Boolean mask of the smallest probability-sorted prefix with mass >= top_p."""
    if not (0 < top_p <= 1):
        raise ConfigError(f"top_p must lie in (0, 1], got {top_p}")
    if top_p == 1:
        return torch.ones_like(probs, dtype=torch.bool)
    sorted_p, order = probs.sort(dim=-1, descending=True)
    mass_before = sorted_p.cumsum(-1) - sorted_p
    keep_sorted = mass_before < top_p
    keep_sorted[..., 0] = True
    mask = torch.zeros_like(keep_sorted)
    mask.scatter_(-1, order, keep_sorted)
    return mask


def top_k_mask(probs: torch.Tensor, k: int) -> torch.Tensor:
    if k < 1:
        raise ConfigError(f"top_k must be >= 1, got {k}")
    k = min(k, probs.shape[-1])
    idx = probs.topk(k, dim=-1).indices
    mask = torch.zeros_like(probs, dtype=torch.bool)
    mask.scatter_(-1, idx, True)
    return mask


def next_token(
    logits: torch.Tensor,
    strategy: str = "greedy",
    top_k: int = 1,
    top_p: float = 1.0,
    generator: Optional[torch.Generator] = None,
) -> int:
    """Pick one id from a (vocab,) logit vector."""
    logits = logits.to(torch.float64)
    if strategy == "greedy" or (strategy == "top_k" and top_k == 1):
        return int(logits.argmax())
    probs = torch.softmax(logits, dim=-1)
    if strategy == "top_k":
        mask = top_k_mask(probs, top_k)
    elif strategy == "top_p":
        mask = nucleus_mask(probs, top_p)
    else:
        raise ConfigError(f"unknown generation strategy {strategy!r}")
    probs = probs.masked_fill(~mask, 0.0)
    probs = probs / probs.sum()
    return int(torch.multinomial(probs, 1, generator=generator))


@torch.no_grad()
def generate(
    model,
    prompt: list,
    max_new_tokens: int = 256,
    strategy: str = "greedy",
    top_k: int = 1,
    top_p: float = 1.0,
    stop_id: Optional[int] = -1,
    seed: int = 0,
) -> list:
    """Return prompt + continuation ids.

    Decoding stops after ``max_new_tokens`` or once ``stop_id`` is emitted
    (the stop token is kept). ``stop_id=-1`` means the model's end id;
    ``None`` disables stopping.
    """
    if not prompt:
        raise InputError("prompt must contain at least one token")
    if strategy == "top_p" and not (0 < top_p <= 1):
        raise ConfigError(f"top_p must lie in (0, 1], got {top_p}")
    if stop_id == -1:
        stop_id = model.cfg.end_id
    gen = torch.Generator().manual_seed(seed)
    tokens = list(prompt)
    was_training = model.training
    model.eval()
    try:
        for _ in range(max_new_tokens):
            logits = model(torch.tensor([tokens])).logits[0, -1]
            tok = next_token(logits, strategy, top_k, top_p, gen)
            tokens.append(tok)
            if stop_id is not None and tok == stop_id:
                break
    finally:
        model.train(was_training)
    return tokens
