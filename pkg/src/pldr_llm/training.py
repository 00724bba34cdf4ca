"""Pretraining loop: masked cross-entropy, AdamW, cosine schedule, DAG regularization."""

from __future__ import annotations

import itertools
import json
import logging
import math
import queue
import threading
import time
from dataclasses import dataclass, field
from typing import Iterable, Optional

import torch

from .config import DagCoefficients, OptimizerConfig, RunConfig, TelemetryConfig
from .dag import TENSORS, dag_regularizer, dag_values
from .errors import ContractError, DagOverflowError

log = logging.getLogger(__name__)


def lm_cross_entropy(logits: torch.Tensor, targets: torch.Tensor, pad_id: int) -> torch.Tensor:
    """Mean next-token NLL over non-pad targets, reduced in float64."""
    nll_sum, _, count = lm_sums(logits, targets, pad_id)
    if count == 0:
        raise ContractError("every target position is padding; skip this batch")
    return nll_sum / count


def lm_sums(logits: torch.Tensor, targets: torch.Tensor, pad_id: int):
    """(summed NLL as float64 tensor, correct predictions, counted positions)."""
    keep = targets != pad_id
    logp = torch.log_softmax(logits, dim=-1)
    nll = -logp.gather(-1, targets.unsqueeze(-1)).squeeze(-1)
    nll_sum = nll.to(torch.float64).masked_fill(~keep, 0.0).sum()
    correct = int(((logits.argmax(-1) == targets) & keep).sum())
    return nll_sum, correct, int(keep.sum())


def split_batch(ids: torch.Tensor, lengths: Optional[torch.Tensor] = None):
    """Inputs, shifted targets and per-row count of input positions with a real target.

    The last real token of a row is never an input, so a padded row reports
    deductive outputs at the same position as its truncated equivalent.
    """
    inputs, targets = ids[:, :-1], ids[:, 1:]
    t_in = inputs.shape[1]
    if lengths is None:
        lengths = torch.full((ids.shape[0],), ids.shape[1])
    real_in = torch.clamp(lengths - 1, min=1, max=t_in)
    return inputs, targets, real_in


def lr_schedule(step: int, cfg: OptimizerConfig) -> float:
    """Linear warm-up to max_lr, then cosine decay to final_lr_fraction * max_lr."""
    step = min(max(step, 0), cfg.total_steps)
    if step < cfg.warmup_steps:
        return cfg.max_lr * step / cfg.warmup_steps
    progress = (step - cfg.warmup_steps) / (cfg.total_steps - cfg.warmup_steps)
    c = (1.0 + math.cos(math.pi * progress)) / 2.0
    min_lr = cfg.final_lr_fraction * cfg.max_lr
    # written so both ends are exact: c=1 -> max_lr, c=0 -> min_lr
    return cfg.max_lr * c + min_lr * (1.0 - c)


class AdamW:
    """Bias-corrected AdamW with decoupled decay and global-norm clipping."""

    def __init__(self, model: torch.nn.Module, cfg: OptimizerConfig, no_decay: Iterable[str] = ()):
        self.cfg = cfg
        self.params = dict(model.named_parameters())
        self.no_decay = set(no_decay)
        self.m = {n: torch.zeros_like(p) for n, p in self.params.items()}
        self.v = {n: torch.zeros_like(p) for n, p in self.params.items()}
        self.t = 0
        self.rejected = 0
        self.last_grad_norm = 0.0

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None

    def grads(self) -> dict:
        return {n: (p.grad if p.grad is not None else torch.zeros_like(p)) for n, p in self.params.items()}

    @torch.no_grad()
    def clip(self, grads: dict) -> float:
        total = math.sqrt(sum(float(g.to(torch.float64).pow(2).sum()) for g in grads.values()))
        self.last_grad_norm = total
        if total > self.cfg.clip_norm:
            scale = self.cfg.clip_norm / total
            for g in grads.values():
                g.mul_(scale)
        return total

    @torch.no_grad()
    def step(self) -> bool:
        """Apply one update from the current ``.grad`` fields; False if rejected."""
        grads = self.grads()
        if not all(torch.isfinite(g).all() for g in grads.values()):
            self.rejected += 1
            log.warning("non-finite gradient; update rejected (%d so far)", self.rejected)
            return False
        self.clip(grads)
        self.t += 1
        cfg = self.cfg
        lr = lr_schedule(self.t, cfg)
        bc1 = 1.0 - cfg.beta1**self.t
        bc2 = 1.0 - cfg.beta2**self.t
        for n, p in self.params.items():
            g = grads[n]
            m, v = self.m[n], self.v[n]
            m.mul_(cfg.beta1).add_(g, alpha=1.0 - cfg.beta1)
            v.mul_(cfg.beta2).addcmul_(g, g, value=1.0 - cfg.beta2)
            if cfg.weight_decay and n not in self.no_decay:
                p.mul_(1.0 - lr * cfg.weight_decay)
            denom = (v / bc2).sqrt_().add_(cfg.eps)
            p.addcdiv_(m, denom, value=-lr / bc1)
        return True


def optimizer_step(state: "TrainState") -> bool:
    """Clip, decay and update ``state``'s parameters from their gradients."""
    return state.optimizer.step()


class TelemetryWriter:
    """JSONL writer fed through a queue by the training thread; ``close`` drains it."""

    def __init__(self, path):
        self.path = path
        self._q: queue.Queue = queue.Queue()
        self._fh = open(path, "a", encoding="utf-8")
        self._thread = threading.Thread(target=self._run, daemon=True)
        self._thread.start()
        self.records: list = []

    def _run(self):
        while True:
            rec = self._q.get()
            if rec is None:
                break
            self._fh.write(json.dumps(rec, sort_keys=True) + "\n")
            self._fh.flush()

    def write(self, record: dict):
        self.records.append(record)
        self._q.put(record)

    def close(self):
        self._q.put(None)
        self._thread.join()
        self._fh.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


@dataclass
class TrainState:
    model: torch.nn.Module
    optimizer: AdamW
    step: int = 0
    losses: list = field(default_factory=list)  # total loss per step
    window: list = field(default_factory=list)  # (loss, correct, count) since last log
    seed: int = 0
    config: Optional[RunConfig] = None

    @classmethod
    def create(cls, model, opt_cfg: OptimizerConfig, seed: int = 0, config: Optional[RunConfig] = None):
        _, no_decay = model.named_parameter_groups()
        return cls(model, AdamW(model, opt_cfg, no_decay), seed=seed, config=config)


@torch.no_grad()
def evaluate(model, batches: Iterable, pad_id: int, max_batches: Optional[int] = None) -> tuple[float, float]:
    """Token-weighted CE and accuracy over non-pad targets."""
    was_training = model.training
    model.eval()
    nll, correct, count = 0.0, 0, 0
    try:
        for batch in itertools.islice(batches, max_batches):
            inputs, targets, real_in = split_batch(batch.ids, batch.lengths)
            res = model(inputs, real_in)
            s, c, n = lm_sums(res.logits, targets, pad_id)
            nll += float(s)
            correct += c
            count += n
    finally:
        model.train(was_training)
    if count == 0:
        raise ContractError("evaluation corpus has no non-pad target positions")
    return nll / count, correct / count


def _has_targets(batch) -> bool:
    return bool((batch.lengths >= 2).any())


def train_step(state: TrainState, micro: list, dag_cfg: DagCoefficients, pad_id: int):
    """Forward/backward over the micro-batches and one optimizer update."""
    model = state.model
    state.optimizer.zero_grad()
    total, correct, count = 0.0, 0, 0
    dag_logged: dict = {}
    last_ded = None
    for batch in micro:
        inputs, targets, real_in = split_batch(batch.ids, batch.lengths)
        res = model(inputs, real_in)
        ce = lm_cross_entropy(res.logits, targets, pad_id)
        dlr, dag_logged = dag_regularizer(res.deductive, dag_cfg)
        loss = (ce + dlr) / len(micro)
        loss.backward()
        total += loss.item()
        with torch.no_grad():
            correct += int(((res.logits.argmax(-1) == targets) & (targets != pad_id)).sum())
            count += int((targets != pad_id).sum())
        last_ded = res.deductive
    accepted = optimizer_step(state)
    return total, correct, count, accepted, last_ded, dag_logged


def train_loop(
    model,
    data: Iterable,
    opt_cfg: OptimizerConfig,
    dag_cfg: DagCoefficients,
    telemetry_cfg: TelemetryConfig,
    *,
    pad_id: int,
    state: Optional[TrainState] = None,
    val_data=None,
    writer: Optional[TelemetryWriter] = None,
    max_steps: Optional[int] = None,
) -> TrainState:
    """Run until ``total_steps``/``max_steps`` or until ``data`` is exhausted.

    ``data`` yields ``TokenBatch``es; when resuming from ``state`` the first
    ``state.step * micro_batches`` usable batches are skipped so the run
    continues exactly where the checkpointed one stopped. ``val_data`` is a
    zero-argument callable returning a fresh iterable of batches.
    """
    if state is None:
        state = TrainState.create(model, opt_cfg)
    micro_n = opt_cfg.micro_batches
    usable = (b for b in data if _has_targets(b))
    usable = itertools.islice(usable, state.step * micro_n, None)
    limit = opt_cfg.total_steps if max_steps is None else min(max_steps, opt_cfg.total_steps)
    t0 = time.perf_counter()
    while state.step < limit:
        micro = list(itertools.islice(usable, micro_n))
        if len(micro) < micro_n:
            log.info("data exhausted after %d steps", state.step)
            break
        try:
            loss, correct, count, accepted, ded, _ = train_step(state, micro, dag_cfg, pad_id)
        except DagOverflowError:
            log.error("step %d: regularized DAG term overflowed", state.step + 1)
            raise
        state.step += 1
        state.losses.append(loss)
        state.window.append((loss, correct, count))

        if state.step % telemetry_cfg.log_interval == 0:
            dls = dag_values(ded)
            lams = dag_cfg.as_tuple()
            dlr = sum(l * dls[n] for l, n in zip(lams, TENSORS) if l is not None)
            n_tok = sum(w[2] for w in state.window)
            rec = {
                "step": state.step,
                "lr": lr_schedule(state.step, opt_cfg),
                "train_loss": sum(w[0] for w in state.window) / len(state.window),
                "train_acc": sum(w[1] for w in state.window) / max(n_tok, 1),
                "dl_alm": _json_num(dls["A_LM"]),
                "dl_ap": _json_num(dls["A_P"]),
                "dl_glm": _json_num(dls["G_LM"]),
                "dlr": _json_num(dlr),
                "overflow_flags": [math.isinf(dls[n]) for n in TENSORS],
            }
            state.window.clear()
            if writer is not None:
                writer.write(rec)
            log.info("step %d loss %.4f acc %.4f", rec["step"], rec["train_loss"], rec["train_acc"])

        if val_data is not None and state.step % telemetry_cfg.val_interval == 0:
            val_loss, val_acc = evaluate(state.model, val_data(), pad_id, telemetry_cfg.val_batch_count)
            rec = {"step": state.step, "val_loss": val_loss, "val_acc": val_acc}
            if writer is not None:
                writer.write(rec)
    log.info("trained %d steps in %.1fs", state.step, time.perf_counter() - t0)
    return state


def _json_num(v: float):
    return "overflow" if math.isinf(v) else v
