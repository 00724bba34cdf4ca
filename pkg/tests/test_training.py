import json
import math

import pytest
import torch

from conftest import D, tiny_config, tiny_model
from pldr_llm.checkpoint import checkpoint_io, load_checkpoint, save_checkpoint
from pldr_llm.config import DagCoefficients, DataConfig, OptimizerConfig, RunConfig, TelemetryConfig
from pldr_llm.dag import dag_regularizer
from pldr_llm.data import pack
from pldr_llm.errors import CheckpointError, ConfigError, ContractError
from pldr_llm.model import PLDRModel
from pldr_llm.training import (
    AdamW,
    TelemetryWriter,
    TrainState,
    evaluate,
    lm_cross_entropy,
    lr_schedule,
    split_batch,
    train_loop,
    train_step,
)

LAMS = DagCoefficients(0.05, 0.05, 0.05)
QUIET = TelemetryConfig(log_every=10**9, val_every=10**9)


class TestCrossEntropy:
    def test_uniform(self):
        ce = lm_cross_entropy(torch.zeros(1, 3, 32000), torch.tensor([[5, 6, 7]]), pad_id=0)
        assert ce.item() == pytest.approx(math.log(32000), rel=1e-6)
        assert ce.item() == pytest.approx(10.373, abs=1e-3)

    def test_confident_and_correct(self):
        targets = torch.tensor([[2, 3]])
        logits = torch.nn.functional.one_hot(targets, 5).to(D) * 1e6
        assert lm_cross_entropy(logits, targets, pad_id=0).item() == pytest.approx(0.0, abs=1e-12)

    def test_pads_ignored(self):
        logits = torch.randn(1, 3, 5, dtype=D, requires_grad=True)
        ce = lm_cross_entropy(logits, torch.tensor([[2, 0, 0]]), pad_id=0)
        ref = -torch.log_softmax(logits[0, 0], -1)[2]
        assert ce.item() == pytest.approx(ref.item(), rel=1e-14)
        ce.backward()
        assert (logits.grad[0, 1:] == 0).all()

    def test_all_padding(self):
        with pytest.raises(ContractError):
            lm_cross_entropy(torch.zeros(1, 2, 5), torch.zeros(1, 2, dtype=torch.long), pad_id=0)


def loss_and_grads(model, ids, lengths, dag=LAMS):
    model.zero_grad()
    inputs, targets, real_in = split_batch(ids, lengths)
    res = model(inputs, real_in)
    loss = lm_cross_entropy(res.logits, targets, 0) + dag_regularizer(res.deductive, dag)[0]
    loss.backward()
    return loss.item(), {n: p.grad.clone() for n, p in model.named_parameters()}


class TestPaddingInvariance:
    def test_padded_row_equals_truncated_row(self):
        m = tiny_model(seed=1)
        real = torch.randint(2, 13, (1, 7))
        padded = torch.cat([real, torch.zeros(1, 5, dtype=torch.long)], dim=1)
        la, ga = loss_and_grads(m, padded, torch.tensor([7]))
        lb, gb = loss_and_grads(m, real, torch.tensor([7]))
        assert abs(la - lb) <= 1e-7
        for n in ga:
            assert (ga[n] - gb[n]).abs().max() <= 1e-7, n

    def test_pad_extension_of_batch(self):
        m = tiny_model(seed=2)
        ids = torch.randint(2, 13, (3, 8))
        ids[1, 5:] = 0
        lengths = torch.tensor([8, 5, 8])
        wide = torch.cat([ids, torch.zeros(3, 4, dtype=torch.long)], dim=1)
        la, ga = loss_and_grads(m, ids, lengths)
        lb, gb = loss_and_grads(m, wide, lengths)
        assert abs(la - lb) <= 1e-7
        assert max((ga[n] - gb[n]).abs().max().item() for n in ga) <= 1e-7


class TestSchedule:
    cfg = OptimizerConfig(max_lr=1e-3, warmup_steps=2000, total_steps=250_000)

    def test_examples(self):
        assert lr_schedule(2000, self.cfg) == 1e-3
        assert lr_schedule(250_000, self.cfg) == 0.1 * 1e-3
        assert lr_schedule(1000, self.cfg) == 0.5e-3
        assert lr_schedule(0, self.cfg) == 0.0

    def test_continuity_at_warmup(self):
        left = lr_schedule(1999, self.cfg) + (lr_schedule(1999, self.cfg) - lr_schedule(1998, self.cfg))
        assert left == pytest.approx(lr_schedule(2000, self.cfg), rel=1e-12)
        assert lr_schedule(2001, self.cfg) == pytest.approx(1e-3, rel=1e-9)

    def test_closed_form_and_monotone_decay(self):
        prev = math.inf
        for step in range(2000, 250_001, 4999):
            f = 0.1
            ref = 1e-3 * (f + (1 - f) * (1 + math.cos(math.pi * (step - 2000) / 248_000)) / 2)
            lr = lr_schedule(step, self.cfg)
            assert lr == pytest.approx(ref, rel=1e-12)
            assert lr <= prev
            prev = lr

    def test_invalid(self):
        with pytest.raises(ConfigError):
            OptimizerConfig(warmup_steps=10, total_steps=10)
        with pytest.raises(ConfigError):
            OptimizerConfig(final_lr_fraction=0.0)


class Scalar(torch.nn.Module):
    def __init__(self, value=1.0):
        super().__init__()
        self.theta = torch.nn.Parameter(torch.tensor([[value]], dtype=D))


class TestOptimizer:
    def test_zero_gradients_are_fixed_point(self):
        m = tiny_model()
        before = {n: p.detach().clone() for n, p in m.named_parameters()}
        opt = AdamW(m, OptimizerConfig(max_lr=1e-2, warmup_steps=0, total_steps=10, weight_decay=0.0))
        for _ in range(3):
            for p in m.parameters():
                p.grad = torch.zeros_like(p)
            assert opt.step()
        for n, p in m.named_parameters():
            assert torch.equal(p, before[n]), n

    def test_clip_to_exactly_one(self):
        m = Scalar()
        opt = AdamW(m, OptimizerConfig(clip_norm=1.0))
        grads = {"theta": torch.tensor([[10.0]], dtype=D)}
        assert opt.clip(grads) == 10.0
        assert grads["theta"].item() == 1.0
        vec = {"a": torch.tensor([6.0, 8.0], dtype=D)}
        opt.clip(vec)
        assert math.sqrt(float((vec["a"] ** 2).sum())) == pytest.approx(1.0, abs=1e-15)

    def test_quadratic_matches_scalar_simulation(self):
        cfg = OptimizerConfig(max_lr=0.05, warmup_steps=10, total_steps=400, weight_decay=0.0, clip_norm=1.0)
        m = Scalar(1.0)
        opt = AdamW(m, cfg)
        theta, mom, vel = 1.0, 0.0, 0.0
        for t in range(1, 201):
            m.theta.grad = m.theta.detach().clone()  # f = theta^2 / 2
            opt.step()
            g = theta * min(1.0, 1.0 / abs(theta)) if theta else 0.0
            mom = 0.9 * mom + 0.1 * g
            vel = 0.95 * vel + 0.05 * g * g
            lr = lr_schedule(t, cfg)
            theta -= lr / (1 - 0.9**t) * mom / (math.sqrt(vel / (1 - 0.95**t)) + 1e-5)
            assert m.theta.item() == pytest.approx(theta, rel=1e-9, abs=1e-12)
        assert abs(m.theta.item()) < 0.05

    def test_non_finite_gradient_rejected(self):
        m = Scalar(2.0)
        opt = AdamW(m, OptimizerConfig())
        m.theta.grad = torch.tensor([[math.nan]], dtype=D)
        assert not opt.step()
        assert opt.rejected == 1 and opt.t == 0 and m.theta.item() == 2.0

    def test_decay_groups(self):
        m = tiny_model()
        decay, no_decay = m.named_parameter_groups()
        assert "layers.0.attn.p" in no_decay and "layers.0.attn.b_g" in no_decay
        assert "layers.0.norm1.gain" in no_decay and "embed_norm.bias" in no_decay
        assert "layers.0.attn.wq" in decay and "head" in decay
        before = {n: p.detach().clone() for n, p in m.named_parameters()}
        cfg = OptimizerConfig(max_lr=0.1, warmup_steps=0, total_steps=10, weight_decay=0.1)
        opt = AdamW(m, cfg, no_decay)
        for p in m.parameters():
            p.grad = torch.zeros_like(p)
        opt.step()
        shrink = 1 - lr_schedule(1, cfg) * 0.1
        for n, p in m.named_parameters():
            expected = before[n] if n in no_decay else before[n] * shrink
            torch.testing.assert_close(p.detach(), expected, rtol=1e-15, atol=0)


class TestTrainStep:
    def test_gradient_linearity(self):
        m = tiny_model(seed=3)
        ids = torch.randint(2, 13, (2, 7))
        inputs, targets, real_in = split_batch(ids)

        def grads(which):
            m.zero_grad()
            res = m(inputs, real_in)
            ce = lm_cross_entropy(res.logits, targets, 0)
            dlr = dag_regularizer(res.deductive, LAMS)[0]
            {"ce": ce, "dlr": dlr, "both": ce + dlr}[which].backward()
            # the head does not feed the deductive outputs
            return {n: torch.zeros_like(p) if p.grad is None else p.grad.clone() for n, p in m.named_parameters()}

        g_ce, g_dlr, g_both = grads("ce"), grads("dlr"), grads("both")
        for n in g_both:
            assert (g_both[n] - g_ce[n] - g_dlr[n]).abs().max() <= 1e-8, n

    def test_regularizer_off_is_plain_ce(self):
        m = tiny_model()
        state = TrainState.create(m, OptimizerConfig(warmup_steps=0, total_steps=5))
        batch = next(pack(torch.randint(2, 13, (20,)).tolist(), 10, 2).batches())
        inputs, targets, real_in = split_batch(batch.ids, batch.lengths)
        with torch.no_grad():
            ce = lm_cross_entropy(m(inputs, real_in).logits, targets, 0).item()
        loss, *_ , logged = train_step(state, [batch], DagCoefficients(), 0)
        assert loss == ce and logged == {}

    def test_micro_batches_average_gradients(self):
        m = tiny_model(seed=4)
        batches = list(pack(torch.randint(2, 13, (40,)).tolist(), 10, 2).batches())[:2]
        per = []
        for b in batches:
            loss_and_grads(m, b.ids, b.lengths)
            per.append({n: p.grad.clone() for n, p in m.named_parameters()})
        state = TrainState.create(m, OptimizerConfig(max_lr=0.0, warmup_steps=0, total_steps=5, micro_batches=2))
        state.optimizer.step = lambda: True
        train_step(state, batches, LAMS, 0)
        for n, p in m.named_parameters():
            torch.testing.assert_close(p.grad, (per[0][n] + per[1][n]) / 2, rtol=1e-12, atol=1e-15)


def run_cfg(seed=0, **opt):
    o = dict(max_lr=3e-3, warmup_steps=2, total_steps=50, weight_decay=0.1)
    o.update(opt)
    return RunConfig(
        model=tiny_config(),
        optimizer=OptimizerConfig(**o),
        dag=LAMS,
        data=DataConfig(batch_size=2),
        telemetry=TelemetryConfig(log_every=2, val_every=3, val_batches=2),
        seed=seed,
        dtype="float64",
    )


def stream(seed=0, n=400):
    g = torch.Generator().manual_seed(seed)
    return pack(torch.randint(2, 13, (n,), generator=g).tolist(), 9, 2, pad_id=0)


def fresh_state(cfg):
    torch.manual_seed(cfg.seed)
    model = PLDRModel(cfg.model).to(D)
    return TrainState.create(model, cfg.optimizer, seed=cfg.seed, config=cfg)


def run(cfg, steps, state=None):
    state = state or fresh_state(cfg)
    return train_loop(state.model, stream().batches(), cfg.optimizer, cfg.dag, QUIET, pad_id=0, state=state,
                      max_steps=steps)


class TestTrainLoop:
    def test_deterministic_replay(self):
        a, b = run(run_cfg(), 8), run(run_cfg(), 8)
        assert a.losses == b.losses and len(a.losses) == 8
        for (n, p), q in zip(a.model.named_parameters(), b.model.parameters()):
            assert torch.equal(p, q), n

    def test_loss_decreases(self):
        s = run(run_cfg(), 20)
        assert s.losses[-1] < s.losses[0]

    def test_data_exhaustion_ends_cleanly(self):
        s = run(run_cfg(), 10_000)
        assert s.step == len(list(stream().batches()))

    def test_telemetry_records(self, tmp_path):
        cfg = run_cfg()
        state = fresh_state(cfg)
        val = stream(seed=9, n=60)
        with TelemetryWriter(tmp_path / "t.jsonl") as w:
            train_loop(state.model, stream().batches(), cfg.optimizer, cfg.dag, cfg.telemetry, pad_id=0,
                       state=state, val_data=val.batches, writer=w, max_steps=6)
        lines = [json.loads(l) for l in (tmp_path / "t.jsonl").read_text().splitlines()]
        train = [r for r in lines if "train_loss" in r]
        val_recs = [r for r in lines if "val_loss" in r]
        assert [r["step"] for r in train] == [2, 4, 6]
        assert [r["step"] for r in val_recs] == [3, 6]
        assert set(train[0]) == {"step", "lr", "train_loss", "train_acc", "dl_alm", "dl_ap", "dl_glm", "dlr",
                                 "overflow_flags"}
        assert train[0]["train_loss"] == pytest.approx(sum(state.losses[:2]) / 2, rel=1e-12)
        assert 0 <= train[0]["train_acc"] <= 1 and train[0]["overflow_flags"] == [False, False, False]
        assert val_recs[-1]["val_loss"] == pytest.approx(evaluate(state.model, val.batches(), 0, 2)[0], rel=1e-12)

    def test_evaluate_is_side_effect_free(self):
        m = tiny_model()
        before = [p.detach().clone() for p in m.parameters()]
        evaluate(m, stream().batches(), 0)
        assert all(torch.equal(a, b) for a, b in zip(before, m.parameters()))
        assert m.training


class TestCheckpoint:
    def test_round_trip_byte_identical(self, tmp_path):
        cfg = run_cfg()
        state = run(cfg, 4)
        save_checkpoint(state, tmp_path / "a.pldr")
        loaded, cfg2 = load_checkpoint(tmp_path / "a.pldr", expected=cfg)
        assert cfg2 == cfg and loaded.step == 4 and loaded.losses == state.losses
        save_checkpoint(loaded, tmp_path / "b.pldr")
        assert (tmp_path / "a.pldr").read_bytes() == (tmp_path / "b.pldr").read_bytes()
        assert (tmp_path / "a.pldr").read_bytes()[:4] == b"PLDR"

    def test_resume_matches_uninterrupted(self, tmp_path):
        cfg = run_cfg()
        full = run(cfg, 8)
        half = run(cfg, 4)
        checkpoint_io(half, tmp_path / "h.pldr", "save")
        resumed, _ = checkpoint_io(None, tmp_path / "h.pldr", "load")
        resumed = run(cfg, 8, state=resumed)
        assert resumed.losses == full.losses
        for (n, p), q in zip(full.model.named_parameters(), resumed.model.parameters()):
            assert torch.equal(p, q), n

    def test_mismatch_names_field(self, tmp_path):
        cfg = run_cfg()
        save_checkpoint(fresh_state(cfg), tmp_path / "a.pldr")
        other = cfg.replace(model=tiny_config(d_model=12, n_heads=2))
        with pytest.raises(CheckpointError, match=r"model\.d_model \(checkpoint=8, expected=12\)"):
            load_checkpoint(tmp_path / "a.pldr", expected=other)

    def test_bad_files(self, tmp_path):
        p = tmp_path / "x.pldr"
        p.write_bytes(b"NOPE" + bytes(12))
        with pytest.raises(CheckpointError, match="magic"):
            load_checkpoint(p)
        p.write_bytes(b"PLDR" + (99).to_bytes(4, "little") + bytes(8))
        with pytest.raises(CheckpointError, match="version"):
            load_checkpoint(p)
        with pytest.raises(CheckpointError):
            load_checkpoint(tmp_path / "missing.pldr")
