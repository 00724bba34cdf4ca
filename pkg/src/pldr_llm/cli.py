"""Command line: pretrain, generate, dag-inspect, eval-loss, preset.

Settings come from a canonical-JSON RunConfig file; command-line flags
override the matching file keys (flags > file > built-in defaults).
Telemetry goes to $PLDR_TELEMETRY_DIR when set, otherwise to --out.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import sys
import time
from pathlib import Path

import torch

from .checkpoint import load_checkpoint, save_checkpoint
from .config import RunConfig
from .dag import TENSORS, dag_inference_report, dag_values, format_value
from .data import load_tokenizer, pack_corpus
from .errors import PLDRError
from .generation import generate
from .model import PLDRModel
from .presets import TABLE, preset
from .training import TelemetryWriter, TrainState, evaluate, split_batch, train_loop

log = logging.getLogger("pldr_llm")

EXIT_USAGE = 2


def _dtype(cfg: RunConfig):
    return torch.float64 if cfg.dtype == "float64" else torch.float32


def build_model(cfg: RunConfig) -> PLDRModel:
    torch.manual_seed(cfg.seed)
    return PLDRModel(cfg.model).to(_dtype(cfg))


def _telemetry_dir(out: Path) -> Path:
    d = Path(os.environ.get("PLDR_TELEMETRY_DIR") or out)
    d.mkdir(parents=True, exist_ok=True)
    return d


def _fail(msg: str, code: int = EXIT_USAGE) -> int:
    print(f"error: {msg}", file=sys.stderr)
    return code


def cmd_pretrain(args) -> int:
    cfg = RunConfig.load(args.config)
    if args.seed is not None:
        cfg = cfg.replace(seed=args.seed)
    train_path = cfg.data.train_path
    if not train_path:
        return _fail("config key data.train_path is not set")
    if not Path(train_path).is_file():
        return _fail(f"corpus not found: {train_path}")
    tok = load_tokenizer(cfg.data.tokenizer, cfg.data.digit_split, cfg.model.vocab_size)
    if (tok.pad_id, tok.end_id) != (cfg.model.pad_id, cfg.model.end_id):
        return _fail(
            f"model.pad_id/end_id ({cfg.model.pad_id}, {cfg.model.end_id}) differ from the tokenizer's "
            f"({tok.pad_id}, {tok.end_id})"
        )
    ctx = cfg.model.context_length
    train = pack_corpus(train_path, tok, ctx, cfg.data.batch_size)
    val_fn = None
    if cfg.data.val_path:
        if not Path(cfg.data.val_path).is_file():
            return _fail(f"validation corpus not found: {cfg.data.val_path}")
        val = pack_corpus(cfg.data.val_path, tok, ctx, cfg.data.batch_size)
        val_fn = val.batches

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    tdir = _telemetry_dir(out)
    model = build_model(cfg)
    state = TrainState.create(model, cfg.optimizer, seed=cfg.seed, config=cfg)

    def data():
        for _ in range(cfg.data.epochs):
            yield from train.batches()

    t0 = time.perf_counter()
    with TelemetryWriter(tdir / "telemetry.jsonl") as writer:
        train_loop(
            model, data(), cfg.optimizer, cfg.dag, cfg.telemetry,
            pad_id=cfg.model.pad_id, state=state, val_data=val_fn, writer=writer, max_steps=args.max_steps,
        )
    wall = time.perf_counter() - t0
    ckpt = out / "checkpoint.pldr"
    save_checkpoint(state, ckpt, cfg)

    loss, acc = evaluate(model, train.batches(), cfg.model.pad_id, max_batches=4)
    first = next(train.batches())
    inputs, _, real_in = split_batch(first.ids, first.lengths)
    with torch.no_grad():
        dls = dag_values(model(inputs, real_in).deductive)
    print(f"steps        {state.step}")
    print(f"train loss   {loss:.4f}")
    print(f"train acc    {acc:.4f}")
    for n in TENSORS:
        print(f"DL({n:<4})     {format_value(dls[n])}")
    print(f"wall time    {wall:.1f}s")
    print(f"checkpoint   {ckpt}")
    return 0


def _load(args):
    state, cfg = load_checkpoint(args.checkpoint)
    tok = load_tokenizer(cfg.data.tokenizer, cfg.data.digit_split, cfg.model.vocab_size)
    return state.model, cfg, tok


def cmd_generate(args) -> int:
    model, cfg, tok = _load(args)
    gp = cfg.generation
    over = {}
    if args.top_k is not None:
        over.update(strategy="top_k", top_k=args.top_k)
    if args.top_p is not None:
        over.update(strategy="top_p", top_p=args.top_p)
    if args.greedy:
        over.update(strategy="greedy")
    if args.max_new_tokens is not None:
        over.update(max_new_tokens=args.max_new_tokens)
    gp = dataclasses.replace(gp, **over)
    prompt = tok.encode(args.prompt, add_end=False)
    if not prompt:
        return _fail("prompt tokenizes to nothing")
    seed = cfg.seed if args.seed is None else args.seed
    stop = gp.stop_id if gp.stop_id is not None else cfg.model.end_id
    ids = generate(model, prompt, gp.max_new_tokens, gp.strategy, gp.top_k, gp.top_p, stop, seed)
    print(tok.decode(ids[len(prompt):]))
    return 0


def cmd_dag_inspect(args) -> int:
    model, cfg, tok = _load(args)
    prompt = tok.encode(args.prompt, add_end=False)
    if not prompt:
        return _fail("prompt tokenizes to nothing")
    report = dag_inference_report(model, prompt, args.n_gen, cfg.dag, cfg.model_id)
    out = Path(args.out)
    report.write_csv(out)
    print(f"# {report.method}")
    print("model | lambda1 | lambda2 | lambda3 | DL(A_LM) | DL(A_P) | DL(G_LM) | DLR(A_P,G_LM)")
    print(report.table_row())
    print(f"report written to {out}")
    return 0


def cmd_eval_loss(args) -> int:
    model, cfg, tok = _load(args)
    if not Path(args.corpus).is_file():
        return _fail(f"corpus not found: {args.corpus}")
    bs = args.batch_size or cfg.data.batch_size
    try:
        stream = pack_corpus(args.corpus, tok, cfg.model.context_length, bs)
        loss, acc = evaluate(model, stream.batches(), cfg.model.pad_id)
    except PLDRError as e:
        return _fail(f"cannot evaluate {args.corpus}: {e}")
    print(f"eval loss {loss:.8f}")
    print(f"eval acc  {acc:.8f}")
    if args.out or os.environ.get("PLDR_TELEMETRY_DIR"):
        tdir = _telemetry_dir(Path(args.out or "."))
        with open(tdir / "telemetry.jsonl", "a", encoding="utf-8") as fh:
            rec = {"corpus": str(args.corpus), "eval_acc": acc, "eval_loss": loss}
            fh.write(json.dumps(rec, sort_keys=True) + "\n")
    return 0


def cmd_preset(args) -> int:
    if args.name not in TABLE:
        return _fail(f"unknown preset {args.name!r}; choose from {', '.join(TABLE)}")
    print(preset(args.name).to_json())
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="pldr-llm", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("pretrain", help="train a model from a RunConfig")
    s.add_argument("--config", required=True)
    s.add_argument("--seed", type=int)
    s.add_argument("--out", default="run")
    s.add_argument("--max-steps", type=int)
    s.set_defaults(func=cmd_pretrain)

    s = sub.add_parser("generate", help="continue a prompt")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--prompt", required=True)
    s.add_argument("--top-p", type=float)
    s.add_argument("--top-k", type=int)
    s.add_argument("--greedy", action="store_true")
    s.add_argument("--max-new-tokens", type=int)
    s.add_argument("--seed", type=int)
    s.set_defaults(func=cmd_generate)

    s = sub.add_parser("dag-inspect", help="DAG loss of deductive outputs after greedy decoding")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--prompt", required=True)
    s.add_argument("--n-gen", type=int, default=50)
    s.add_argument("--out", default="dag_report.csv")
    s.set_defaults(func=cmd_dag_inspect)

    s = sub.add_parser("eval-loss", help="masked CE and accuracy over a corpus")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--corpus", required=True)
    s.add_argument("--batch-size", type=int)
    s.add_argument("--out")
    s.set_defaults(func=cmd_eval_loss)

    s = sub.add_parser("preset", help="print the RunConfig of a published configuration")
    s.add_argument("name")
    s.set_defaults(func=cmd_preset)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )
    try:
        return args.func(args)
    except PLDRError as e:
        return _fail(str(e))


if __name__ == "__main__":
    sys.exit(main())
