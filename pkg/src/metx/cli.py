"""Command-line entry point: ``metx <command> [flags]``."""

from __future__ import annotations

import argparse
import logging
import os
import sys

import numpy as np

from . import checkpoint as ckpt_io
from . import gradcheck as gc
from . import harness
from .config import ConfigError, RunConfig
from .data import decode, generate_corpus, import_corpus
from .tensor import NonFiniteError

# flag -> RunConfig field
FLAG_FIELDS = {
    "num_expert": "num_expert", "lambda": "lam", "seed": "seed", "epochs": "epochs",
    "batch_size": "batch_size", "lr": "learning_rate", "n_samples": "n_samples",
    "enc_layers": "enc_layers", "dec_layers": "dec_layers", "validate_every": "validate_every",
}
SWITCHES = ("bilinear_encoder", "expert_tokens", "orthogonal_loss", "expert_voting")


def _add_config_flags(sp: argparse.ArgumentParser) -> None:
    sp.add_argument("--config", help="key = value config file")
    sp.add_argument("--out", help="output directory")
    sp.add_argument("--num-expert", type=int)
    sp.add_argument("--lambda", type=float)
    sp.add_argument("--seed", type=int)
    sp.add_argument("--epochs", type=int)
    sp.add_argument("--batch-size", type=int)
    sp.add_argument("--lr", type=float)
    sp.add_argument("--n-samples", type=int)
    sp.add_argument("--enc-layers", type=int)
    sp.add_argument("--dec-layers", type=int)
    sp.add_argument("--validate-every", type=int)
    for s in SWITCHES:
        sp.add_argument(f"--{s.replace('_', '-')}", dest=s, action=argparse.BooleanOptionalAction, default=None)


def config_from_args(args) -> RunConfig:
    cfg = RunConfig.load(args.config) if args.config else RunConfig()
    kw = {field: getattr(args, flag) for flag, field in FLAG_FIELDS.items()
          if getattr(args, flag, None) is not None}
    kw.update({f"use_{s}": getattr(args, s) for s in SWITCHES if getattr(args, s, None) is not None})
    if getattr(args, "out", None):
        kw["out_dir"] = args.out
    return cfg.replace(**kw)


def _samples(args, cfg):
    if getattr(args, "corpus", None):
        return import_corpus(args.corpus)
    return harness.make_splits(cfg)[3]


def cmd_train(args) -> int:
    cfg = config_from_args(args)
    os.makedirs(cfg.out_dir, exist_ok=True)
    cfg.save(os.path.join(cfg.out_dir, "config.txt"))
    res = harness.train(cfg)
    print(f"final checkpoint: {res.final_path}")
    for epoch, score in res.val_history:
        print(f"epoch {epoch}\tval CIDEr {score:.4f}")
    return 0


def cmd_evaluate(args) -> int:
    ck = ckpt_io.load(args.checkpoint)
    samples = import_corpus(args.corpus) if args.corpus else harness.make_splits(ck.config)[3]
    res = harness.evaluate(ck, samples, args.out)
    sys.stdout.write(res.table_text())
    return 0


def cmd_generate(args) -> int:
    ck = ckpt_io.load(args.checkpoint)
    cfg = ck.config
    if args.corpus:
        sample = import_corpus(args.corpus)[args.index]
    else:
        sample = generate_corpus(args.sample_seed, args.index + 1)[args.index]
    texts, winner, scores = harness.expert_reports(ck.params, cfg.replace(use_expert_voting=cfg.experts > 1),
                                                   ck.vocab, sample.image[None])[0]
    for i, (t, s) in enumerate(zip(texts, scores)):
        mark = "*" if i == winner else " "
        print(f"{mark}{i}\t{s:.6f}\t{t}")
    print(f"reference\t{sample.report}")
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        maps = harness.attention_maps(ck.params, cfg, sample.image)
        for m, grid in enumerate(maps):
            np.savetxt(os.path.join(args.out, f"attention_expert{m}.txt"), grid, fmt="%.8f")
        print(f"wrote {len(maps)} attention maps to {args.out}")
    return 0


def cmd_ablate(args) -> int:
    cfg = config_from_args(args)
    res = harness.ablate(cfg, write=args.write)
    text = res.text()
    sys.stdout.write(text)
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        with open(os.path.join(args.out, "ablation.txt"), "w") as fh:
            fh.write(text)
    return 0


def cmd_param_count(args) -> int:
    cfg = config_from_args(args)
    for name, n in harness.param_count(cfg).items():
        print(f"{name}\t{n}")
    return 0


def cmd_gradcheck(args) -> int:
    rep = gc.run(n_trials=args.trials, seed=args.seed or 0)
    print(rep.text())
    return 0 if rep.ok else 1


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="metx", description="Multi-expert report generation on synthetic images.")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    sp = sub.add_parser("train", help="train a model")
    _add_config_flags(sp)
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("evaluate", help="score a checkpoint on the test split")
    sp.add_argument("checkpoint")
    sp.add_argument("--corpus", help="exported JSONL corpus (default: the checkpoint's own test split)")
    sp.add_argument("--out", help="directory for eval_table.tsv and eval_records.jsonl")
    sp.set_defaults(func=cmd_evaluate)

    sp = sub.add_parser("generate", help="M reports and attention maps for one sample")
    sp.add_argument("checkpoint")
    sp.add_argument("--corpus")
    sp.add_argument("--index", type=int, default=0)
    sp.add_argument("--sample-seed", type=int, default=12345)
    sp.add_argument("--out", help="directory for per-expert attention grids")
    sp.set_defaults(func=cmd_generate)

    sp = sub.add_parser("ablate", help="train and score the five ablation rows")
    _add_config_flags(sp)
    sp.add_argument("--write", action="store_true", help="keep per-row checkpoints")
    sp.set_defaults(func=cmd_ablate)

    sp = sub.add_parser("param-count", help="parameter census")
    _add_config_flags(sp)
    sp.set_defaults(func=cmd_param_count)

    sp = sub.add_parser("gradcheck", help="finite-difference check of every layer")
    sp.add_argument("--trials", type=int, default=10)
    sp.add_argument("--seed", type=int, default=0)
    sp.set_defaults(func=cmd_gradcheck)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except (ConfigError, ckpt_io.CheckpointError, harness.VocabMismatch, harness.TrainingDiverged,
            NonFiniteError, FileNotFoundError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
