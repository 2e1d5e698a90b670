"""Command-line entry point.

Subcommands:
    train         run the training loop from a JSON config plus overrides
    eval          score a checkpoint on freshly sampled task examples
    verify-logic  print the probability-bound self-check report
    generate      greedy decoding from a checkpoint and a token prompt

Checkpoint paths that are bare file names are resolved inside the directory
named by the FOLNET_CKPT_DIR environment variable (default: current dir).
"""

from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np

from folnet.logic import verification_report
from folnet.model import load_checkpoint
from folnet.tasks import make_task
from folnet.text2text import greedy_generate
from folnet.train import TrainConfig, evaluate, train

# TrainConfig fields that may appear in a config file or as --set overrides
_SCALAR_FIELDS = {
    "task": str, "steps": int, "batch_size": int, "seq_len": int,
    "peak_lr": float, "warmup_ratio": float, "weight_decay": float,
    "adam_beta1": float, "adam_beta2": float, "adam_eps": float,
    "grad_clip": float, "seed": int, "eval_every": int, "eval_examples": int,
    "checkpoint_every": int, "checkpoint_path": str, "metrics_path": str,
    "n_entities": int,
}


def resolve_ckpt(path: str) -> str:
    """Bare file names land in $FOLNET_CKPT_DIR; paths pass through."""
    if os.path.basename(path) != path:
        return path
    return os.path.join(os.environ.get("FOLNET_CKPT_DIR", "."), path)


def _parse_override(item: str):
    if "=" not in item:
        raise argparse.ArgumentTypeError(f"override must be key=value, got {item!r}")
    key, value = item.split("=", 1)
    return key, value


def _apply_overrides(cfg_dict: dict, overrides) -> dict:
    for key, value in overrides:
        if key.startswith("model."):
            cfg_dict.setdefault("model", {})[key[len("model."):]] = json.loads(value)
        elif key in _SCALAR_FIELDS:
            cfg_dict[key] = _SCALAR_FIELDS[key](value)
        else:
            raise SystemExit(f"unknown config key {key!r}")
    return cfg_dict


def load_train_config(path, overrides) -> TrainConfig:
    cfg_dict = {}
    if path is not None:
        with open(path) as f:
            cfg_dict = json.load(f)
    cfg_dict = _apply_overrides(cfg_dict, overrides)
    if "checkpoint_path" in cfg_dict and cfg_dict["checkpoint_path"]:
        cfg_dict["checkpoint_path"] = resolve_ckpt(cfg_dict["checkpoint_path"])
    return TrainConfig(**cfg_dict)


def cmd_train(args) -> int:
    config = load_train_config(args.config, args.set)
    resume = resolve_ckpt(args.resume) if args.resume else None
    _, _, metrics = train(config, resume_from=resume)
    last = metrics[-1]
    print(f"done: step={last['step']} loss={last['loss']:.4f} "
          f"accuracy={last['accuracy']:.4f}")
    if config.checkpoint_path:
        print(f"checkpoint: {config.checkpoint_path}")
    return 0


def cmd_eval(args) -> int:
    path = resolve_ckpt(args.checkpoint)
    mc, params, _, meta = load_checkpoint(path)
    train_cfg = meta.get("train", {})
    task_name = args.task or train_cfg.get("task", "copy")
    seq_len = args.seq_len or train_cfg.get("seq_len", 16)
    seed = args.seed if args.seed is not None else train_cfg.get("seed", 0)
    n_entities = train_cfg.get("n_entities", 12)
    task = make_task(task_name, vocab=mc.vocab_size, n_entities=n_entities)
    config = TrainConfig(model=mc, task=task_name, seq_len=seq_len, seed=seed)
    report = evaluate(params, mc, task, args.examples, config)
    print(json.dumps({"task": task_name, **report}))
    return 0


def cmd_verify_logic(args) -> int:
    text = verification_report(seed=args.seed, trials=args.trials)
    print(text)
    return 0 if text.splitlines()[-1] == "overall: PASS" else 1


def cmd_generate(args) -> int:
    path = resolve_ckpt(args.checkpoint)
    mc, params, _, _ = load_checkpoint(path)
    prompt = np.array([int(t) for t in args.prompt.split(",")], dtype=np.intp)
    out = greedy_generate(prompt, params, mc, max_len=args.max_len,
                          end_token=args.end_token)
    print(",".join(str(int(t)) for t in out))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="folnet")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a model on a synthetic task")
    p.add_argument("--config", help="JSON file with TrainConfig fields")
    p.add_argument("--set", action="append", type=_parse_override, default=[],
                   metavar="KEY=VALUE",
                   help="override a config field; model.* values are JSON")
    p.add_argument("--resume", help="checkpoint to resume from")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    p.add_argument("checkpoint")
    p.add_argument("--task", help="task name (default: the one trained on)")
    p.add_argument("--examples", type=int, default=256)
    p.add_argument("--seq-len", type=int, dest="seq_len")
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("verify-logic", help="run the probability-bound checks")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--trials", type=int, default=1000)
    p.set_defaults(func=cmd_verify_logic)

    p = sub.add_parser("generate", help="greedy decoding from a checkpoint")
    p.add_argument("checkpoint")
    p.add_argument("prompt", help="comma-separated token ids")
    p.add_argument("--max-len", type=int, default=16, dest="max_len")
    p.add_argument("--end-token", type=int, dest="end_token")
    p.set_defaults(func=cmd_generate)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
