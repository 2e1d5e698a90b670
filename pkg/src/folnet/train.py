"""Training loop: Adam with decoupled weight decay, linear warmup/decay,
gradient clipping, line-delimited JSON metrics, and bitwise-replayable
checkpointing.

Reproducibility scheme: every step draws its data and dropout randomness
from fresh generators seeded by (run seed, step index), so resuming from a
checkpoint at step k replays steps k+1..N bit-for-bit.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np

from folnet.model import (
    ModelConfig,
    cls_logits,
    init_params,
    load_checkpoint,
    mlm_logits,
    model_forward,
    save_checkpoint,
)
from folnet.tasks import TaskSpec, batch_examples, make_task
from folnet.tensor import RngState, Tensor, gather_last, log_softmax_axis, scale_by
from folnet.text2text import build_masks

EVAL_STREAM = 999_983  # rng stream key for evaluation batches


@dataclass
class TrainConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    task: str = "copy"
    steps: int = 200
    batch_size: int = 16
    seq_len: int = 16
    peak_lr: float = 1e-3
    warmup_ratio: float = 0.1
    weight_decay: float = 0.01
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    grad_clip: float = 1.0
    seed: int = 0
    eval_every: int = 0          # 0: no mid-run evaluation
    eval_examples: int = 256
    checkpoint_every: int = 0    # 0: final checkpoint only
    checkpoint_path: Optional[str] = None
    metrics_path: Optional[str] = None
    n_entities: int = 12
    stop_accuracy: Optional[float] = None  # early stop once eval reaches this

    def __post_init__(self):
        if isinstance(self.model, dict):
            self.model = ModelConfig(**self.model)
        for name in ("steps", "batch_size", "seq_len"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.peak_lr < 0:
            raise ValueError("peak_lr must be nonnegative")
        if not 0.0 <= self.warmup_ratio < 1.0:
            raise ValueError("warmup_ratio must lie in [0, 1)")

    def to_dict(self):
        d = asdict(self)
        d["model"].pop("spec", None)
        return d


def learning_rate(step: int, config: TrainConfig) -> float:
    """Piecewise-linear schedule over 1-based update indices.

    Ramps 0 -> peak over the warmup steps (lr at step 0 would be 0), then
    decays linearly so the final update uses lr 0 exactly.
    """
    warmup = int(round(config.warmup_ratio * config.steps))
    if step <= warmup:
        return config.peak_lr * step / max(warmup, 1)
    if config.steps == warmup:
        return 0.0
    return config.peak_lr * (config.steps - step) / (config.steps - warmup)


def _decays(name: str) -> bool:
    # weight matrices and embeddings decay; biases/gains do not
    return name.endswith(".w") or name.startswith("emb.")


class AdamW:
    """Adam with decoupled weight decay over a named-parameter dict."""

    def __init__(self, params: dict[str, Tensor], config: TrainConfig):
        self.beta1 = config.adam_beta1
        self.beta2 = config.adam_beta2
        self.eps = config.adam_eps
        self.weight_decay = config.weight_decay
        self.t = 0
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}

    def step(self, params: dict[str, Tensor], lr: float) -> None:
        self.t += 1
        bc1 = 1.0 - self.beta1**self.t
        bc2 = 1.0 - self.beta2**self.t
        for name, p in params.items():
            if p.grad is None:
                continue
            g = p.grad
            self.m[name] = self.beta1 * self.m[name] + (1 - self.beta1) * g
            self.v[name] = self.beta2 * self.v[name] + (1 - self.beta2) * g * g
            update = (self.m[name] / bc1) / (np.sqrt(self.v[name] / bc2) + self.eps)
            if self.weight_decay and _decays(name):
                update = update + self.weight_decay * p.data
            p.data -= lr * update

    def state_arrays(self) -> dict[str, np.ndarray]:
        out = {"opt.t": np.array(float(self.t))}
        for k in self.m:
            out[f"opt.m.{k}"] = self.m[k]
            out[f"opt.v.{k}"] = self.v[k]
        return out

    def load_state(self, arrays: dict[str, np.ndarray]) -> None:
        self.t = int(arrays["opt.t"])
        for k in self.m:
            self.m[k] = arrays[f"opt.m.{k}"].copy()
            self.v[k] = arrays[f"opt.v.{k}"].copy()


def clip_gradients(params: dict[str, Tensor], max_norm: float) -> float:
    """Scale all gradients so their global L2 norm is at most max_norm."""
    total = 0.0
    for p in params.values():
        if p.grad is not None:
            total += float((p.grad**2).sum())
    norm = math.sqrt(total)
    if max_norm > 0 and norm > max_norm:
        scale = max_norm / norm
        for p in params.values():
            if p.grad is not None:
                p.grad *= scale
    return norm


def _forward_loss(params, task: TaskSpec, mc: ModelConfig, batch, targets,
                  loss_mask, labels, train=False, rng=None):
    """Cross-entropy loss tensor plus (accuracy, count) for the batch."""
    mode = build_masks(task.mask_mode, batch.length).matrix
    u, _ = model_forward(batch, params, mc, mode_matrix=mode, train=train, rng=rng)
    if task.kind == "token":
        logits = mlm_logits(u, params, mc)
        logp = log_softmax_axis(logits, -1)
        gold = gather_last(logp, targets)                    # [B, T]
        count = float(loss_mask.sum())
        if count == 0:
            raise ValueError("batch has no loss positions")
        loss = -(scale_by(gold, loss_mask).sum() * (1.0 / count))
        hits = float((((np.argmax(logits.data, -1) == targets) * loss_mask)).sum())
        return loss, hits / count, count
    logits = cls_logits(u, params, mc)
    logp = log_softmax_axis(logits, -1)
    gold = gather_last(logp, labels)                         # [B]
    count = float(labels.size)
    loss = -(gold.sum() * (1.0 / count))
    hits = float((np.argmax(logits.data, -1) == labels).sum())
    return loss, hits / count, count


def _write_metrics(path, record):
    if path is None:
        return
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, "a") as f:
        f.write(json.dumps(record) + "\n")


def _check_task_shapes(task: TaskSpec, mc: ModelConfig):
    if task.vocab_size > mc.vocab_size:
        raise ValueError(
            f"task {task.name!r} needs vocab {task.vocab_size}, model has {mc.vocab_size}"
        )
    if task.kind == "class" and task.n_classes != mc.n_classes:
        raise ValueError(
            f"task {task.name!r} has {task.n_classes} classes, model head has {mc.n_classes}"
        )


def train(config: TrainConfig, resume_from: Optional[str] = None):
    """Run the loop; returns (params, optimizer, metrics list)."""
    mc = config.model
    task = make_task(config.task, vocab=mc.vocab_size, n_entities=config.n_entities)
    _check_task_shapes(task, mc)
    if resume_from is not None:
        _, params, extra, meta = load_checkpoint(resume_from)
        start = int(meta["step"])
        opt = AdamW(params, config)
        opt.load_state(extra)
    else:
        params = init_params(mc, RngState(config.seed))
        start = 0
        opt = AdamW(params, config)
        if config.metrics_path and os.path.exists(config.metrics_path):
            os.remove(config.metrics_path)

    metrics = []
    for step in range(start + 1, config.steps + 1):
        data_rng = np.random.default_rng([config.seed, step, 0])
        drop_rng = np.random.default_rng([config.seed, step, 1])
        examples = task.sample(data_rng, config.seq_len, config.batch_size)
        batch, targets, loss_mask, labels = batch_examples(examples, config.seq_len)
        loss, acc, _ = _forward_loss(params, task, mc, batch, targets, loss_mask,
                                     labels, train=True, rng=drop_rng)
        loss_value = float(loss.data)
        if not math.isfinite(loss_value):
            raise RuntimeError(
                f"non-finite loss {loss_value} at step {step} "
                f"(task={config.task}, lr={learning_rate(step, config):.3g})"
            )
        loss.backward()
        grad_norm = clip_gradients(params, config.grad_clip)
        lr = learning_rate(step, config)
        opt.step(params, lr)
        for p in params.values():
            p.zero_grad()

        record = {"step": step, "loss": loss_value, "lr": lr, "accuracy": acc,
                  "grad_norm": grad_norm}
        stop = False
        if config.eval_every and step % config.eval_every == 0:
            record["eval_accuracy"] = evaluate(
                params, mc, task, config.eval_examples, config
            )["accuracy"]
            if (config.stop_accuracy is not None
                    and record["eval_accuracy"] >= config.stop_accuracy):
                stop = True
        metrics.append(record)
        _write_metrics(config.metrics_path, record)
        if (config.checkpoint_every and config.checkpoint_path
                and step % config.checkpoint_every == 0):
            save_checkpoint(f"{config.checkpoint_path}.step{step}", mc, params,
                            extra=opt.state_arrays(),
                            meta={"step": step, "train": config.to_dict()})
        if stop:
            break
    if config.checkpoint_path:
        save_checkpoint(config.checkpoint_path, mc, params,
                        extra=opt.state_arrays(),
                        meta={"step": metrics[-1]["step"], "train": config.to_dict()})
    return params, opt, metrics


def evaluate(params, mc: ModelConfig, task: TaskSpec, n: int,
             config: TrainConfig, chunk: int = 64) -> dict:
    """Deterministic held-out accuracy on freshly sampled examples."""
    if n <= 0:
        raise ValueError("need at least one evaluation example")
    rng = np.random.default_rng([config.seed, EVAL_STREAM])
    total_hits = 0.0
    total_count = 0.0
    total_loss = 0.0
    done = 0
    while done < n:
        b = min(chunk, n - done)
        examples = task.sample(rng, config.seq_len, b)
        batch, targets, loss_mask, labels = batch_examples(examples, config.seq_len)
        loss, acc, count = _forward_loss(params, task, mc, batch, targets,
                                         loss_mask, labels)
        total_hits += acc * count
        total_count += count
        total_loss += float(loss.data) * count
        done += b
    return {
        "accuracy": total_hits / total_count,
        "loss": total_loss / total_count,
        "examples": n,
    }
