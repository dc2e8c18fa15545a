"""AdamW, the warmup * inverse-sqrt schedule, and the train/eval loops.

The schedule multiplies a base rate by min(1, step/warmup) during warmup
and decays as 1/sqrt(max(step, warmup)) afterwards; both branches meet at
base_lr/sqrt(warmup), so the curve is continuous.  Steps are 1-indexed.

Gradient accumulation: each optimizer step sums gradients over
``accumulation_factor`` micro-batches, divides by the factor, applies one
AdamW update, then zeroes the gradients.  Because the per-micro-batch loss
is a mean, this reproduces the update of one batch that is factor times
larger.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np

from . import tensor as T
from .model import Model
from .rng import Rng
from .tasks import Example, batch


@dataclass
class OptimizerState:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.1
    t: int = 0
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)


@dataclass
class ScheduleConfig:
    base_lr: float = 0.05
    warmup_steps: int = 8000
    total_steps: int = 20000
    accumulation_factor: int = 1
    batch_size: int = 32

    def __post_init__(self):
        if self.warmup_steps > self.total_steps:
            raise ValueError(f"warmup_steps {self.warmup_steps} > total_steps {self.total_steps}")
        if self.accumulation_factor < 1:
            raise ValueError("accumulation_factor must be >= 1")


def lr_at_step(step: int, sc: ScheduleConfig) -> float:
    """base_lr * min(1, step/warmup) * 1/sqrt(max(step, warmup))."""
    if step < 1:
        raise ValueError(f"schedule is 1-indexed, got step {step}")
    warm = min(1.0, step / sc.warmup_steps) if sc.warmup_steps > 0 else 1.0
    return sc.base_lr * warm / np.sqrt(max(step, sc.warmup_steps))


def _decays(name: str) -> bool:
    # decoupled decay hits weight matrices only, not biases/LN/embeddings
    return name.endswith(".weight")


def adamw_step(params: Dict[str, T.Tensor], st: OptimizerState, lr: float,
               clip_norm: Optional[float] = None) -> None:
    """One decoupled-weight-decay Adam update over all trainable parameters."""
    trainable = {n: p for n, p in params.items() if p.requires_grad}
    for name, p in trainable.items():
        if p.grad is None:
            raise ValueError(f"missing gradient for trainable parameter {name!r}")
    if clip_norm is not None:
        total = np.sqrt(sum(float((p.grad * p.grad).sum()) for p in trainable.values()))
        if total > clip_norm:
            for p in trainable.values():
                p.grad *= clip_norm / total
    st.t += 1
    bc1 = 1.0 - st.beta1**st.t
    bc2 = 1.0 - st.beta2**st.t
    for name, p in trainable.items():
        g = p.grad.astype(np.float64, copy=False)
        if name not in st.m:
            st.m[name] = np.zeros(p.data.shape, dtype=np.float64)
            st.v[name] = np.zeros(p.data.shape, dtype=np.float64)
        m, v = st.m[name], st.v[name]
        m += (1.0 - st.beta1) * (g - m)
        v += (1.0 - st.beta2) * (g * g - v)
        update = (m / bc1) / (np.sqrt(v / bc2) + st.eps)
        if st.weight_decay and _decays(name):
            update = update + st.weight_decay * p.data
        p.data -= (lr * update).astype(p.dtype)


def _forward_batch(model: Model, examples: Sequence[Example], rng: Optional[Rng],
                   training: bool) -> tuple:
    """Stacked logits + loss + correct count for a list of examples."""
    pair = examples[0].tokens_b is not None
    width = max(ex.true_length for ex in examples) + 1
    ids, mask, labels = batch(examples, width)
    if pair:
        ids_b, mask_b, _ = batch(examples, max(len(ex.tokens_b) for ex in examples) + 1, which="tokens_b")
        rows = [model.classify_pair(ids[i], ids_b[i], training=training, rng=rng,
                                    pad_mask_a=mask[i], pad_mask_b=mask_b[i], prepend_cls=False)
                for i in range(len(examples))]
    else:
        rows = [model.classify(ids[i], training=training, rng=rng,
                               pad_mask=mask[i], prepend_cls=False)
                for i in range(len(examples))]
    logits = T.stack_rows(rows)
    loss = T.cross_entropy_mean(logits, labels)
    correct = int((logits.data.argmax(axis=1) == labels).sum())
    return loss, correct, len(examples)


class _EpochSampler:
    """Cycles through the dataset in rng-shuffled epochs."""

    def __init__(self, data: Sequence[Example], rng: Rng):
        self.data = data
        self.rng = rng
        self.order: List[int] = []
        self.pos = 0

    def draw(self, k: int) -> List[Example]:
        out = []
        while len(out) < k:
            if self.pos >= len(self.order):
                self.order = self.rng.permutation(len(self.data)).tolist()
                self.pos = 0
            out.append(self.data[self.order[self.pos]])
            self.pos += 1
        return out


def train(model: Model, data: Sequence[Example], sc: ScheduleConfig, rng: Rng, *,
          opt_state: Optional[OptimizerState] = None,
          eval_data: Optional[Sequence[Example]] = None,
          eval_every: int = 0,
          hooks: Sequence[Callable] = (),
          clip_norm: Optional[float] = None,
          record_timing: bool = True,
          stop_fn: Optional[Callable[[List[dict]], bool]] = None) -> List[dict]:
    """Run the optimization loop; returns metric rows
    {step, split, loss, accuracy, lr, wall_ms}.

    Hooks are called as hook(step, row, model) after every optimizer step.
    ``stop_fn(history)`` may end training early (used by accuracy-target runs).
    """
    if not data:
        raise ValueError("empty training dataset")
    if opt_state is None:
        opt_state = OptimizerState()
    sampler = _EpochSampler(data, rng.split(1))
    drop_rng = rng.split(2)
    params = model.named_parameters()
    history: List[dict] = []

    for step in range(1, sc.total_steps + 1):
        t0 = time.perf_counter()
        loss_sum, correct, seen = 0.0, 0, 0
        for _ in range(sc.accumulation_factor):
            micro = sampler.draw(sc.batch_size)
            loss, c, n = _forward_batch(model, micro, drop_rng, training=True)
            if loss.requires_grad:  # nothing to do when every parameter is frozen
                T.backward(loss)
            loss_sum += loss.item()
            correct += c
            seen += n
        if sc.accumulation_factor > 1:
            for p in params.values():
                if p.requires_grad and p.grad is not None:
                    p.grad /= sc.accumulation_factor
        lr = lr_at_step(step, sc)
        adamw_step(params, opt_state, lr, clip_norm)
        model.zero_grads()
        wall_ms = (time.perf_counter() - t0) * 1e3 if record_timing else 0.0
        row = {"step": step, "split": "train",
               "loss": loss_sum / sc.accumulation_factor,
               "accuracy": correct / seen, "lr": lr, "wall_ms": wall_ms}
        history.append(row)
        for hook in hooks:
            hook(step, row, model)
        if eval_data is not None and eval_every and (step % eval_every == 0 or step == sc.total_steps):
            t1 = time.perf_counter()
            acc, mean_loss = evaluate(model, eval_data)
            history.append({"step": step, "split": "eval", "loss": mean_loss,
                            "accuracy": acc, "lr": lr,
                            "wall_ms": (time.perf_counter() - t1) * 1e3 if record_timing else 0.0})
        if stop_fn is not None and stop_fn(history):
            break
    return history


def evaluate(model: Model, dataset: Sequence[Example], chunk: int = 32) -> tuple:
    """(accuracy, mean loss) with dropout disabled."""
    if not dataset:
        raise ValueError("empty evaluation dataset")
    correct, loss_total = 0, 0.0
    for i in range(0, len(dataset), chunk):
        part = dataset[i:i + chunk]
        loss, c, n = _forward_batch(model, part, None, training=False)
        correct += c
        loss_total += loss.item() * n
    return correct / len(dataset), loss_total / len(dataset)
