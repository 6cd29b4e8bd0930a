"""Synthetic patch-lookup task and a small training loop.

Each sample shows ``n_patches`` vision vectors and asks, through a language
query token, for the class of one of them. The vision vector carries a
one-hot position code and a one-hot class code in reserved coordinate
blocks, so the answer is linearly readable once attention routes to the
right patch.
"""
from __future__ import annotations

import dataclasses
import json
import math
from dataclasses import dataclass, field

import numpy as np

from . import numkit as nk
from .decoder import Model, embed_tokens, forward, logits


class TrainingDiverged(FloatingPointError):
    def __init__(self, step: int, loss: float):
        super().__init__(f"non-finite loss {loss} at step {step}")
        self.step = step
        self.loss = loss


@dataclass
class PatchTask:
    patches: np.ndarray  # (S, N, d_vision)
    tokens: np.ndarray  # (S, 2): [separator, query token]
    labels: np.ndarray  # (S,) class ids
    query_index: np.ndarray  # (S,) which patch is asked about
    n_patches: int
    n_classes: int

    @property
    def vocab(self) -> int:
        return self.n_patches + self.n_classes + 1

    @property
    def class_token_offset(self) -> int:
        return self.n_patches

    @property
    def separator(self) -> int:
        return self.n_patches + self.n_classes

    def __len__(self):
        return len(self.labels)

    def subset(self, idx) -> "PatchTask":
        return dataclasses.replace(
            self, patches=self.patches[idx], tokens=self.tokens[idx],
            labels=self.labels[idx], query_index=self.query_index[idx],
        )


def gen_task(seed: int, n_patches: int, n_classes: int, n_samples: int,
             d_vision: int = 32, noise: float = 0.3) -> PatchTask:
    if n_classes < 2:
        raise ValueError("need at least two classes")
    if n_patches < 1 or n_samples < 1:
        raise ValueError("need at least one patch and one sample")
    if d_vision < n_patches + n_classes:
        raise ValueError(f"d_vision={d_vision} cannot hold {n_patches} position + {n_classes} class coordinates")
    rng = np.random.default_rng(seed)
    labels = rng.permutation(np.arange(n_samples) % n_classes)
    query = rng.integers(0, n_patches, n_samples)
    classes = rng.integers(0, n_classes, (n_samples, n_patches))
    classes[np.arange(n_samples), query] = labels

    x = np.zeros((n_samples, n_patches, d_vision))
    x[:, np.arange(n_patches), np.arange(n_patches)] = 1.0
    np.put_along_axis(x[..., n_patches:n_patches + n_classes], classes[..., None], 1.0, axis=-1)
    rest = d_vision - n_patches - n_classes
    if rest:
        x[..., n_patches + n_classes:] = noise * rng.standard_normal((n_samples, n_patches, rest)) / math.sqrt(rest)
    x /= np.linalg.norm(x, axis=-1, keepdims=True)

    sep = n_patches + n_classes
    tokens = np.stack([np.full(n_samples, sep), query], axis=1)
    return PatchTask(x, tokens, labels, query, n_patches, n_classes)


@dataclass
class TrainReport:
    losses: list[float]
    accuracies: list[float]
    final_accuracy: float | None
    seed: int
    config: dict
    steps: int = 0
    extra: dict = field(default_factory=dict)

    def to_json(self) -> str:
        return json.dumps(dataclasses.asdict(self), indent=2, sort_keys=True)


def _answer_logits(model: Model, task: PatchTask, params=None, zero_vision: bool = False):
    x_v = np.zeros_like(task.patches) if zero_vision else task.patches
    dtype = next(iter(model.params.values())).dtype
    x_l = embed_tokens(model, task.tokens, params)
    trace = forward(model, x_v.astype(dtype), x_l, params)
    last = nk.take_rows(trace.output, -1)
    return logits(model, last, params)  # (S, 1, vocab)


def predict(model: Model, task: PatchTask, zero_vision: bool = False, batch: int = 512) -> np.ndarray:
    """Predicted class ids, arg-maxed over the class tokens only."""
    out = []
    lo = task.class_token_offset
    for s in range(0, len(task), batch):
        z = _answer_logits(model, task.subset(slice(s, s + batch)), zero_vision=zero_vision)
        out.append(z[:, 0, lo:lo + task.n_classes].argmax(axis=-1))
    return np.concatenate(out)


def accuracy(predictions, labels) -> float:
    predictions, labels = np.asarray(predictions), np.asarray(labels)
    return float((predictions == labels).mean())


def evaluate(model: Model, task: PatchTask, zero_vision: bool = False) -> float:
    return accuracy(predict(model, task, zero_vision), task.labels)


class Adam:
    def __init__(self, params: dict, lr: float, betas=(0.9, 0.999), eps: float = 1e-8):
        self.lr, self.b1, self.b2, self.eps = lr, betas[0], betas[1], eps
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.t = 0

    def step(self, params: dict, grads: dict) -> None:
        self.t += 1
        c1 = 1 - self.b1**self.t
        c2 = 1 - self.b2**self.t
        for k, g in grads.items():
            self.m[k] = self.b1 * self.m[k] + (1 - self.b1) * g
            self.v[k] = self.b2 * self.v[k] + (1 - self.b2) * g * g
            params[k] = params[k] - self.lr * (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps)


class SGD:
    def __init__(self, params: dict, lr: float):
        self.lr = lr

    def step(self, params: dict, grads: dict) -> None:
        for k, g in grads.items():
            params[k] = params[k] - self.lr * g


def train(model: Model, samples: PatchTask, epochs: int = 25, lr: float = 1e-3,
          optimizer: str = "adam", batch_size: int = 32, heldout: PatchTask | None = None,
          dtype=np.float32) -> TrainReport:
    """Cross-entropy on the answer position; updates ``model.params`` in place."""
    if samples.vocab != model.cfg.vocab:
        raise ValueError(f"task vocab {samples.vocab} != model vocab {model.cfg.vocab}")
    params = {k: v.astype(dtype) for k, v in model.params.items()}
    model.params = params
    opt = {"adam": Adam, "sgd": SGD}[optimizer](params, lr)
    rng = np.random.default_rng(model.cfg.seed + 1)
    answers = samples.labels + samples.class_token_offset
    losses, accs = [], []
    step = 0
    for _ in range(epochs):
        order = rng.permutation(len(samples))
        total, seen, correct = 0.0, 0, 0
        for s in range(0, len(order), batch_size):
            idx = order[s:s + batch_size]
            batch = samples.subset(idx)
            tape = nk.Tape()
            pv = {k: tape.var(v) for k, v in params.items()}
            z = _answer_logits(model, batch, pv)
            loss = nk.cross_entropy(z, answers[idx][:, None])
            lv = float(loss.value)
            if not math.isfinite(lv):
                raise TrainingDiverged(step, lv)
            tape.backward(loss)
            opt.step(params, {k: v.grad.astype(dtype) for k, v in pv.items()})
            step += 1
            total += lv * len(idx)
            seen += len(idx)
            lo = samples.class_token_offset
            correct += int((z.value[:, 0, lo:lo + samples.n_classes].argmax(-1) == batch.labels).sum())
        losses.append(total / seen)
        accs.append(correct / seen)
    final = evaluate(model, heldout) if heldout is not None else None
    return TrainReport(losses, accs, final, model.cfg.seed, dataclasses.asdict(model.cfg), steps=step)
