"""Minibatch SGD training of QCFS networks.

Recipe: cross-entropy loss, SGD with momentum, per-iteration cosine decay of
the learning rate, weight decay on weights and biases only. Thresholds
(``lambda``) are projected back above ``LAMBDA_FLOOR`` after every step.
"""
from __future__ import annotations

import hashlib
import json
import math
import sys
from dataclasses import asdict, dataclass

import numpy as np

from . import tensor as tn
from .activation import LAMBDA_FLOOR
from .errors import (ConfigurationError, DataError, DimensionError, DivergenceError,
                     NonFiniteError, UsageError)
from .network import AnnModel, forward_graph, predict


@dataclass
class TrainConfig:
    epochs: int = 30
    batch_size: int = 64
    lr0: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 5e-4
    seed: int = 0
    L: int = 4
    shift: float = 0.5

    def __post_init__(self):
        if self.epochs < 1:
            raise ConfigurationError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ConfigurationError("batch_size must be >= 1")
        # lr0 == 0 is allowed: it freezes the model, which is a useful probe
        if not self.lr0 >= 0:
            raise ConfigurationError("lr0 must be non-negative")
        if not 0 <= self.momentum < 1:
            raise ConfigurationError("momentum must lie in [0, 1)")
        if not self.weight_decay >= 0:
            raise ConfigurationError("weight_decay must be non-negative")
        if not 0 <= self.seed < 2**64:
            raise ConfigurationError("seed must fit in 64 unsigned bits")

    def digest(self) -> str:
        blob = json.dumps(asdict(self), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()


def _log_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def _check_labels(labels: np.ndarray, n_classes: int) -> np.ndarray:
    labels = np.asarray(labels)
    if labels.ndim != 1 or not np.issubdtype(labels.dtype, np.integer):
        raise DataError("labels must be a 1-D integer array")
    if labels.size and (labels.min() < 0 or labels.max() >= n_classes):
        raise DataError(f"label out of range [0, {n_classes})")
    return labels


def cross_entropy(logits, labels) -> tn.Tensor:
    """Mean negative log-likelihood of ``labels`` under softmax(``logits``)."""
    logits = tn.as_tensor(logits)
    if logits.data.ndim != 2:
        raise DimensionError(f"cross_entropy expects (B, C) logits, got {logits.shape}")
    b, c = logits.shape
    labels = _check_labels(labels, c)
    if labels.shape[0] != b:
        raise DimensionError(f"{b} logit rows but {labels.shape[0]} labels")
    logp = _log_softmax(logits.data)
    loss = -logp[np.arange(b), labels].mean()

    def back(g):
        d = np.exp(logp)
        d[np.arange(b), labels] -= 1.0
        return (d * (g / b),)

    return tn.apply("cross_entropy", np.asarray(loss), (logits,), back)


def cosine_lr(lr0: float, progress: float) -> float:
    return lr0 * 0.5 * (1.0 + math.cos(math.pi * progress))


def sgd_step(params: dict, grads: dict, state: dict, cfg: TrainConfig, epoch_progress: float) -> dict:
    """One in-place momentum-SGD update; returns ``params``.

    ``state`` holds a velocity buffer per parameter name and is created lazily.
    Names ending in ``.lambda`` are exempt from weight decay and are clamped at
    ``LAMBDA_FLOOR`` after the update.
    """
    lr = cosine_lr(cfg.lr0, epoch_progress)
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            continue
        is_lambda = name.endswith(".lambda")
        d = g if is_lambda or cfg.weight_decay == 0 else g + cfg.weight_decay * p
        v = state.get(name)
        v = d.copy() if v is None else cfg.momentum * v + d
        state[name] = v
        p -= lr * v
        if is_lambda:
            np.maximum(p, LAMBDA_FLOOR, out=p)
    return params


def loss_and_grads(model: AnnModel, x, y, params: dict | None = None):
    """Cross-entropy on one batch and its gradient for every trainable array."""
    params = model.trainable() if params is None else params
    tape = tn.Tape()
    leaves = {k: tape.leaf(v, name=k) for k, v in params.items()}
    outs = forward_graph(model, x, leaves)
    loss = cross_entropy(outs[-1], y)
    tn.backward(loss)
    grads = {k: (t.grad if t.grad is not None else np.zeros_like(t.data)) for k, t in leaves.items()}
    return float(loss.data), outs[-1].data, grads


def accuracy(model: AnnModel, data) -> float:
    return float(np.mean(predict(model, data.inputs) == data.labels))


def train(model: AnnModel, data, cfg: TrainConfig, test_data=None, out="stdout"):
    """Train ``model`` in place and return ``(best_model, history)``.

    ``best_model`` is a copy taken at the epoch with the highest test accuracy
    (or the final model when no test set is given). One CSV row per epoch,
    ``epoch,train_loss,train_acc,test_acc,lr``, is written to ``out``
    (standard output by default, nothing when ``None``).
    """
    if out == "stdout":
        out = sys.stdout
    if len(data.labels) == 0:
        raise DataError("training set is empty")
    if any(l.kind == "activation" and l.activation == "relu" for l in model.layers):
        raise UsageError("train() expects a QCFS model; call transform_to_qcfs first")
    n = len(data.labels)
    n_batches = math.ceil(n / cfg.batch_size)
    total_steps = cfg.epochs * n_batches
    params = {k: np.array(v, dtype=np.float64) for k, v in model.trainable().items()}
    model.load_trainable(params)
    state: dict = {}
    history = []
    best, best_acc = None, -1.0
    if out is not None:
        print("epoch,train_loss,train_acc,test_acc,lr", file=out, flush=True)

    for epoch in range(cfg.epochs):
        order = np.random.default_rng([cfg.seed, epoch]).permutation(n)
        loss_sum, correct = 0.0, 0
        lr_epoch = cosine_lr(cfg.lr0, epoch * n_batches / total_steps)
        for bi in range(n_batches):
            idx = order[bi * cfg.batch_size:(bi + 1) * cfg.batch_size]
            xb, yb = data.inputs[idx], data.labels[idx]
            try:
                loss, logits, grads = loss_and_grads(model, xb, yb, params)
            except NonFiniteError as exc:
                raise DivergenceError(f"non-finite values at epoch {epoch + 1}, batch {bi + 1}: {exc}") from exc
            if not math.isfinite(loss):
                raise DivergenceError(f"loss is {loss} at epoch {epoch + 1}, batch {bi + 1}")
            loss_sum += loss * len(idx)
            correct += int(np.sum(np.argmax(logits, axis=1) == yb))
            progress = (epoch * n_batches + bi) / total_steps
            sgd_step(params, grads, state, cfg, progress)
            model.load_trainable({k: v for k, v in params.items() if k.endswith(".lambda")})
        test_acc = accuracy(model, test_data) if test_data is not None else float("nan")
        row = {"epoch": epoch + 1, "train_loss": loss_sum / n, "train_acc": correct / n,
               "test_acc": test_acc, "lr": lr_epoch}
        history.append(row)
        if out is not None:
            print(f"{row['epoch']},{row['train_loss']:.6f},{row['train_acc']:.6f},"
                  f"{row['test_acc']:.6f},{row['lr']:.6g}", file=out, flush=True)
        if test_data is not None and test_acc > best_acc:
            best_acc, best = test_acc, model.copy()

    final = best if best is not None else model.copy()
    final.meta.update({"seed": cfg.seed, "config": asdict(cfg), "config_digest": cfg.digest(),
                       "epochs_trained": cfg.epochs})
    if test_data is not None:
        final.meta["test_accuracy"] = best_acc
    return final, history
