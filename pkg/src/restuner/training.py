"""Training over the trainable subset only: loss, optimizers, grad check.

The frozen backbone never receives grads (its params opt out of the
graph), so a step can only move tuner + head weights. Metrics are emitted
as one JSON object per line.
"""

from __future__ import annotations

import json
import math
import time
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .backbone import ModelGraph, trainable_parameters
from .tensor import GradientError, Tensor


@dataclass
class TrainConfig:
    optimizer: str = "adamw"
    lr: float = 1e-3
    weight_decay: float = 0.0
    beta1: float = 0.9
    beta2: float = 0.999
    momentum: float = 0.9
    epochs: int = 10
    batch_size: int = 32
    seed: int = 0
    schedule: str = "cosine"
    label_smoothing: float = 0.0

    def __post_init__(self):
        if self.lr < 0:
            raise ValueError(f"lr must be nonnegative, got {self.lr}")
        if self.batch_size < 1:
            raise ValueError(f"batch size must be >= 1, got {self.batch_size}")
        if not 0.0 <= self.label_smoothing < 1.0:
            raise ValueError(f"label smoothing must be in [0,1), got {self.label_smoothing}")
        if self.optimizer not in ("adamw", "sgd"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        if self.schedule not in ("constant", "cosine"):
            raise ValueError(f"unknown schedule {self.schedule!r}")


def cross_entropy(logits: Tensor, labels: np.ndarray, smoothing: float = 0.0) -> Tensor:
    """Mean batch cross-entropy of softmax(logits) vs (smoothed) labels."""
    B, K = logits.shape
    labels = np.asarray(labels)
    if labels.min(initial=0) < 0 or labels.max(initial=0) >= K:
        raise ValueError(f"labels out of range [0, {K})")
    target = np.full((B, K), smoothing / K)
    target[np.arange(B), labels] += 1.0 - smoothing

    z = logits.data
    zmax = z.max(axis=-1, keepdims=True)
    logsumexp = zmax + np.log(np.exp(z - zmax).sum(axis=-1, keepdims=True))
    log_probs = z - logsumexp
    loss_val = -(target * log_probs).sum() / B

    out = T._make(np.asarray(loss_val), (logits,), None)

    def backward():
        probs = np.exp(log_probs)
        logits.grad += out.grad * (probs - target) / B

    out._backward = backward
    return out


class Optimizer:
    """Holds per-parameter state for the trainable set only."""

    def __init__(self, params, cfg: TrainConfig):
        self.params = list(params)  # (name, Parameter)
        self.cfg = cfg
        self.step_count = 0
        self.state = {name: self._init_state(p) for name, p in self.params}

    def zero_grad(self):
        for _, p in self.params:
            p.zero_grad()

    def step(self, lr: float):
        self.step_count += 1
        for name, p in self.params:
            if p.grad is None:
                raise GradientError(f"trainable parameter {name!r} has no grad buffer")
            self._update(name, p, lr)

    def _init_state(self, p):
        raise NotImplementedError

    def _update(self, name, p, lr):
        raise NotImplementedError


class SGD(Optimizer):
    def _init_state(self, p):
        return {"v": np.zeros_like(p.data)}

    def _update(self, name, p, lr):
        g = p.grad + self.cfg.weight_decay * p.data
        v = self.state[name]["v"]
        v *= self.cfg.momentum
        v += g
        p.data -= lr * v


class AdamW(Optimizer):
    eps = 1e-8

    def _init_state(self, p):
        return {"m": np.zeros_like(p.data), "v": np.zeros_like(p.data)}

    def _update(self, name, p, lr):
        cfg = self.cfg
        st = self.state[name]
        t = self.step_count
        st["m"] = cfg.beta1 * st["m"] + (1 - cfg.beta1) * p.grad
        st["v"] = cfg.beta2 * st["v"] + (1 - cfg.beta2) * p.grad**2
        m_hat = st["m"] / (1 - cfg.beta1**t)
        v_hat = st["v"] / (1 - cfg.beta2**t)
        p.data -= lr * (m_hat / (np.sqrt(v_hat) + self.eps) + cfg.weight_decay * p.data)


def make_optimizer(model: ModelGraph, cfg: TrainConfig) -> Optimizer:
    params = trainable_parameters(model)
    return AdamW(params, cfg) if cfg.optimizer == "adamw" else SGD(params, cfg)


def lr_at(cfg: TrainConfig, step: int, total_steps: int) -> float:
    if cfg.schedule == "constant" or total_steps <= 1:
        return cfg.lr
    return cfg.lr * 0.5 * (1.0 + math.cos(math.pi * step / max(1, total_steps - 1)))


def _batches(n: int, batch_size: int, rng: np.random.Generator | None):
    order = np.arange(n) if rng is None else rng.permutation(n)
    for lo in range(0, n, batch_size):
        yield order[lo : lo + batch_size]


def train(
    model: ModelGraph,
    dataset,
    cfg: TrainConfig,
    metrics_path=None,
    eval_dataset=None,
    quiet: bool = False,
):
    """Optimize trainable params; returns the per-epoch metrics history."""
    if dataset.num_classes != model.cfg.num_classes:
        raise ValueError(
            f"dataset has {dataset.num_classes} classes, model expects {model.cfg.num_classes}"
        )
    opt = make_optimizer(model, cfg)
    rng = np.random.default_rng(cfg.seed)
    n = len(dataset.labels)
    steps_per_epoch = math.ceil(n / cfg.batch_size)
    total_steps = steps_per_epoch * cfg.epochs
    history = []
    step = 0
    sink = open(metrics_path, "w") if metrics_path else None
    try:
        for epoch in range(cfg.epochs):
            t0 = time.monotonic()
            model.train_mode()
            loss_sum = 0.0
            correct = 0
            for idx in _batches(n, cfg.batch_size, rng):
                images = Tensor(dataset.images[idx])
                labels = dataset.labels[idx]
                logits = model(images)
                loss = cross_entropy(logits, labels, cfg.label_smoothing)
                opt.zero_grad()
                loss.backward()
                opt.step(lr_at(cfg, step, total_steps))
                step += 1
                loss_sum += loss.item() * len(idx)
                correct += int((logits.data.argmax(axis=-1) == labels).sum())
            record = {
                "epoch": epoch,
                "split": "train",
                "loss": loss_sum / n,
                "accuracy": correct / n,
                "elapsed_sec": time.monotonic() - t0,
            }
            history.append(record)
            _emit(record, sink, quiet)
            if eval_dataset is not None:
                acc, mean_loss = evaluate(model, eval_dataset, cfg.batch_size)
                record = {
                    "epoch": epoch,
                    "split": "eval",
                    "loss": mean_loss,
                    "accuracy": acc,
                    "elapsed_sec": time.monotonic() - t0,
                }
                history.append(record)
                _emit(record, sink, quiet)
    finally:
        if sink:
            sink.close()
    model.eval_mode()
    return history


def _emit(record, sink, quiet):
    line = json.dumps(record)
    if not quiet:
        print(line)
    if sink:
        sink.write(line + "\n")


def evaluate(model: ModelGraph, dataset, batch_size: int = 64):
    """(accuracy, mean loss) in eval mode; deterministic."""
    n = len(dataset.labels)
    if n == 0:
        raise ValueError("cannot evaluate on an empty dataset")
    model.eval_mode()
    loss_sum = 0.0
    correct = 0
    for idx in _batches(n, batch_size, rng=None):
        logits = model(Tensor(dataset.images[idx]))
        labels = dataset.labels[idx]
        loss_sum += cross_entropy(logits, labels).item() * len(idx)
        correct += int((logits.data.argmax(axis=-1) == labels).sum())
    return correct / n, loss_sum / n


def grad_check(model: ModelGraph, images, labels, eps: float = 1e-5, tol: float = 1e-4):
    """Backward vs central differences, per trainable tensor.

    Returns (report, all_pass) where report maps parameter name to
    {"rel_err", "pass"}. Intended for small configs only.
    """
    model.eval_mode()
    images = np.asarray(images, dtype=np.float64)
    labels = np.asarray(labels)

    def loss_value() -> float:
        logits = model(Tensor(images))
        return cross_entropy(logits, labels).item()

    logits = model(Tensor(images))
    loss = cross_entropy(logits, labels)
    if not math.isfinite(loss.item()):
        raise GradientError("non-finite loss in grad check")
    params = trainable_parameters(model)
    for _, p in params:
        p.zero_grad()
    loss.backward()
    autodiff = {name: p.grad.copy() for name, p in params}

    report = {}
    all_pass = True
    for name, p in params:
        fd = np.zeros_like(p.data)
        flat_data = p.data.reshape(-1)
        flat_fd = fd.reshape(-1)
        for i in range(p.data.size):
            orig = flat_data[i]
            flat_data[i] = orig + eps
            f_plus = loss_value()
            flat_data[i] = orig - eps
            f_minus = loss_value()
            flat_data[i] = orig
            flat_fd[i] = (f_plus - f_minus) / (2.0 * eps)
        err = T.rel_error(autodiff[name], fd)
        ok = err < tol
        all_pass &= ok
        report[name] = {"rel_err": err, "pass": ok}
    return report, all_pass
