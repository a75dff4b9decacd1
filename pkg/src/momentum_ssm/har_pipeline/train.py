"""Mini-batch training: Adam with bias correction, L2 weight decay, global-norm
clipping, per-epoch cosine learning rate and early stopping on validation loss."""

from __future__ import annotations

import copy
import dataclasses
import math
from dataclasses import dataclass, field
from typing import Callable, Iterable

import numpy as np

from ..numkit import ContractError, Rng
from .model import Model


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-3
    weight_decay: float = 1e-4
    batch: int = 16
    max_epochs: int = 50
    patience: int = 10
    clip_norm: float = 1.0
    seed: int = 0
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8

    def __post_init__(self):
        if self.lr < 0 or self.weight_decay < 0:
            raise ContractError("lr and weight_decay must be non-negative")
        if self.batch < 1 or self.max_epochs < 0 or self.patience < 1:
            raise ContractError("batch and patience must be positive, max_epochs non-negative")
        if not self.clip_norm > 0:
            raise ContractError("clip_norm must be positive")

    def replace(self, **changes) -> "TrainConfig":
        return dataclasses.replace(self, **changes)


@dataclass
class TaskData:
    train_x: np.ndarray
    train_y: np.ndarray
    val_x: np.ndarray
    val_y: np.ndarray

    def __post_init__(self):
        if len(self.train_y) == 0 or len(self.val_y) == 0:
            raise ContractError("train and validation splits must be non-empty")
        if len(self.train_x) != len(self.train_y) or len(self.val_x) != len(self.val_y):
            raise ContractError("every window needs exactly one label")


class DivergenceError(RuntimeError):
    def __init__(self, step: int, epoch: int):
        self.step = step
        self.epoch = epoch
        super().__init__(f"non-finite loss at step {step} (epoch {epoch})")


@dataclass
class TrainResult:
    history: list[dict] = field(default_factory=list)
    best_epoch: int = 0
    best_val_loss: float = math.inf


class Adam:
    """Adam with bias correction; weight decay is added to the gradient."""

    def __init__(self, beta1=0.9, beta2=0.999, eps=1e-8, weight_decay=0.0):
        self.beta1, self.beta2, self.eps, self.weight_decay = beta1, beta2, eps, weight_decay
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.t = 0

    def step(self, params: dict, grads: dict, lr: float) -> None:
        self.t += 1
        c1 = 1.0 - self.beta1**self.t
        c2 = 1.0 - self.beta2**self.t
        for name, g in grads.items():
            p = params[name]
            g = g + self.weight_decay * p
            m = self.m.get(name, 0.0) * self.beta1 + (1.0 - self.beta1) * g
            v = self.v.get(name, 0.0) * self.beta2 + (1.0 - self.beta2) * g * g
            self.m[name], self.v[name] = m, v
            params[name] = p - lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def clip_by_global_norm(grads: dict, max_norm: float):
    """Scale all gradients jointly so their global l2 norm is at most ``max_norm``."""
    norm = math.sqrt(sum(float(np.sum(np.square(g))) for g in grads.values()))
    if norm > max_norm:
        scale = max_norm / norm
        grads = {k: g * scale for k, g in grads.items()}
    return grads, norm


def cosine_lr(base: float, epoch: int, max_epochs: int) -> float:
    if max_epochs <= 0:
        return base
    return base * 0.5 * (1.0 + math.cos(math.pi * epoch / max_epochs))


def train(model: Model, data: TaskData, tc: TrainConfig, rng: Rng | None = None,
          frozen: Iterable[str] = (), on_epoch: Callable[[Model, int], None] | None = None,
          restore_best: bool = True) -> TrainResult:
    """Train ``model`` in place and return the per-epoch metrics.

    Parameters named in ``frozen`` are never updated. With ``restore_best``
    the parameters and buffers from the epoch with the lowest validation loss
    are restored at the end, so nothing after the best epoch leaks out.
    """
    rng = rng or Rng(tc.seed)
    frozen = set(frozen)
    opt = Adam(tc.adam_beta1, tc.adam_beta2, tc.adam_eps, tc.weight_decay)
    result = TrainResult()
    best_state = (copy.deepcopy(model.params), copy.deepcopy(model.buffers))
    n = len(data.train_y)
    wait = 0
    step = 0
    for epoch in range(tc.max_epochs):
        lr = cosine_lr(tc.lr, epoch, tc.max_epochs)
        order = rng.child(2 * epoch).permutation(n)
        drop_rng = rng.child(2 * epoch + 1)
        losses = []
        for s in range(0, n, tc.batch):
            idx = order[s : s + tc.batch]
            loss, grads, _ = model.loss_and_grads(data.train_x[idx], data.train_y[idx], "train", drop_rng)
            if not math.isfinite(loss):
                raise DivergenceError(step, epoch + 1)
            grads = {k: g for k, g in grads.items() if k not in frozen}
            grads, _ = clip_by_global_norm(grads, tc.clip_norm)
            opt.step(model.params, grads, lr)
            losses.append(loss)
            step += 1
        val_loss, val_acc = model.evaluate(data.val_x, data.val_y)
        if not math.isfinite(val_loss):
            raise DivergenceError(step, epoch + 1)
        result.history.append({"epoch": epoch + 1, "train_loss": float(np.mean(losses)),
                               "val_loss": val_loss, "val_acc": val_acc, "lr": lr})
        if on_epoch is not None:
            on_epoch(model, epoch + 1)
        if val_loss < result.best_val_loss:
            result.best_val_loss, result.best_epoch = val_loss, epoch + 1
            best_state = (copy.deepcopy(model.params), copy.deepcopy(model.buffers))
            wait = 0
        else:
            wait += 1
            if wait >= tc.patience:
                break
    if restore_best and result.best_epoch > 0:
        model.params, model.buffers = best_state
    return result
