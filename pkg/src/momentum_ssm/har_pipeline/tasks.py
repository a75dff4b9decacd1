"""Synthetic long-range classification tasks and the momentum grid search."""

from __future__ import annotations

import numpy as np

from ..numkit import ContractError, Rng
from .model import Model, ModelConfig, momentum_param_names
from .train import DivergenceError, TaskData, TrainConfig, train


def class_patterns(rng: Rng, classes: int, channels: int = 6) -> np.ndarray:
    """Random unit vectors, one per class."""
    p = rng.normal((classes, channels))
    return p / np.linalg.norm(p, axis=1, keepdims=True)


def make_delayed_recall(rng: Rng, L: int, delay: int, classes: int, count: int,
                        noise: float = 1.0, amplitude: float = 3.0, channels: int = 6,
                        patterns: np.ndarray | None = None):
    """Noise windows with a class pattern at step ``L - 1 - delay``.

    The label is only visible at that step, so a classifier reading the
    final step must carry it across ``delay`` steps. Labels are balanced
    (class counts differ by at most one). Returns ``(x, y, patterns)``.
    """
    if not 0 <= delay < L:
        raise ContractError(f"delay must lie in [0, {L}), got {delay}")
    if classes < 2 or count < 1:
        raise ContractError("need at least two classes and one sample")
    if patterns is None:
        patterns = class_patterns(rng.child(0), classes, channels)
    y = rng.child(1).permutation(np.arange(count) % classes)
    x = noise * rng.child(2).normal((count, L, channels)) if noise > 0 else np.zeros((count, L, channels))
    x[:, L - 1 - delay, :] += amplitude * patterns[y]
    return x, y.astype(np.int64), patterns


def make_recall_task(rng: Rng, L: int, delay: int, classes: int, n_train: int, n_val: int,
                     noise: float = 1.0, amplitude: float = 3.0) -> TaskData:
    patterns = class_patterns(rng.child(0), classes)
    tx, ty, _ = make_delayed_recall(rng.child(1), L, delay, classes, n_train, noise, amplitude,
                                    patterns=patterns)
    vx, vy, _ = make_delayed_recall(rng.child(2), L, delay, classes, n_val, noise, amplitude,
                                    patterns=patterns)
    return TaskData(tx, ty, vx, vy)


def grid_search(beta_grid, alpha_grid, task: TaskData, tc: TrainConfig, model_config: ModelConfig,
                rng: Rng) -> np.ndarray:
    """Validation accuracy for every (beta, alpha) cell with momentum frozen.

    Rows follow ``beta_grid`` and columns ``alpha_grid``. Every cell starts
    from the same seed; a diverged cell is recorded as NaN.
    """
    beta_grid, alpha_grid = list(beta_grid), list(alpha_grid)
    if not beta_grid or not alpha_grid:
        raise ContractError("grids must be non-empty")
    if model_config.variant != "momentum":
        raise ContractError("grid search runs the momentum variant")
    acc = np.full((len(beta_grid), len(alpha_grid)), np.nan)
    frozen = [n for i in range(model_config.n_layers) for n in momentum_param_names(model_config, i)]
    for r, beta in enumerate(beta_grid):
        for c, alpha in enumerate(alpha_grid):
            cfg = model_config.replace(alpha=float(alpha), beta=float(beta))
            model = Model.init(cfg, rng.child(0))
            try:
                train(model, task, tc, rng=rng.child(1), frozen=frozen)
                acc[r, c] = model.evaluate(task.val_x, task.val_y)[1]
            except (DivergenceError, FloatingPointError):
                pass
    return acc
