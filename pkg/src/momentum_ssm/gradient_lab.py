"""Gradient diagnostics: Jacobian products through the recurrences, per-step
gradient-norm heatmaps and a central finite-difference oracle."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .affine_scan import MomentumBlock
from .numkit import ContractError, Rng

__all__ = [
    "GradientReport",
    "JacobianBlock",
    "best_relative_error",
    "dense_jacobian_product",
    "finite_diff_oracle",
    "gradient_heatmap",
    "lower_right_power",
    "model_gradcheck",
    "momentum_jacobian_product",
    "richardson_gradient",
    "vanilla_jacobian_product",
]


def _check_range(a_bars, t: int, T: int) -> np.ndarray:
    a_bars = np.asarray(a_bars, dtype=np.float64)
    if a_bars.ndim == 1:
        a_bars = a_bars[:, None]
    if not (0 <= t <= T < a_bars.shape[0]):
        raise IndexError(f"need 0 <= t <= T < {a_bars.shape[0]}, got t={t}, T={T}")
    return a_bars


def vanilla_jacobian_product(a_bars, t: int, T: int) -> np.ndarray:
    """dh_T/dh_t = prod_{n=t+1}^{T} aBar_n (elementwise); ``a_bars[n]`` is step n."""
    a_bars = _check_range(a_bars, t, T)
    return np.prod(a_bars[t + 1 : T + 1], axis=0)


@dataclass(frozen=True)
class JacobianBlock:
    """ds_T/ds_t for s = [h; v]; the lower-left block is identically zero."""

    upper_left: np.ndarray
    upper_right: np.ndarray
    lower_right: float
    horizon: int

    def dense(self) -> np.ndarray:
        n = self.upper_left.size
        out = np.zeros((2 * n, 2 * n))
        idx = np.arange(n)
        out[idx, idx] = self.upper_left
        out[idx, n + idx] = self.upper_right
        out[n + idx, n + idx] = self.lower_right
        return out


def lower_right_power(beta: float, k: int) -> float:
    if k < 0:
        raise ContractError("exponent must be non-negative")
    if k == 0:
        return 1.0
    if beta == 0.0:
        return 0.0
    return math.copysign(math.exp(k * math.log(abs(beta))), beta if k % 2 else 1.0)


def _closed_form_block(a_bars: np.ndarray, beta: float, t: int, T: int) -> JacobianBlock:
    steps = a_bars[t + 1 : T + 1]
    k = steps.shape[0]
    upper_left = np.prod(steps, axis=0)
    # v_t reaches h_j (j = t+1..T) with weight beta^{j-t}, then decays to T
    upper_right = np.zeros(a_bars.shape[1])
    tail = np.ones(a_bars.shape[1])
    for j in range(T, t, -1):
        upper_right += tail * lower_right_power(beta, j - t)
        tail = tail * a_bars[j]
    return JacobianBlock(upper_left, upper_right, lower_right_power(beta, k), k)


def _dense_product(a_bars: np.ndarray, beta: float, t: int, T: int) -> np.ndarray:
    n = a_bars.shape[1]
    out = np.eye(2 * n)
    for j in range(t + 1, T + 1):
        out = MomentumBlock.from_momentum(a_bars[j], beta).dense() @ out
    return out


def momentum_jacobian_product(a_bars, beta: float, t: int, T: int,
                              tol: float = 1e-10) -> JacobianBlock:
    """Product M'_T ... M'_{t+1} of the momentum transitions.

    The block entries come from closed forms; the same product formed from
    dense 2N x 2N matrices must agree within ``tol`` (absolute, relative to
    the largest entry) or a ``ContractError`` is raised.
    """
    a_bars = _check_range(a_bars, t, T)
    block = _closed_form_block(a_bars, float(beta), t, T)
    dense = _dense_product(a_bars, float(beta), t, T)
    err = np.max(np.abs(block.dense() - dense))
    scale = max(1.0, np.max(np.abs(dense)))
    if err > tol * scale:
        raise ContractError(f"closed-form Jacobian blocks deviate from dense product by {err:.3e}")
    return block


def dense_jacobian_product(a_bars, beta: float, t: int, T: int) -> np.ndarray:
    return _dense_product(_check_range(a_bars, t, T), float(beta), t, T)


# --- finite differences -----------------------------------------------------


def finite_diff_oracle(fn: Callable[[np.ndarray], float], point, step: float = 1e-5) -> np.ndarray:
    """Central differences (f(p + h e_i) - f(p - h e_i)) / 2h for every coordinate."""
    if not step > 0:
        raise ContractError("step must be positive")
    p = np.array(point, dtype=np.float64)
    flat = p.reshape(-1)
    grad = np.empty_like(flat)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + step
        fp = float(fn(p))
        flat[i] = old - step
        fm = float(fn(p))
        flat[i] = old
        if not (math.isfinite(fp) and math.isfinite(fm)):
            raise ContractError(f"non-finite function value probing coordinate {i}")
        grad[i] = (fp - fm) / (2.0 * step)
    return grad.reshape(p.shape)


def richardson_gradient(fn, point, step: float = 1e-4):
    """Central differences at ``step`` and ``step / 10`` plus the Richardson
    combination of ``step`` and ``step / 2``; returns all three estimates."""
    d1 = finite_diff_oracle(fn, point, step)
    d2 = finite_diff_oracle(fn, point, step / 10.0)
    half = finite_diff_oracle(fn, point, step / 2.0)
    rich = (4.0 * half - d1) / 3.0
    return d1, d2, rich


def best_relative_error(analytic, estimates, floor: float = 1e-8) -> np.ndarray:
    """Per-coordinate relative error against the closest of several estimates.

    Coordinates where every magnitude is below ``floor`` report 0.
    """
    a = np.asarray(analytic, dtype=np.float64)
    best = np.full(a.shape, np.inf)
    for est in estimates:
        est = np.asarray(est, dtype=np.float64)
        denom = np.maximum(np.maximum(np.abs(a), np.abs(est)), 1e-300)
        best = np.minimum(best, np.abs(a - est) / denom)
    small = np.abs(a) <= floor
    for est in estimates:
        small &= np.abs(np.asarray(est)) <= floor
    return np.where(small, 0.0, best)


# --- heatmaps ---------------------------------------------------------------


@dataclass
class GradientReport:
    """norms[t, e]: l2 norm of dL/ds_t at time step t after e training epochs."""

    norms: np.ndarray
    config: dict = field(default_factory=dict)

    def __post_init__(self):
        self.norms = np.asarray(self.norms, dtype=np.float64)
        if self.norms.ndim != 2 or not np.all(np.isfinite(self.norms)) or np.any(self.norms < 0):
            raise ContractError("gradient norms must form a finite non-negative matrix")

    @property
    def epochs(self) -> int:
        return self.norms.shape[1] - 1

    def ratio(self, epoch: int = -1) -> float:
        """||dL/ds_1|| / ||dL/ds_L|| for one column."""
        col = self.norms[:, epoch]
        return float(col[0] / col[-1]) if col[-1] > 0 else math.inf

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["t"] + [f"epoch_{e}" for e in range(self.norms.shape[1])])
            for t, row in enumerate(self.norms, start=1):
                w.writerow([t] + [f"{v:.17g}" for v in row])

    @classmethod
    def from_csv(cls, path) -> "GradientReport":
        with open(path) as fh:
            rows = list(csv.reader(fh))
        return cls(np.array([[float(v) for v in r[1:]] for r in rows[1:]]))


def gradient_heatmap(model_config, task, epochs: int, rng: Rng, train_config=None,
                     probe_size: int = 32) -> GradientReport:
    """Train ``epochs`` epochs, recording per-step state-gradient norms.

    ``task`` is a :class:`~momentum_ssm.har_pipeline.TaskData`. Column 0 is
    measured before any update; column e after epoch e. The gradient is taken
    with respect to the recurrent state of the last SSM layer (``h`` for the
    vanilla layer, the stacked ``[h; v]`` for momentum layers), evaluated in
    eval mode on a fixed probe batch of validation windows.
    """
    from .har_pipeline import Model, TrainConfig, train

    if epochs < 0:
        raise ContractError("epochs must be non-negative")
    tc = train_config or TrainConfig(max_epochs=epochs)
    tc = tc.replace(max_epochs=epochs, patience=max(epochs, 1) + 1)
    model = Model.init(model_config, rng.child(0))
    probe_x = task.val_x[:probe_size]
    probe_y = task.val_y[:probe_size]
    columns = []

    def record(m: Model) -> None:
        _, _, state_grads = m.loss_and_grads(probe_x, probe_y, mode="eval")
        lam = state_grads[-1]
        columns.append(np.sqrt(np.sum(np.abs(lam) ** 2, axis=(0, 2))))  # lam is (B, L, W)

    record(model)
    if epochs > 0:
        train(model, task, tc, rng=rng.child(1), on_epoch=lambda m, e: record(m),
              restore_best=False)
    cfg = {"variant": model_config.variant, "L": task.train_x.shape[1], "epochs": epochs}
    return GradientReport(np.stack(columns, axis=1), cfg)


def model_gradcheck(model, x, y, mode: str = "train", step: float = 1e-4,
                    floor: float = 1e-8) -> dict[str, float]:
    """Worst per-parameter relative error of ``model``'s analytic gradient.

    Each coordinate is compared against central differences at ``step`` and
    ``step / 10`` and a Richardson estimate; the closest one counts.
    Coordinates whose gradient magnitudes all stay below ``floor`` are skipped.
    Use with dropout disabled; buffers are left untouched.
    """
    _, grads, _ = model.loss_and_grads(x, y, mode, update_buffers=False)
    worst = {}
    for name, value in model.params.items():
        def f(p, name=name):
            old = model.params[name]
            model.params[name] = p
            try:
                return model.loss(x, y, mode)
            finally:
                model.params[name] = old

        ests = richardson_gradient(f, value.copy(), step)
        worst[name] = float(np.max(best_relative_error(grads[name], ests, floor)))
    return worst
