"""Classifier: conv front-end, stacked residual SSM blocks, pooled linear head.

    x -> conv1d(k=3) -> batchnorm -> relu -> dropout
      -> [h + SSM(LayerNorm(h))] x n_layers
      -> pool over time (mean or last step) -> linear -> logits

Parameters and buffers live in flat ``name -> ndarray`` dicts, so optimizers,
checkpoints and finite-difference probes can treat them uniformly.
"""

from __future__ import annotations

import copy
import dataclasses
from dataclasses import dataclass

import numpy as np

from .. import momentum_variants as mv
from ..numkit import ContractError, Rng, count_flops, sigmoid
from ..selective_ssm import SelectiveParams, init_selective_params, ssm_backward, ssm_forward
from . import layers

VARIANTS = ("vanilla", "momentum", "complex", "adam")
POOLS = ("mean", "last")


@dataclass(frozen=True)
class ModelConfig:
    d_model: int = 128
    n_layers: int = 2
    d_state: int = 64
    variant: str = "momentum"
    num_classes: int = 12
    in_channels: int = 6
    kernel: int = 3
    stride: int = 1
    dropout: float = 0.1
    pool: str = "mean"
    exact_zoh: bool = False
    parallel: bool = True
    alpha: float = 0.6
    beta: float = 0.9
    rho: float = 0.9
    phase: float = 0.0
    gamma_var: float = 0.99
    eps: float = 1e-8
    dt_min: float = 1e-3
    dt_max: float = 1e-1

    def __post_init__(self):
        for name in ("d_model", "n_layers", "d_state", "num_classes", "in_channels", "kernel", "stride"):
            if getattr(self, name) < 1:
                raise ContractError(f"{name} must be positive")
        if self.kernel % 2 != 1:
            raise ContractError("kernel must be odd")
        if self.variant not in VARIANTS:
            raise ContractError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        if self.pool not in POOLS:
            raise ContractError(f"pool must be one of {POOLS}, got {self.pool!r}")
        if not 0.0 <= self.dropout < 1.0:
            raise ContractError("dropout must lie in [0, 1)")

    def replace(self, **changes) -> "ModelConfig":
        return dataclasses.replace(self, **changes)


def _scalar(v: float) -> np.ndarray:
    return np.array(float(v))


def momentum_param_names(config: ModelConfig, layer: int) -> list[str]:
    keys = {"vanilla": [], "momentum": ["alpha", "beta_raw"], "complex": ["alpha", "rho", "phase"],
            "adam": ["alpha", "beta_raw", "gamma_raw"]}[config.variant]
    return [f"block{layer}.mom.{k}" for k in keys]


def init_params(config: ModelConfig, rng: Rng):
    """Fresh ``(params, buffers)`` for ``config``."""
    d, c = config.d_model, config.num_classes
    fan_in = config.in_channels * config.kernel
    p = {
        "conv.weight": rng.child(1).normal((d, config.in_channels, config.kernel), 1.0 / np.sqrt(fan_in)),
        "conv.bias": np.zeros(d),
        "bn.gamma": np.ones(d),
        "bn.beta": np.zeros(d),
    }
    for i in range(config.n_layers):
        p[f"block{i}.ln.gamma"] = np.ones(d)
        p[f"block{i}.ln.beta"] = np.zeros(d)
        sp = init_selective_params(d, config.d_state, rng.child(10 + i), config.dt_min, config.dt_max)
        for k, v in sp.as_dict().items():
            p[f"block{i}.ssm.{k}"] = v
        pre = f"block{i}.mom."
        if config.variant == "momentum":
            p[pre + "alpha"] = _scalar(config.alpha)
            p[pre + "beta_raw"] = _scalar(mv._logit(config.beta))
        elif config.variant == "complex":
            p[pre + "alpha"] = _scalar(config.alpha)
            p[pre + "rho"] = _scalar(config.rho)
            p[pre + "phase"] = _scalar(config.phase)
        elif config.variant == "adam":
            p[pre + "alpha"] = _scalar(config.alpha)
            p[pre + "beta_raw"] = _scalar(mv._logit(config.beta))
            p[pre + "gamma_raw"] = _scalar(mv._logit(config.gamma_var))
    p["head.weight"] = rng.child(2).normal((c, d), 1.0 / np.sqrt(d))
    p["head.bias"] = np.zeros(c)
    buffers = {"bn.running_mean": np.zeros(d), "bn.running_var": np.ones(d)}
    return p, buffers


@dataclass
class ModelCache:
    conv: tuple
    bn: tuple
    relu: np.ndarray
    dropout: np.ndarray | None
    blocks: list
    pooled: np.ndarray
    seq_len: int


class Model:
    def __init__(self, config: ModelConfig, params: dict, buffers: dict):
        self.config = config
        self.params = params
        self.buffers = buffers

    @classmethod
    def init(cls, config: ModelConfig, rng: Rng) -> "Model":
        return cls(config, *init_params(config, rng))

    def copy(self) -> "Model":
        return Model(self.config, copy.deepcopy(self.params), copy.deepcopy(self.buffers))

    # -- per-layer variant plumbing --

    def _layer(self, i: int):
        cfg = self.config
        sp = SelectiveParams.from_dict(self.params, f"block{i}.ssm.")
        pre = f"block{i}.mom."
        P = self.params
        if cfg.variant == "vanilla":
            return sp, None
        if cfg.variant == "momentum":
            return sp, mv.MomentumParams(float(P[pre + "alpha"]), float(P[pre + "beta_raw"]))
        if cfg.variant == "complex":
            return sp, mv.ComplexMomentumParams(float(P[pre + "rho"]), float(P[pre + "phase"]),
                                                float(P[pre + "alpha"]))
        return sp, mv.AdamMomentumParams(float(P[pre + "alpha"]), float(sigmoid(P[pre + "beta_raw"])),
                                         float(sigmoid(P[pre + "gamma_raw"])), cfg.eps)

    def _ssm_forward(self, sp, vp, u):
        cfg = self.config
        if cfg.variant == "vanilla":
            return ssm_forward(sp, u, cfg.exact_zoh, cfg.parallel)
        fwd = {"momentum": mv.momentum_forward, "complex": mv.complex_forward,
               "adam": mv.adam_forward}[cfg.variant]
        return fwd(sp, vp, u, cfg.exact_zoh, cfg.parallel)

    def _ssm_backward(self, i, sp, vp, cache, gy):
        cfg = self.config
        pre = f"block{i}.mom."
        if cfg.variant == "vanilla":
            g, gx = ssm_backward(sp, cache, gy)
            return g, {}, gx
        bwd = {"momentum": mv.momentum_backward, "complex": mv.complex_backward,
               "adam": mv.adam_backward}[cfg.variant]
        g, gx = bwd(sp, vp, cache, gy)
        if cfg.variant == "momentum":
            extra = {pre + "alpha": g.pop("alpha"), pre + "beta_raw": g.pop("beta_raw")}
        elif cfg.variant == "complex":
            extra = {pre + k: g.pop(k) for k in ("alpha", "rho", "phase")}
        else:
            extra = {
                pre + "alpha": g.pop("alpha"),
                pre + "beta_raw": g.pop("beta") * vp.beta * (1.0 - vp.beta),
                pre + "gamma_raw": g.pop("gamma_var") * vp.gamma_var * (1.0 - vp.gamma_var),
            }
        return g, extra, gx

    # -- forward / backward --

    def forward(self, x, mode: str = "eval", rng: Rng | None = None, update_buffers: bool = True):
        """Logits ``(B, C)`` for windows ``(B, L, in_channels)``."""
        if mode not in ("train", "eval"):
            raise ContractError("mode must be 'train' or 'eval'")
        cfg, P = self.config, self.params
        x = np.asarray(x, dtype=np.float64)
        if x.ndim != 3 or x.shape[-1] != cfg.in_channels:
            raise ContractError(f"expected (B, L, {cfg.in_channels}) windows, got {x.shape}")
        if not np.all(np.isfinite(x)):
            raise ContractError("input windows contain non-finite entries")
        train = mode == "train"
        h, c_conv = layers.conv1d_forward(x, P["conv.weight"], P["conv.bias"], cfg.stride)
        h, c_bn, stats = layers.batchnorm_forward(h, P["bn.gamma"], P["bn.beta"],
                                                  self.buffers["bn.running_mean"],
                                                  self.buffers["bn.running_var"], train)
        if train and update_buffers:
            self.buffers["bn.running_mean"], self.buffers["bn.running_var"] = stats
        h, relu_mask = layers.relu_forward(h)
        h, drop_mask = layers.dropout_forward(h, cfg.dropout, train, rng)
        blocks = []
        for i in range(cfg.n_layers):
            sp, vp = self._layer(i)
            u, c_ln = layers.layernorm_forward(h, P[f"block{i}.ln.gamma"], P[f"block{i}.ln.beta"])
            y, c_ssm = self._ssm_forward(sp, vp, u)
            h = h + y
            blocks.append((sp, vp, c_ln, c_ssm))
        pooled = h.mean(axis=1) if cfg.pool == "mean" else h[:, -1]
        logits = pooled @ P["head.weight"].T + P["head.bias"]
        count_flops(2 * logits.size * cfg.d_model + h.size)
        return logits, ModelCache(c_conv, c_bn, relu_mask, drop_mask, blocks, pooled, h.shape[1])

    def backward(self, cache: ModelCache, g_logits):
        """Returns ``(grads, state_grads)``; ``state_grads[i]`` is ``(B, L, W)``
        holding dL/ds_t for the recurrent state of block ``i``."""
        cfg, P = self.config, self.params
        g_logits = np.asarray(g_logits, dtype=np.float64)
        grads = {"head.weight": g_logits.T @ cache.pooled, "head.bias": g_logits.sum(axis=0)}
        g_pooled = g_logits @ P["head.weight"]
        B, L = g_pooled.shape[0], cache.seq_len
        if cfg.pool == "mean":
            g_h = np.broadcast_to(g_pooled[:, None, :] / L, (B, L, cfg.d_model)).copy()
        else:
            g_h = np.zeros((B, L, cfg.d_model))
            g_h[:, -1] = g_pooled
        state_grads = [None] * cfg.n_layers
        for i in reversed(range(cfg.n_layers)):
            sp, vp, c_ln, c_ssm = cache.blocks[i]
            g_ssm, extra, g_u = self._ssm_backward(i, sp, vp, c_ssm, g_h)
            state_grads[i] = np.swapaxes(c_ssm.extra["state_grad"], 0, 1)
            for k, v in g_ssm.items():
                grads[f"block{i}.ssm.{k}"] = v
            for k, v in extra.items():
                grads[k] = np.array(v)
            g_ln, gg, gb = layers.layernorm_backward(c_ln, g_u)
            grads[f"block{i}.ln.gamma"], grads[f"block{i}.ln.beta"] = gg, gb
            g_h = g_h + g_ln
        g = layers.dropout_backward(cache.dropout, g_h)
        g = layers.relu_backward(cache.relu, g)
        g, grads["bn.gamma"], grads["bn.beta"] = layers.batchnorm_backward(cache.bn, g)
        _, grads["conv.weight"], grads["conv.bias"] = layers.conv1d_backward(cache.conv, g)
        return grads, state_grads

    def relu_margin(self, x) -> float:
        """Smallest |pre-activation| at the front-end ReLU (train-mode statistics)."""
        P = self.params
        h, _ = layers.conv1d_forward(x, P["conv.weight"], P["conv.bias"], self.config.stride)
        h, _, _ = layers.batchnorm_forward(h, P["bn.gamma"], P["bn.beta"], self.buffers["bn.running_mean"],
                                           self.buffers["bn.running_var"], True)
        return float(np.min(np.abs(h)))

    def loss(self, x, y, mode: str = "eval", rng: Rng | None = None) -> float:
        logits, _ = self.forward(x, mode, rng, update_buffers=False)
        return layers.cross_entropy(logits, y)[0]

    def loss_and_grads(self, x, y, mode: str = "train", rng: Rng | None = None,
                       update_buffers: bool = True):
        logits, cache = self.forward(x, mode, rng, update_buffers)
        loss, g_logits = layers.cross_entropy(logits, y)
        grads, state_grads = self.backward(cache, g_logits)
        return loss, grads, state_grads

    def evaluate(self, x, y, batch: int = 64) -> tuple[float, float]:
        """Mean eval-mode loss and accuracy."""
        n = len(y)
        if n == 0:
            raise ContractError("cannot evaluate on an empty split")
        total, correct = 0.0, 0
        for s in range(0, n, batch):
            logits, _ = self.forward(x[s : s + batch], "eval")
            yb = y[s : s + batch]
            total += layers.cross_entropy(logits, yb)[0] * len(yb)
            correct += int(np.sum(np.argmax(logits, axis=1) == yb))
        return total / n, correct / n
