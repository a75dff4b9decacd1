"""Momentum-augmented selective SSM layers.

All three variants reuse the projections of :mod:`momentum_ssm.selective_ssm`
and treat the discretized input term ``g_n = bScale_n B_n x_n`` as a drive
that is smoothed before it reaches the hidden state:

heavy-ball   v_n = beta v_{n-1} + alpha g_n,   h_n = aBar_n h_{n-1} + v_n
complex      same with beta = rho e^{i phase}; y_n uses Re(h_n)
adam         m_n = gamma m_{n-1} + (1 - gamma) g_n^2
             v_n = beta v_{n-1} + alpha g_n
             h_n = aBar_n h_{n-1} + v_n / (sqrt(m_n) + eps)

For the first two the pair ``s_n = [h_n; v_n]`` obeys the affine step

    s_n = [[aBar_n, beta], [0, beta]] s_{n-1} + [alpha g_n; alpha g_n]

which is scanned with :class:`~momentum_ssm.affine_scan.MomentumBlock`
elements. The Adam variant runs three diagonal scans (m, v, then h).
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .affine_scan import (
    AffineElement,
    Diagonal,
    MomentumBlock,
    adjoint_scan,
    scan_parallel,
    scan_sequential,
)
from .numkit import ComplexVal, ContractError, count_flops, sigmoid
from .selective_ssm import (
    SelectiveCache,
    SelectiveParams,
    check_cache,
    drive_backward,
    prepare,
    readout,
    readout_backward,
)

__all__ = [
    "AdamMomentumParams",
    "ComplexMomentumParams",
    "MomentumParams",
    "UpdateBounds",
    "adam_backward",
    "adam_forward",
    "build_affine",
    "complex_backward",
    "complex_forward",
    "impulse_response",
    "momentum_backward",
    "momentum_forward",
    "momentum_scan",
    "momentum_step",
    "normalized_update_bound",
]


def _logit(p: float) -> float:
    if p <= 0.0:
        return -math.inf
    if p >= 1.0:
        return math.inf
    return math.log(p) - math.log1p(-p)


@dataclass
class MomentumParams:
    """alpha is used as stored; beta = sigmoid(beta_raw) lies in (0, 1)."""

    alpha: float = 0.6
    beta_raw: float = _logit(0.9)

    @classmethod
    def from_beta(cls, alpha: float, beta: float) -> "MomentumParams":
        return cls(float(alpha), _logit(float(beta)))

    @property
    def beta(self) -> float:
        return float(sigmoid(self.beta_raw))


@dataclass
class ComplexMomentumParams:
    rho: float = 0.9
    phase: float = 0.0
    alpha: float = 0.6

    @property
    def beta(self) -> complex:
        return complex(self.rho * math.cos(self.phase), self.rho * math.sin(self.phase))


@dataclass
class AdamMomentumParams:
    alpha: float = 0.6
    beta: float = 0.9
    gamma_var: float = 0.99
    eps: float = 1e-8

    def __post_init__(self):
        if not 0.0 <= self.beta < 1.0:
            raise ContractError(f"beta must lie in [0, 1), got {self.beta}")
        if not 0.0 <= self.gamma_var < 1.0:
            raise ContractError(f"gamma_var must lie in [0, 1), got {self.gamma_var}")
        if not self.eps >= 1e-12:
            raise ContractError(f"eps must be >= 1e-12, got {self.eps}")


# --- single steps and affine form -------------------------------------------------


def momentum_step(v_prev, h_prev, a_bar, g, mp: MomentumParams):
    v = mp.beta * np.asarray(v_prev) + mp.alpha * np.asarray(g)
    h = np.asarray(a_bar) * np.asarray(h_prev) + v
    return v, h


def build_affine(a_bar, g, mp) -> AffineElement:
    """Affine step(s) on ``s = [h; v]``; works for one step or a stacked sequence."""
    a_bar = np.asarray(a_bar)
    drive = mp.alpha * np.asarray(g)
    count_flops(drive.size)
    return AffineElement(
        MomentumBlock.from_momentum(a_bar, mp.beta), np.concatenate([drive, drive], axis=-1)
    )


def momentum_scan(a_bar, g, mp, parallel: bool = True):
    """Scan the momentum recurrence over axis 0; returns ``(h, v)``.

    ``mp`` may be real (:class:`MomentumParams`) or complex
    (:class:`ComplexMomentumParams`); complex beta yields complex states.
    """
    elems = build_affine(a_bar, g, mp)
    states = (scan_parallel if parallel else scan_sequential)(elems).states
    n = np.asarray(a_bar).shape[-1]
    return states[..., :n], states[..., n:]


def impulse_response(cp: ComplexMomentumParams, k: int) -> ComplexVal:
    """alpha * beta^k, the momentum trace left by a unit drive k steps ago."""
    if k < 0:
        raise ContractError("k must be non-negative")
    return ComplexVal.polar(cp.alpha * cp.rho**k, k * cp.phase)


class UpdateBounds(NamedTuple):
    stated: float     # alpha B / eps
    momentum: float   # alpha B / (1 - beta), bound on |v_n|
    proven: float     # alpha B / ((1 - beta) eps), bound on |v_n| / (sqrt(m_n) + eps)


def normalized_update_bound(ap: AdamMomentumParams, B: float) -> UpdateBounds:
    """Bounds for a drive with |g_n| <= B.

    ``momentum`` and ``proven`` hold for every input. ``stated`` is tighter
    than ``proven`` by the factor 1 / (1 - beta) and can be exceeded, either
    by a drive that stays small compared to eps for many steps or by a drive
    that stops while the second moment decays faster than the momentum.
    """
    if B < 0:
        raise ContractError("B must be non-negative")
    if ap.beta >= 1.0:
        raise ContractError("geometric bound undefined for beta = 1")
    stated = ap.alpha * B / ap.eps
    mom = ap.alpha * B / (1.0 - ap.beta)
    return UpdateBounds(stated, mom, mom / ap.eps)


# --- heavy-ball and complex layers --------------------------------------------


def _flat(a):
    L, B, D, N = a.shape
    return a.reshape(L, B, D * N)


def _momentum_layer_forward(p: SelectiveParams, mp, x, exact: bool, parallel: bool):
    cache = prepare(p, x, exact, parallel)
    L, B, D, N = cache.g.shape
    h, v = momentum_scan(_flat(cache.a_bar), _flat(cache.g), mp, parallel)
    cache.extra["h_full"] = h
    cache.extra["v"] = v
    cache.h = np.real(h).reshape(L, B, D, N)
    return readout(p, cache, cache.h), cache


def _momentum_layer_backward(p: SelectiveParams, mp, cache: SelectiveCache, gy, x):
    check_cache(p, cache, x)
    gh, gc, gskip, gx = readout_backward(p, cache, np.asarray(gy, dtype=np.float64))
    L, B, D, N = gh.shape
    h, v = cache.extra["h_full"], cache.extra["v"]
    a_bar = _flat(cache.a_bar)
    block = MomentumBlock.from_momentum(a_bar, mp.beta)
    direct = np.concatenate([_flat(gh), np.zeros_like(_flat(gh))], axis=-1)
    lam = adjoint_scan(block, direct.astype(block.dtype), parallel=cache.parallel)
    cache.extra["state_grad"] = lam
    W = D * N
    lam_h = lam[..., :W]
    mu_v = lam_h + lam[..., W:]  # total derivative through v_n
    h_prev = np.concatenate([np.zeros_like(h[:1]), h[:-1]])
    v_prev = np.concatenate([np.zeros_like(v[:1]), v[:-1]])
    g = _flat(cache.g)
    g_abar = np.real(np.conj(h_prev) * lam_h).reshape(L, B, D, N)
    g_g = (mp.alpha * np.real(mu_v)).reshape(L, B, D, N)
    g_alpha = float(np.sum(g * np.real(mu_v)))
    g_beta = complex(np.sum(np.conj(v_prev) * mu_v))
    grads, gx = drive_backward(p, cache, g_abar, g_g, gc, gskip, gx)
    return grads, gx, g_alpha, g_beta


def momentum_forward(p: SelectiveParams, mp: MomentumParams, x, exact: bool = False,
                     parallel: bool = True):
    return _momentum_layer_forward(p, mp, x, exact, parallel)


def momentum_backward(p: SelectiveParams, mp: MomentumParams, cache: SelectiveCache, gy, x=None):
    """Returns ``(grads, gx)``; grads include ``alpha`` and ``beta_raw``."""
    grads, gx, g_alpha, g_beta = _momentum_layer_backward(p, mp, cache, gy, x)
    beta = mp.beta
    grads["alpha"] = g_alpha
    grads["beta_raw"] = g_beta.real * beta * (1.0 - beta)
    return grads, gx


def complex_forward(p: SelectiveParams, cp: ComplexMomentumParams, x, exact: bool = False,
                    parallel: bool = True):
    return _momentum_layer_forward(p, cp, x, exact, parallel)


def complex_backward(p: SelectiveParams, cp: ComplexMomentumParams, cache: SelectiveCache, gy,
                     x=None):
    """Returns ``(grads, gx)``; grads include ``alpha``, ``rho`` and ``phase``."""
    grads, gx, g_alpha, g_beta = _momentum_layer_backward(p, cp, cache, gy, x)
    c, s = math.cos(cp.phase), math.sin(cp.phase)
    grads["alpha"] = g_alpha
    grads["rho"] = g_beta.real * c + g_beta.imag * s
    grads["phase"] = cp.rho * (g_beta.imag * c - g_beta.real * s)
    return grads, gx


# --- adam layer ----------------------------------------------------------------


def adam_scans(a_bar, g, ap: AdamMomentumParams, parallel: bool = True):
    """The three phases along axis 0; returns ``(h, v, m, u)`` with u the
    normalized drive."""
    scan = scan_parallel if parallel else scan_sequential
    g = np.asarray(g, dtype=np.float64)
    gamma = np.full_like(g, ap.gamma_var)
    m = scan(AffineElement(Diagonal(gamma), (1.0 - ap.gamma_var) * g * g)).states
    v = scan(AffineElement(Diagonal(np.full_like(g, ap.beta)), ap.alpha * g)).states
    u = v / (np.sqrt(m) + ap.eps)
    count_flops(6 * g.size)
    h = scan(AffineElement(Diagonal(np.asarray(a_bar)), u)).states
    return h, v, m, u


def adam_forward(p: SelectiveParams, ap: AdamMomentumParams, x, exact: bool = False,
                 parallel: bool = True):
    cache = prepare(p, x, exact, parallel)
    L, B, D, N = cache.g.shape
    h, v, m, u = adam_scans(_flat(cache.a_bar), _flat(cache.g), ap, parallel)
    cache.extra.update(v=v, m=m, u=u)
    cache.h = h.reshape(L, B, D, N)
    return readout(p, cache, cache.h), cache


def adam_backward(p: SelectiveParams, ap: AdamMomentumParams, cache: SelectiveCache, gy, x=None):
    """Returns ``(grads, gx)``; grads include ``alpha``, ``beta`` and ``gamma_var``."""
    check_cache(p, cache, x)
    gh, gc, gskip, gx = readout_backward(p, cache, np.asarray(gy, dtype=np.float64))
    L, B, D, N = gh.shape
    par = cache.parallel
    v, m = cache.extra["v"], cache.extra["m"]
    g = _flat(cache.g)
    h = _flat(cache.h)
    a_bar = _flat(cache.a_bar)
    lam_h = adjoint_scan(Diagonal(a_bar), _flat(gh), parallel=par)
    cache.extra["state_grad"] = lam_h
    root = np.sqrt(m)
    denom = root + ap.eps
    gv_direct = lam_h / denom
    safe_root = np.where(root > 0, root, 1.0)
    gm_direct = np.where(root > 0, -lam_h * v / denom**2 / (2.0 * safe_root), 0.0)
    mu_v = adjoint_scan(Diagonal(np.full_like(g, ap.beta)), gv_direct, parallel=par)
    mu_m = adjoint_scan(Diagonal(np.full_like(g, ap.gamma_var)), gm_direct, parallel=par)
    h_prev = np.concatenate([np.zeros_like(h[:1]), h[:-1]])
    v_prev = np.concatenate([np.zeros_like(v[:1]), v[:-1]])
    m_prev = np.concatenate([np.zeros_like(m[:1]), m[:-1]])
    g_abar = (lam_h * h_prev).reshape(L, B, D, N)
    g_g = (ap.alpha * mu_v + 2.0 * (1.0 - ap.gamma_var) * g * mu_m).reshape(L, B, D, N)
    grads, gx = drive_backward(p, cache, g_abar, g_g, gc, gskip, gx)
    grads["alpha"] = float(np.sum(g * mu_v))
    grads["beta"] = float(np.sum(v_prev * mu_v))
    grads["gamma_var"] = float(np.sum((m_prev - g * g) * mu_m))
    return grads, gx
