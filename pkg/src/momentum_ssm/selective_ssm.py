"""Selective (input-conditioned) diagonal SSM layer.

For an input sequence x_n in R^D the layer computes

    B_n = W_B x_n,  C_n = W_C x_n                      (shared over channels)
    delta_n[d] = softplus(theta[d] + w_delta . x_n)
    aBar_n[d, j] = exp(delta_n[d] a[d, j]),  a = -exp(a_log) < 0
    g_n[d, j] = bScale_n[d, j] B_n[j] x_n[d]           (bScale = delta, or exact ZOH)
    h_n = aBar_n * h_{n-1} + g_n
    y_n[d] = sum_j C_n[j] h_n[d, j] + skip[d] x_n[d]

Inputs are ``(L, D)`` or batched ``(B, L, D)``; internally everything is time
major ``(L, B, ...)`` so the scan runs over axis 0. The projection and readout
helpers here are shared with the momentum variants.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field, fields

import numpy as np

from .affine_scan import AffineElement, Diagonal, adjoint_scan, scan_parallel, scan_sequential
from .numkit import ContractError, Rng, count_flops, sigmoid, softplus

__all__ = [
    "SelectiveCache",
    "SelectiveParams",
    "discretize_zoh",
    "init_selective_params",
    "selective_projections",
    "ssm_backward",
    "ssm_forward",
]


@dataclass
class SelectiveParams:
    a_log: np.ndarray        # (D, N)
    w_b: np.ndarray          # (N, D)
    w_c: np.ndarray          # (N, D)
    w_delta: np.ndarray      # (D,)
    theta_delta: np.ndarray  # (D,)
    skip: np.ndarray         # (D,)

    @property
    def d_model(self) -> int:
        return self.a_log.shape[0]

    @property
    def d_state(self) -> int:
        return self.a_log.shape[1]

    @property
    def a(self) -> np.ndarray:
        return -np.exp(self.a_log)

    def as_dict(self) -> dict[str, np.ndarray]:
        return {f.name: getattr(self, f.name) for f in fields(self)}

    @classmethod
    def from_dict(cls, d, prefix: str = "") -> "SelectiveParams":
        return cls(**{f.name: d[prefix + f.name] for f in fields(cls)})

    def fingerprint(self) -> str:
        h = hashlib.blake2b(digest_size=16)
        for f in fields(self):
            h.update(np.ascontiguousarray(getattr(self, f.name)).tobytes())
        return h.hexdigest()


def inverse_softplus(y):
    y = np.asarray(y, dtype=np.float64)
    return y + np.log(-np.expm1(-y))


def init_selective_params(d_model: int, d_state: int, rng: Rng,
                          dt_min: float = 1e-3, dt_max: float = 1e-1) -> SelectiveParams:
    """a[d, j] = -(j + 1); softplus(theta) log-uniform in [dt_min, dt_max]."""
    a_log = np.log(np.tile(np.arange(1, d_state + 1, dtype=np.float64), (d_model, 1)))
    scale = 1.0 / np.sqrt(d_model)
    dt = np.exp(rng.uniform(np.log(dt_min), np.log(dt_max), d_model))
    return SelectiveParams(
        a_log=a_log,
        w_b=rng.normal((d_state, d_model), scale),
        w_c=rng.normal((d_state, d_model), scale),
        w_delta=rng.normal(d_model, 0.1 * scale),
        theta_delta=inverse_softplus(dt),
        skip=np.ones(d_model),
    )


def _project(p: SelectiveParams, xn):
    xn = np.asarray(xn, dtype=np.float64)
    z = p.theta_delta + (xn @ p.w_delta)[..., None]
    count_flops(xn.size * (2 * p.d_state * 2 + 2) + z.size * 4)
    return z, softplus(z), xn @ p.w_b.T, xn @ p.w_c.T


def selective_projections(p: SelectiveParams, xn):
    """Input-dependent (delta_n, B_n, C_n) for one step or any leading batch."""
    return _project(p, xn)[1:]


def discretize_zoh(a, delta, exact: bool = False):
    """Zero-order hold for diagonal ``a < 0``: returns (aBar, bScale).

    ``bScale`` multiplies ``B x``: ``delta`` in the default (first-order)
    mode, ``(exp(delta a) - 1) / a`` in exact mode.
    """
    a = np.asarray(a, dtype=np.float64)
    delta = np.asarray(delta, dtype=np.float64)
    if np.any(a >= 0) or np.any(delta <= 0):
        raise ContractError("zero-order hold requires a < 0 and delta > 0")
    a_bar = np.exp(delta * a)
    b_scale = np.expm1(delta * a) / a if exact else np.broadcast_to(delta, a_bar.shape) * 1.0
    count_flops(a_bar.size * (4 if exact else 2))
    if a_bar.ndim == 0:
        return float(a_bar), float(b_scale)
    return a_bar, b_scale


@dataclass
class SelectiveCache:
    """Everything the backward pass needs; arrays are time-major."""

    x: np.ndarray           # (L, B, D)
    z: np.ndarray           # (L, B, D) pre-softplus
    delta: np.ndarray       # (L, B, D)
    b: np.ndarray           # (L, B, N)
    c: np.ndarray           # (L, B, N)
    a_bar: np.ndarray       # (L, B, D, N)
    b_scale: np.ndarray     # (L, B, D, N)
    g: np.ndarray           # (L, B, D, N) drive aBar-free input term
    h: np.ndarray           # (L, B, D, N) real part of the hidden state
    exact: bool
    batched: bool
    fingerprint: str
    parallel: bool = True
    extra: dict = field(default_factory=dict)


def _to_time_major(x, d_model: int):
    x = np.asarray(x, dtype=np.float64)
    batched = x.ndim == 3
    if x.ndim == 2:
        x = x[None]
    if x.ndim != 3 or x.shape[-1] != d_model or x.shape[1] < 1:
        raise ContractError(f"expected (L, {d_model}) or (B, L, {d_model}) input, got {x.shape}")
    if not np.all(np.isfinite(x)):
        raise ContractError("input contains non-finite entries")
    return np.ascontiguousarray(np.swapaxes(x, 0, 1)), batched


def _from_time_major(y, batched: bool):
    y = np.swapaxes(y, 0, 1)
    return y if batched else y[0]


def prepare(p: SelectiveParams, x, exact: bool = False, parallel: bool = True) -> SelectiveCache:
    """Projections, discretization and drive shared by every variant."""
    xt, batched = _to_time_major(x, p.d_model)
    z, delta, b, c = _project(p, xt)
    a_bar, b_scale = discretize_zoh(p.a[None, None], delta[..., None], exact)
    g = b_scale * b[:, :, None, :] * xt[..., None]
    count_flops(2 * g.size)
    return SelectiveCache(xt, z, delta, b, c, a_bar, np.asarray(b_scale), g, None,
                          exact, batched, p.fingerprint(), parallel)


def readout(p: SelectiveParams, cache: SelectiveCache, h_real: np.ndarray) -> np.ndarray:
    y = np.einsum("lbj,lbdj->lbd", cache.c, h_real) + p.skip * cache.x
    count_flops(2 * h_real.size + 2 * cache.x.size)
    return _from_time_major(y, cache.batched)


def readout_backward(p: SelectiveParams, cache: SelectiveCache, gy):
    """Gradients of the readout: (dL/dh direct, dL/dC, dL/dskip, dL/dx part)."""
    gyt = np.swapaxes(gy if cache.batched else gy[None], 0, 1)
    gh = gyt[..., None] * cache.c[:, :, None, :]
    gc = np.einsum("lbd,lbdj->lbj", gyt, cache.h)
    gskip = np.sum(gyt * cache.x, axis=(0, 1))
    return gh, gc, gskip, gyt * p.skip


def drive_backward(p: SelectiveParams, cache: SelectiveCache, g_abar, g_g, g_c, gskip, gx):
    """Chain dL/daBar, dL/dg, dL/dC back into the layer parameters and input."""
    x, delta, b = cache.x, cache.delta, cache.b
    a = p.a
    a_bar = cache.a_bar
    bx = b[:, :, None, :] * x[..., None]
    g_bscale = g_g * bx
    if cache.exact:
        # bScale = (exp(delta a) - 1) / a
        g_delta = np.sum(g_bscale * a_bar, axis=-1)
        dbs_da = (delta[..., None] * a * a_bar - np.expm1(delta[..., None] * a)) / a**2
        g_a = np.sum(g_bscale * dbs_da, axis=(0, 1))
    else:
        g_delta = np.sum(g_bscale, axis=-1)
        g_a = np.zeros_like(a)
    g_exp = g_abar * a_bar
    g_delta = g_delta + np.sum(g_exp * a, axis=-1)
    g_a = g_a + np.sum(g_exp * delta[..., None], axis=(0, 1))
    gb = np.einsum("lbdj,lbdj,lbd->lbj", g_g, cache.b_scale, x)
    gx = gx + np.einsum("lbdj,lbdj,lbj->lbd", g_g, cache.b_scale, b)
    gz = g_delta * sigmoid(cache.z)
    gu = np.sum(gz, axis=-1)
    grads = {
        "a_log": g_a * a,
        "w_b": np.einsum("lbj,lbd->jd", gb, x),
        "w_c": np.einsum("lbj,lbd->jd", g_c, x),
        "w_delta": np.einsum("lb,lbd->d", gu, x),
        "theta_delta": np.sum(gz, axis=(0, 1)),
        "skip": gskip,
    }
    gx = gx + gb @ p.w_b + g_c @ p.w_c + gu[..., None] * p.w_delta
    return grads, _from_time_major(gx, cache.batched)


def check_cache(p: SelectiveParams, cache: SelectiveCache, x=None) -> None:
    if cache.fingerprint != p.fingerprint():
        raise ContractError("cache was produced with different parameters")
    if x is not None:
        xt, _ = _to_time_major(x, p.d_model)
        if xt.shape != cache.x.shape or not np.array_equal(xt, cache.x):
            raise ContractError("cache was produced from a different input")


def ssm_forward(p: SelectiveParams, x, exact: bool = False, parallel: bool = True):
    """Returns ``(y, cache)``; ``cache.h`` holds every hidden state."""
    cache = prepare(p, x, exact, parallel)
    L, B, D, N = cache.g.shape
    elems = AffineElement(Diagonal(cache.a_bar.reshape(L, B, D * N)), cache.g.reshape(L, B, D * N))
    scan = scan_parallel if parallel else scan_sequential
    cache.h = scan(elems).states.reshape(L, B, D, N)
    return readout(p, cache, cache.h), cache


def ssm_backward(p: SelectiveParams, cache: SelectiveCache, gy, x=None):
    """Adjoint pass: returns ``(grads, gx)`` and stores dL/dh_t in
    ``cache.extra['state_grad']``."""
    check_cache(p, cache, x)
    gy = np.asarray(gy, dtype=np.float64)
    gh, gc, gskip, gx = readout_backward(p, cache, gy)
    L, B, D, N = gh.shape
    lam = adjoint_scan(Diagonal(cache.a_bar.reshape(L, B, D * N)), gh.reshape(L, B, D * N),
                       parallel=cache.parallel).reshape(L, B, D, N)
    cache.extra["state_grad"] = lam.reshape(L, B, D * N)
    h_prev = np.concatenate([np.zeros_like(cache.h[:1]), cache.h[:-1]])
    return drive_backward(p, cache, lam * h_prev, lam, gc, gskip, gx)
