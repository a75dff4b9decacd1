"""Property checks run by ``momentum-ssm check``.

Each check returns a list of :class:`CheckRow` (metric, worst error,
tolerance); a check passes when every row does. Sample counts are keyword
arguments so tests can run the same code on smaller draws.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import gradient_lab as gl
from .affine_scan import scan_parallel, scan_sequential
from .heavyball_s4 import HeavyBallParams, inverse_blocks, inverse_residual, spectral_radius
from .momentum_variants import (
    AdamMomentumParams,
    ComplexMomentumParams,
    MomentumParams,
    adam_scans,
    build_affine,
    impulse_response,
    momentum_scan,
    momentum_step,
    normalized_update_bound,
)
from .numkit import Rng

CHECKS = ("inverse", "stability", "affine", "jacobian", "adam_bound", "impulse", "gradcheck")


@dataclass(frozen=True)
class CheckRow:
    metric: str
    worst: float
    tolerance: float
    # "le": worst <= tolerance, "ge": worst >= tolerance
    sense: str = "le"
    # informational rows are reported but do not decide the check
    gating: bool = True

    @property
    def passed(self) -> bool:
        if not math.isfinite(self.worst):
            return False
        return self.worst <= self.tolerance if self.sense == "le" else self.worst >= self.tolerance


def scaled_error(a, b) -> float:
    """max |a - b| / max(1, |b|) entrywise."""
    a, b = np.asarray(a), np.asarray(b)
    return float(np.max(np.abs(a - b) / np.maximum(1.0, np.abs(b)))) if a.size else 0.0


def draw_schur_cases(rng: Rng, n: int):
    """Random (gamma, delta, a) with |1 + gamma delta + delta^2 a| >= 0.1."""
    gamma = rng.uniform(1e-3, 5.0, n)
    delta = np.exp(rng.uniform(np.log(1e-3), np.log(2.0), n))
    a = rng.uniform(-5.0, 20.0, n)
    ok = np.abs(1.0 + gamma * delta + delta**2 * a) >= 0.1
    return gamma[ok], delta[ok], a[ok]


def check_inverse(rng: Rng, draws: int = 10_000, mutate: bool = False):
    gamma, delta, a = draw_schur_cases(rng, draws)
    blocks = inverse_blocks(gamma, delta, a, lower_left_sign=-1.0 if mutate else 1.0)
    resid = inverse_residual(gamma, delta, a, blocks)
    return [CheckRow("max |M Minv - I| entry", float(resid.max()), 1e-12)]


def check_stability(rng: Rng, draws: int = 10_000):
    worst = 0.0
    for i in range(draws // 100):
        c = rng.child(i)
        gamma = float(c.uniform(1e-3, 10.0))
        delta = float(np.exp(c.uniform(np.log(1e-4), np.log(10.0))))
        a = c.uniform(0.0, 100.0, 100)
        a[0] = 0.0
        p = HeavyBallParams(gamma, a, np.ones(100), np.ones(100))
        worst = max(worst, float(spectral_radius(p, delta).max()))
    return [CheckRow("max spectral radius of Minv", worst, 1.0 + 1e-12)]


def affine_instance(rng: Rng, D: int = 4, N: int = 8, L: int = 128):
    a_bar = rng.uniform(0.0, 1.0, (L, D * N))
    g = rng.normal((L, D * N))
    mp = MomentumParams(float(rng.uniform(-1.0, 2.0)), float(rng.normal()))
    return a_bar, g, mp


def stepwise_momentum(a_bar, g, mp):
    v = np.zeros(a_bar.shape[1:], dtype=np.result_type(g, mp.beta))
    h = np.zeros_like(v)
    hs, vs = [], []
    for n in range(a_bar.shape[0]):
        v, h = momentum_step(v, h, a_bar[n], g[n], mp)
        hs.append(h)
        vs.append(v)
    return np.array(hs), np.array(vs)


def check_affine(rng: Rng, instances: int = 50):
    worst = 0.0
    for i in range(instances):
        a_bar, g, mp = affine_instance(rng.child(i))
        hs, vs = stepwise_momentum(a_bar, g, mp)
        for parallel in (False, True):
            h, v = momentum_scan(a_bar, g, mp, parallel)
            worst = max(worst, scaled_error(h, hs), scaled_error(v, vs))
    return [CheckRow("stepwise vs scan (scaled abs)", worst, 1e-12)]


def check_jacobian(rng: Rng, instances: int = 20):
    rows = []
    L = 101
    prod = gl.vanilla_jacobian_product(np.full(L, math.exp(0.5 * -1.0)), 0, 20)
    rows.append(CheckRow("vanilla product vs e^-10 (rel)", abs(prod[0] / math.exp(-10.0) - 1.0), 1e-12))
    a_bars = np.full(101, math.exp(-0.5 * 0.3))
    prods = [gl.vanilla_jacobian_product(a_bars, 0, k)[0] for k in range(1, 101)]
    rows.append(CheckRow("monotone decay violations", float(np.sum(np.diff(prods) >= 0)), 0.0))
    worst = 0.0
    for i in range(instances):
        c = rng.child(i)
        a = c.uniform(0.0, 1.0, (60, 8))
        beta = float(c.uniform(0.0, 0.999))
        t, T = int(c.integers(0, 10)), int(c.integers(40, 60))
        block = gl.momentum_jacobian_product(a, beta, t, T, tol=np.inf)
        dense = gl.dense_jacobian_product(a, beta, t, T)
        worst = max(worst, float(np.max(np.abs(block.dense() - dense))))
    rows.append(CheckRow("closed-form blocks vs dense product", worst, 1e-10))
    block = gl.momentum_jacobian_product(np.full((102, 2), 0.5), 0.99, 0, 101)
    rows.append(CheckRow("lower-right beta=0.99 exponent 101",
                         abs(block.lower_right - math.exp(101 * math.log(0.99))), 1e-9))
    return rows


def adam_draw(rng: Rng) -> AdamMomentumParams:
    return AdamMomentumParams(
        alpha=float(rng.uniform(0.01, 2.0)),
        beta=float(rng.uniform(0.0, 0.999)),
        gamma_var=float(rng.uniform(0.0, 0.999)),
        eps=float(np.exp(rng.uniform(math.log(1e-8), math.log(1e-2)))),
    )


def check_adam_bound(rng: Rng, draws: int = 100, steps: int = 10_000, width: int = 8, B: float = 1.0):
    """Largest observed |u| / bound and |v| / (alpha B / (1 - beta)).

    The ``alpha B / eps`` row is informational: a drive that stays small
    compared to eps, or one that stops while the second moment decays faster
    than the momentum, exceeds it. ``alpha B / ((1 - beta) eps)`` holds for
    every input.
    """
    worst_u = worst_p = worst_v = 0.0
    for i in range(draws):
        c = rng.child(i)
        ap = adam_draw(c)
        g = c.uniform(-B, B, (steps, width))
        _, v, _, u = adam_scans(np.zeros_like(g), g, ap, parallel=False)
        bounds = normalized_update_bound(ap, B)
        worst_u = max(worst_u, float(np.abs(u).max() / bounds.stated))
        worst_p = max(worst_p, float(np.abs(u).max() / bounds.proven))
        worst_v = max(worst_v, float(np.abs(v).max() / bounds.momentum))
    return [CheckRow("sup |u| / (alpha B / eps)", worst_u, 1.0, gating=False),
            CheckRow("sup |u| / (alpha B / ((1 - beta) eps))", worst_p, 1.0),
            CheckRow("sup |v| / (alpha B / (1 - beta))", worst_v, 1.0 + 1e-12)]


def impulse_trajectory(cp: ComplexMomentumParams, K: int, parallel: bool = True):
    g = np.zeros((K + 1, 1))
    g[0, 0] = 1.0
    _, v = momentum_scan(np.zeros((K + 1, 1)), g, cp, parallel)
    return v[:, 0]


def check_impulse(rng: Rng, draws: int = 50, K: int = 200):
    worst = 0.0
    for i in range(draws):
        c = rng.child(i)
        cp = ComplexMomentumParams(float(c.uniform(0.0, 1.0)), float(c.uniform(-math.pi, math.pi)),
                                   float(c.uniform(0.1, 2.0)))
        v = impulse_trajectory(cp, K)
        ref = np.array([impulse_response(cp, k).to_complex() for k in range(K + 1)])
        worst = max(worst, float(np.max(np.abs(v - ref))))
    return [CheckRow("impulse vs alpha beta^k", worst, 1e-10)]


def gradcheck_model(variant: str, seed: int, margin: float = 1e-3):
    """Small full model (conv, two blocks, head) on a batch whose front-end
    ReLU pre-activations all sit at least ``margin`` away from zero."""
    from .har_pipeline import Model, ModelConfig

    rng = Rng(seed)
    cfg = ModelConfig(d_model=4, n_layers=2, d_state=3, variant=variant, num_classes=3, dropout=0.0,
                      dt_min=0.05, dt_max=0.5, eps=1e-3, rho=0.8, phase=0.5)
    model = Model.init(cfg, rng.child(0))
    for name in model.params:
        if name.endswith(("ssm.w_delta", "ln.beta", "bn.beta")):
            model.params[name] = rng.child(1).normal(model.params[name].shape, 0.3)
    for attempt in range(100):
        x = rng.child(100 + attempt).normal((3, 6, 6))
        if model.relu_margin(x) >= margin:
            break
    return model, x, np.array([0, 1, 2])


def check_gradcheck(rng: Rng, seeds: int = 1, variants=("vanilla", "momentum", "complex", "adam")):
    rows = []
    base = int(rng.integers(0, 2**31))
    for variant in variants:
        worst = 0.0
        for s in range(seeds):
            model, x, y = gradcheck_model(variant, base + s)
            worst = max(worst, max(gl.model_gradcheck(model, x, y).values()))
        rows.append(CheckRow(f"{variant} analytic vs finite differences (rel)", worst, 1e-4))
    return rows


def run_check(name: str, seed: int = 0, mutate_schur_sign: bool = False):
    rng = Rng(seed).child(CHECKS.index(name))
    if name == "inverse":
        return check_inverse(rng, mutate=mutate_schur_sign)
    return {
        "stability": check_stability,
        "affine": check_affine,
        "jacobian": check_jacobian,
        "adam_bound": check_adam_bound,
        "impulse": check_impulse,
        "gradcheck": check_gradcheck,
    }[name](rng)
