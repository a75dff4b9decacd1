"""Shared generators and comparison helpers for the test suite."""

import numpy as np

from momentum_ssm.affine_scan import AffineElement, Dense, Diagonal, HeavyBallBlock, MomentumBlock
from momentum_ssm.heavyball_s4 import inverse_blocks

KINDS = ("dense", "diagonal", "momentum", "heavyball")


def random_elements(kind, L, n, rng, lead=(), complex_=False):
    """Well-conditioned random affine steps of the given kind (time axis first)."""
    shape = (L, *lead)
    if kind == "dense":
        w = n
        t = Dense(rng.normal((*shape, w, w), 0.9 / np.sqrt(w)))
        f = rng.normal((*shape, w))
    elif kind == "diagonal":
        vals = rng.uniform(-1.0, 1.0, (*shape, n))
        if complex_:
            vals = vals * np.exp(1j * rng.uniform(-np.pi, np.pi, (*shape, n)))
        t = Diagonal(vals)
        f = rng.normal((*shape, n))
    elif kind == "momentum":
        beta = rng.uniform(0.0, 0.999, (*shape, 1))
        if complex_:
            beta = beta * np.exp(1j * rng.uniform(-np.pi, np.pi, (*shape, 1)))
        t = MomentumBlock.from_momentum(rng.uniform(0.0, 1.0, (*shape, n)), beta)
        f = rng.normal((*shape, 2 * n))
    elif kind == "heavyball":
        blocks = inverse_blocks(rng.uniform(0.1, 2.0, (*shape, 1)), rng.uniform(0.01, 1.0, (*shape, n)),
                                rng.uniform(0.0, 5.0, (*shape, n)))
        t = HeavyBallBlock(blocks)
        f = rng.normal((*shape, 2 * n))
    else:
        raise ValueError(kind)
    return AffineElement(t, f)


def dense_loop(elements, s0=None):
    """Reference recurrence with explicit dense matrices."""
    mats = elements.transition.dense()
    f = elements.offset
    s = np.zeros(f.shape[1:], dtype=np.result_type(mats, f)) if s0 is None else np.asarray(s0)
    out = []
    for n in range(f.shape[0]):
        s = np.einsum("...ij,...j->...i", mats[n], s) + f[n]
        out.append(s)
    return np.array(out)


def within(actual, ref, rel=1e-9, floor=1e-12):
    """True when |actual - ref| <= max(rel |ref|, floor) entrywise."""
    actual, ref = np.asarray(actual), np.asarray(ref)
    return bool(np.all(np.abs(actual - ref) <= np.maximum(rel * np.abs(ref), floor)))


def worst_excess(actual, ref, rel=1e-9, floor=1e-12):
    """max |a - r| / max(rel |r|, floor); at most 1 means :func:`within` holds."""
    actual, ref = np.asarray(actual), np.asarray(ref)
    return float(np.max(np.abs(actual - ref) / np.maximum(rel * np.abs(ref), floor)))
