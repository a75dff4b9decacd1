"""Shared numeric helpers: float64 sequences, scalar nonlinearities, complex
pairs, a counter-based RNG and a FLOP tally used by the benchmarks."""

from __future__ import annotations

import contextlib
import math
from dataclasses import dataclass

import numpy as np

__all__ = [
    "ComplexVal",
    "ContractError",
    "FlopCounter",
    "Rng",
    "as_diag",
    "as_real_seq",
    "complex_mul",
    "count_flops",
    "elementwise_exp",
    "flop_counter",
    "sigmoid",
    "softplus",
]


class ContractError(ValueError):
    """Raised when an operation receives inputs violating its preconditions."""


def as_real_seq(data, channels: int | None = None) -> np.ndarray:
    """Validate a time-major ``L x D`` float64 sequence (1-D input means D=1)."""
    arr = np.asarray(data, dtype=np.float64)
    if arr.ndim == 1:
        arr = arr[:, None]
    if arr.ndim != 2 or arr.shape[0] < 1 or arr.shape[1] < 1:
        raise ContractError(f"expected a non-empty L x D sequence, got shape {arr.shape}")
    if channels is not None and arr.shape[1] != channels:
        raise ContractError(f"expected {channels} channels, got {arr.shape[1]}")
    if not np.all(np.isfinite(arr)):
        raise ContractError("sequence contains non-finite entries")
    return arr


def as_diag(values) -> np.ndarray:
    arr = np.asarray(values)
    if arr.ndim != 1 or arr.size < 1:
        raise ContractError(f"diagonal must be a non-empty vector, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ContractError("diagonal contains non-finite entries")
    return arr


def softplus(x):
    """log(1 + e^x), evaluated without overflow for large |x|.

    Works on scalars and arrays; ``max(x, 0) + log1p(exp(-|x|))`` is exact
    algebraically and never exponentiates a positive number.
    """
    x = np.asarray(x, dtype=np.float64)
    out = np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))
    return float(out) if out.ndim == 0 else out


def sigmoid(x):
    x = np.asarray(x, dtype=np.float64)
    e = np.exp(-np.abs(x))
    out = np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    return float(out) if out.ndim == 0 else out


@dataclass(frozen=True)
class ComplexVal:
    re: float
    im: float

    def __post_init__(self):
        if not (math.isfinite(self.re) and math.isfinite(self.im)):
            raise ContractError("complex value must be finite")

    @classmethod
    def polar(cls, magnitude: float, phase: float) -> "ComplexVal":
        return cls(magnitude * math.cos(phase), magnitude * math.sin(phase))

    @classmethod
    def from_complex(cls, z: complex) -> "ComplexVal":
        return cls(float(z.real), float(z.imag))

    def magnitude(self) -> float:
        return math.hypot(self.re, self.im)

    def to_complex(self) -> complex:
        return complex(self.re, self.im)


def complex_mul(a: ComplexVal, b: ComplexVal) -> ComplexVal:
    return ComplexVal(a.re * b.re - a.im * b.im, a.re * b.im + a.im * b.re)


def elementwise_exp(d, scale: float) -> np.ndarray:
    """Diagonal of exp(scale * diag(d))."""
    return np.exp(scale * as_diag(d))


class Rng:
    """Seeded Philox stream. Equal seeds give equal draws on every platform
    numpy supports; ``child`` derives independent streams by key."""

    def __init__(self, seed: int):
        self.seed = int(seed) & 0xFFFFFFFFFFFFFFFF
        self._gen = np.random.Generator(np.random.Philox(key=self.seed))

    @property
    def generator(self) -> np.random.Generator:
        return self._gen

    def child(self, key: int) -> "Rng":
        return Rng((self.seed * 0x9E3779B97F4A7C15 + key + 1) & 0xFFFFFFFFFFFFFFFF)

    def normal(self, size=None, scale: float = 1.0):
        return self._gen.normal(0.0, scale, size)

    def uniform(self, low=0.0, high=1.0, size=None):
        return self._gen.uniform(low, high, size)

    def integers(self, low, high=None, size=None):
        return self._gen.integers(low, high, size)

    def permutation(self, n):
        return self._gen.permutation(n)

    def random(self, size=None):
        return self._gen.random(size)


class FlopCounter:
    """Accumulates floating-point operation counts reported by kernels."""

    def __init__(self):
        self.total = 0

    def add(self, n) -> None:
        self.total += int(n)


_active_counters: list[FlopCounter] = []


def count_flops(n) -> None:
    """Report ``n`` floating-point operations to every active counter."""
    for c in _active_counters:
        c.add(n)


@contextlib.contextmanager
def flop_counter():
    counter = FlopCounter()
    _active_counters.append(counter)
    try:
        yield counter
    finally:
        _active_counters.remove(counter)
