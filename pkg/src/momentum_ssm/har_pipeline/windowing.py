"""Sliding windows over multichannel streams and per-channel standardization."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..numkit import ContractError

STD_FLOOR = 1e-8


@dataclass(frozen=True)
class WindowConfig:
    length: int = 512
    overlap: float = 0.5
    channels: int = 6

    def __post_init__(self):
        if self.length < 2:
            raise ContractError("window length must be at least 2")
        if not 0.0 <= self.overlap < 1.0:
            raise ContractError("overlap must lie in [0, 1)")
        if self.channels < 1:
            raise ContractError("channels must be positive")

    @property
    def stride(self) -> int:
        return max(1, int(round(self.length * (1.0 - self.overlap))))


def window_stream(stream, wc: WindowConfig = WindowConfig()) -> np.ndarray:
    """Cut a ``T x channels`` stream into ``(count, L, channels)`` windows.

    Windows start at multiples of the stride; a trailing remainder shorter
    than a stride is dropped.
    """
    x = np.asarray(stream, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != wc.channels:
        raise ContractError(f"expected a T x {wc.channels} stream, got {x.shape}")
    T, L = x.shape[0], wc.length
    if T < L:
        raise ContractError(f"stream of length {T} is shorter than the window length {L}")
    count = (T - L) // wc.stride + 1
    return np.stack([x[i * wc.stride : i * wc.stride + L] for i in range(count)])


def channel_stats(windows) -> tuple[np.ndarray, np.ndarray]:
    """Per-channel mean and (population) std over every sample of every window."""
    x = np.asarray(windows, dtype=np.float64)
    flat = x.reshape(-1, x.shape[-1])
    return flat.mean(axis=0), flat.std(axis=0)


def zscore(windows, mean, std) -> np.ndarray:
    mean = np.asarray(mean, dtype=np.float64)
    std = np.asarray(std, dtype=np.float64)
    if not (np.all(np.isfinite(mean)) and np.all(np.isfinite(std))):
        raise ContractError("normalization statistics must be finite")
    return (np.asarray(windows, dtype=np.float64) - mean) / np.maximum(std, STD_FLOOR)
