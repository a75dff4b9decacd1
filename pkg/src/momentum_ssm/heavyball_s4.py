"""Second-order (heavy-ball) SSM  h'' + gamma h' = -A h + B x + b,  y = C h + D x.

With velocity z = h' and a backward-Euler step of size delta each channel i
solves

    M_i [z_n; h_n] = [z_{n-1}; h_{n-1}] + [delta (B_i x_n + b_i); 0],
    M_i = [[1 + gamma delta, delta a_i], [-delta, 1]].

The inverse has the closed form

    M_i^{-1} = S_i [[1, -delta a_i], [delta, 1 + gamma delta]],
    S_i = 1 / (1 + gamma delta + delta^2 a_i).

Note the lower-left entry is ``+delta S_i``; with ``-delta S_i`` the product
``M M^{-1}`` is not the identity (see :func:`inverse_residual`). Every
discretization checks ``M M^{-1} = I`` before it is returned.

The augmented state is ordered ``s = [z; h]`` (width 2N); the momentum
variants in :mod:`momentum_ssm.momentum_variants` use their own ``[h; v]``
order and never exchange raw states with this module.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .affine_scan import AffineElement, HeavyBallBlock, scan_parallel, scan_sequential
from .numkit import ContractError, as_diag

MIN_DELTA = 1e-12
INVERSE_TOL = 1e-12
SINGULAR_TOL = 1e-14


class SingularDiscretizationError(ContractError):
    def __init__(self, channel: int, step: int | None = None):
        self.channel = channel
        self.step = step
        where = f"channel {channel}" if step is None else f"step {step}, channel {channel}"
        super().__init__(f"1 + gamma*delta + delta^2*a vanishes at {where}")


@dataclass(frozen=True)
class HeavyBallParams:
    gamma: float
    a_diag: np.ndarray
    B: np.ndarray
    C: np.ndarray
    D: float = 0.0
    bias: np.ndarray | None = field(default=None)

    def __post_init__(self):
        a = as_diag(np.asarray(self.a_diag, dtype=np.float64))
        object.__setattr__(self, "a_diag", a)
        n = a.size
        for name in ("B", "C"):
            v = np.asarray(getattr(self, name), dtype=np.float64).reshape(-1)
            if v.size != n:
                raise ContractError(f"{name} must have {n} entries, got {v.size}")
            object.__setattr__(self, name, v)
        bias = np.zeros(n) if self.bias is None else np.asarray(self.bias, dtype=np.float64).reshape(-1)
        if bias.size != n:
            raise ContractError(f"bias must have {n} entries, got {bias.size}")
        object.__setattr__(self, "bias", bias)
        if not self.gamma > 0:
            raise ContractError(f"damping gamma must be positive, got {self.gamma}")

    @property
    def n_state(self) -> int:
        return self.a_diag.size


@dataclass(frozen=True)
class DiscretizedHeavyBall:
    minv: HeavyBallBlock
    schur: np.ndarray
    delta: float


def step_matrix(gamma, delta, a) -> np.ndarray:
    """Per-channel 2x2 implicit-Euler matrices M, shape (..., 2, 2)."""
    a = np.asarray(a, dtype=np.float64)
    delta = np.broadcast_to(np.asarray(delta, dtype=np.float64), a.shape)
    m = np.empty((*a.shape, 2, 2))
    m[..., 0, 0] = 1.0 + gamma * delta
    m[..., 0, 1] = delta * a
    m[..., 1, 0] = -delta
    m[..., 1, 1] = 1.0
    return m


def schur_factor(gamma, delta, a) -> np.ndarray:
    denom = 1.0 + gamma * np.asarray(delta) + np.asarray(delta) ** 2 * np.asarray(a)
    denom = np.asarray(denom, dtype=np.float64)
    bad = np.abs(denom) <= SINGULAR_TOL
    if np.any(bad):
        idx = np.argwhere(bad)[0]
        if idx.size == 1:
            raise SingularDiscretizationError(int(idx[0]))
        raise SingularDiscretizationError(int(idx[-1]), step=int(idx[0]))
    return 1.0 / denom


def inverse_blocks(gamma, delta, a, lower_left_sign: float = 1.0) -> np.ndarray:
    """Closed-form M^{-1} blocks. ``lower_left_sign=-1`` reproduces the
    sign-flipped variant, kept only so the identity check can be shown to
    reject it."""
    a = np.asarray(a, dtype=np.float64)
    delta = np.broadcast_to(np.asarray(delta, dtype=np.float64), a.shape)
    s = schur_factor(gamma, delta, a)
    out = np.empty((*a.shape, 2, 2))
    out[..., 0, 0] = s
    out[..., 0, 1] = -delta * a * s
    out[..., 1, 0] = lower_left_sign * delta * s
    out[..., 1, 1] = (1.0 + gamma * delta) * s
    return out


def inverse_residual(gamma, delta, a, minv_blocks) -> np.ndarray:
    """Entrywise |M M^{-1} - I| per channel."""
    return np.abs(step_matrix(gamma, delta, a) @ minv_blocks - np.eye(2))


def scaled_inverse_residual(gamma, delta, a, minv_blocks) -> np.ndarray:
    """Per-channel max |M M^{-1} - I| divided by max(1, max|M| max|M^{-1}|).

    Rounding in the product grows with the entry magnitudes, so near-singular
    channels are judged relative to that scale.
    """
    m = step_matrix(gamma, delta, a)
    resid = np.abs(m @ minv_blocks - np.eye(2)).max(axis=(-2, -1))
    scale = np.abs(m).max(axis=(-2, -1)) * np.abs(minv_blocks).max(axis=(-2, -1))
    return resid / np.maximum(1.0, scale)


def _check_delta(delta) -> None:
    d = np.asarray(delta, dtype=np.float64)
    if np.any(~np.isfinite(d)) or np.any(d < MIN_DELTA):
        raise ContractError(f"step size must be finite and >= {MIN_DELTA}")


def discretize_implicit(p: HeavyBallParams, delta: float) -> DiscretizedHeavyBall:
    _check_delta(delta)
    blocks = inverse_blocks(p.gamma, delta, p.a_diag)
    resid = scaled_inverse_residual(p.gamma, delta, p.a_diag, blocks)
    if resid.max() > INVERSE_TOL:
        raise ContractError(f"M M^-1 deviates from I by {resid.max():.3e}")
    return DiscretizedHeavyBall(HeavyBallBlock(blocks), schur_factor(p.gamma, delta, p.a_diag), float(delta))


def spectral_radius(p: HeavyBallParams, delta: float) -> np.ndarray:
    """Largest |eigenvalue| of each channel's M^{-1}.

    Eigenvalues of M solve lam^2 - (2 + gamma delta) lam + det = 0 with
    det = 1 + gamma delta + delta^2 a; those of M^{-1} are their reciprocals,
    so the radius is 1 / min |lam(M)|.
    """
    _check_delta(delta)
    a = p.a_diag
    schur_factor(p.gamma, delta, a)
    tr = 2.0 + p.gamma * delta
    det = 1.0 + p.gamma * delta + delta**2 * a
    # tr^2 - 4 det simplifies exactly; the expanded form cancels for small gamma delta
    disc = delta**2 * (p.gamma**2 - 4.0 * a)
    min_mod = np.empty_like(a)
    cplx = disc < 0
    min_mod[cplx] = np.sqrt(det[cplx])
    real = ~cplx
    # larger root first, smaller via det / larger to avoid cancellation
    big = 0.5 * (tr + np.sqrt(disc[real]))
    small = det[real] / big
    min_mod[real] = np.minimum(np.abs(small), np.abs(big))
    return 1.0 / min_mod


def _elements(minv_blocks, drive) -> AffineElement:
    """Scan elements ``(M^{-1}, M^{-1} F_n)`` with ``F_n = [drive_n; 0]``."""
    t = HeavyBallBlock(minv_blocks)
    f = np.concatenate([drive, np.zeros_like(drive)], axis=-1)
    return AffineElement(t, t.apply(f))


def _readout(states, C, D, x):
    n = C.shape[-1]
    h = states[:, n:]
    return np.sum(C * h, axis=-1) + D * x


def hb_forward(p: HeavyBallParams, d: DiscretizedHeavyBall, x, parallel: bool = True,
               return_states: bool = False):
    """Single-channel input ``x`` (length L) -> output ``y`` (length L), s_0 = 0."""
    x = np.asarray(x, dtype=np.float64).reshape(-1)
    if x.size < 1:
        raise ContractError("input sequence must be non-empty")
    drive = d.delta * (p.B[None, :] * x[:, None] + p.bias[None, :])
    blocks = np.broadcast_to(d.minv.blocks, (x.size, *d.minv.blocks.shape))
    elems = _elements(blocks, drive)
    states = (scan_parallel if parallel else scan_sequential)(elems).states
    y = _readout(states, p.C, p.D, x)
    return (y, states) if return_states else y


def hb_forward_timevarying(p: HeavyBallParams, deltas, a_seq, b_seq, x, c_seq=None,
                           parallel: bool = True, return_states: bool = False):
    """Input-conditioned variant: per-step delta_n, a_n and B_n (and optional C_n).

    ``p`` supplies gamma, the bias and D (and C when ``c_seq`` is omitted).
    """
    x = np.asarray(x, dtype=np.float64).reshape(-1)
    L = x.size
    deltas = np.asarray(deltas, dtype=np.float64).reshape(-1)
    a_seq = np.asarray(a_seq, dtype=np.float64).reshape(L, -1)
    b_seq = np.asarray(b_seq, dtype=np.float64).reshape(L, -1)
    if deltas.size != L or a_seq.shape[0] != L or b_seq.shape != a_seq.shape:
        raise ContractError("per-step sequences must all have length L")
    if np.any(~np.isfinite(deltas)) or np.any(deltas < MIN_DELTA):
        bad = int(np.argmax(~np.isfinite(deltas) | (deltas < MIN_DELTA)))
        raise ContractError(f"step {bad}: delta must be finite and >= {MIN_DELTA}")
    c_seq = np.broadcast_to(p.C, a_seq.shape) if c_seq is None else np.asarray(c_seq).reshape(L, -1)
    blocks = inverse_blocks(p.gamma, deltas[:, None], a_seq)
    resid = scaled_inverse_residual(p.gamma, deltas[:, None], a_seq, blocks)
    if resid.max() > INVERSE_TOL:
        raise ContractError(f"M_n M_n^-1 deviates from I by {resid.max():.3e}")
    drive = deltas[:, None] * (b_seq * x[:, None] + p.bias[None, :])
    states = (scan_parallel if parallel else scan_sequential)(_elements(blocks, drive)).states
    y = _readout(states, c_seq, p.D, x)
    return (y, states) if return_states else y


def energy(p_or_a, states) -> np.ndarray:
    """Quadratic energy sum_i z_i^2 + a_i h_i^2 of ``[z; h]`` states.

    For a >= 0 and gamma > 0 the continuous flow dissipates this energy and the
    implicit step inherits the property, so it is non-increasing under zero
    input. The plain Euclidean norm of the state is not monotone in general.
    """
    a = p_or_a.a_diag if isinstance(p_or_a, HeavyBallParams) else np.asarray(p_or_a)
    n = a.size
    z, h = states[..., :n], states[..., n:]
    return np.sum(z * z + a * h * h, axis=-1)
