"""Affine recurrences s_n = T_n s_{n-1} + f_n evaluated as associative scans.

A step is an :class:`AffineElement` ``(T, f)``. Two steps fold with

    (T_a, f_a) . (T_b, f_b) = (T_b T_a, T_b f_a + f_b)

which is associative, so a whole sequence can be reduced by any bracketing.
:func:`scan_sequential` folds strictly left to right and is the reference for
floating point behaviour. :func:`scan_parallel` uses a Ladner-Fischer prefix
circuit (linear work, depth ``ceil(log2 L)``) followed by one application of
every prefix to ``s0``.

Arrays carry the time axis first; any axes between time and the state axis
are independent batch lanes and broadcast through every operation.
"""

from __future__ import annotations

from dataclasses import dataclass, fields
from typing import Callable, Sequence

import numpy as np

from .numkit import ContractError, count_flops

__all__ = [
    "AffineElement",
    "Dense",
    "Diagonal",
    "HeavyBallBlock",
    "MomentumBlock",
    "ScanOutput",
    "adjoint_scan",
    "combine",
    "identity_element",
    "scan_parallel",
    "scan_sequential",
    "swap_halves",
]


def _result_dtype(*arrays) -> np.dtype:
    return np.result_type(np.float64, *arrays)


class _Transition:
    """Common plumbing: every array field shares the leading (time/batch) axes."""

    core_ndim: int = 1
    # adjoint() of a MomentumBlock acts on the half-swapped vector [v; h]
    adjoint_swaps_halves = False

    def arrays(self):
        return [getattr(self, f.name) for f in fields(self)]

    def map(self, fn: Callable[[np.ndarray], np.ndarray]):
        return type(self)(*[fn(a) for a in self.arrays()])

    @property
    def lead_shape(self):
        a = self.arrays()[0]
        return a.shape[: a.ndim - self.core_ndim]

    @property
    def dtype(self):
        return _result_dtype(*self.arrays())


@dataclass(frozen=True)
class Dense(_Transition):
    matrix: np.ndarray  # (..., W, W)

    core_ndim = 2

    @property
    def width(self) -> int:
        return self.matrix.shape[-1]

    def compose(self, first: "Dense") -> "Dense":
        count_flops(self.matrix.size * (2 * self.width - 1))
        return Dense(self.matrix @ first.matrix)

    def apply(self, vec: np.ndarray) -> np.ndarray:
        count_flops(self.matrix.size * 2)
        return np.einsum("...ij,...j->...i", self.matrix, vec)

    def dense(self) -> np.ndarray:
        return self.matrix

    def adjoint(self) -> "Dense":
        return Dense(np.conj(np.swapaxes(self.matrix, -1, -2)))

    @classmethod
    def identity(cls, width, lead_shape=(), dtype=np.float64):
        return cls(np.broadcast_to(np.eye(width, dtype=dtype), (*lead_shape, width, width)).copy())


@dataclass(frozen=True)
class Diagonal(_Transition):
    values: np.ndarray  # (..., N)

    @property
    def width(self) -> int:
        return self.values.shape[-1]

    def compose(self, first: "Diagonal") -> "Diagonal":
        count_flops(np.broadcast(self.values, first.values).size)
        return Diagonal(self.values * first.values)

    def apply(self, vec: np.ndarray) -> np.ndarray:
        count_flops(vec.size)
        return self.values * vec

    def dense(self) -> np.ndarray:
        n = self.width
        out = np.zeros((*self.values.shape, n), dtype=self.values.dtype)
        idx = np.arange(n)
        out[..., idx, idx] = self.values
        return out

    def adjoint(self) -> "Diagonal":
        return Diagonal(np.conj(self.values))

    @classmethod
    def identity(cls, width, lead_shape=(), dtype=np.float64):
        return cls(np.ones((*lead_shape, width), dtype=dtype))


@dataclass(frozen=True)
class MomentumBlock(_Transition):
    """Upper block-triangular ``[[diag(p), diag(q)], [0, diag(r)]]`` on ``[h; v]``.

    A single momentum step has ``p = aBar`` and ``q = r = beta``; products of
    such steps stay in this form, so composition costs O(N).
    """

    p: np.ndarray  # (..., N)
    q: np.ndarray
    r: np.ndarray

    adjoint_swaps_halves = True

    @classmethod
    def from_momentum(cls, a_bar, beta) -> "MomentumBlock":
        a_bar = np.asarray(a_bar)
        beta = np.broadcast_to(np.asarray(beta), a_bar.shape).copy()
        return cls(a_bar, beta, beta.copy())

    @property
    def width(self) -> int:
        return 2 * self.p.shape[-1]

    def compose(self, first: "MomentumBlock") -> "MomentumBlock":
        count_flops(5 * self.p.size)
        return MomentumBlock(
            self.p * first.p,
            self.p * first.q + self.q * first.r,
            self.r * first.r,
        )

    def apply(self, vec: np.ndarray) -> np.ndarray:
        n = self.p.shape[-1]
        h, v = vec[..., :n], vec[..., n:]
        count_flops(4 * h.size)
        return np.concatenate([self.p * h + self.q * v, self.r * v], axis=-1)

    def dense(self) -> np.ndarray:
        n = self.p.shape[-1]
        lead = np.broadcast_shapes(self.p.shape, self.q.shape, self.r.shape)[:-1]
        out = np.zeros((*lead, 2 * n, 2 * n), dtype=self.dtype)
        idx = np.arange(n)
        out[..., idx, idx] = self.p
        out[..., idx, n + idx] = self.q
        out[..., n + idx, n + idx] = self.r
        return out

    def adjoint(self) -> "MomentumBlock":
        """Conjugate transpose expressed on the swapped vector ``[v; h]``.

        ``[[P, Q], [0, R]]^H = [[P*, 0], [Q*, R*]]`` which, after swapping the
        halves, is again upper block-triangular: ``[[R*, Q*], [0, P*]]``.
        """
        return MomentumBlock(np.conj(self.r), np.conj(self.q), np.conj(self.p))

    @classmethod
    def identity(cls, width, lead_shape=(), dtype=np.float64):
        if width % 2:
            raise ContractError(f"momentum block width must be even, got {width}")
        n = width // 2
        return cls(
            np.ones((*lead_shape, n), dtype=dtype),
            np.zeros((*lead_shape, n), dtype=dtype),
            np.ones((*lead_shape, n), dtype=dtype),
        )


@dataclass(frozen=True)
class HeavyBallBlock(_Transition):
    """N independent 2x2 blocks acting on ``(s[i], s[N + i])``."""

    blocks: np.ndarray  # (..., N, 2, 2)

    core_ndim = 3

    @property
    def width(self) -> int:
        return 2 * self.blocks.shape[-3]

    def compose(self, first: "HeavyBallBlock") -> "HeavyBallBlock":
        count_flops(12 * self.blocks.size // 4)
        return HeavyBallBlock(self.blocks @ first.blocks)

    def apply(self, vec: np.ndarray) -> np.ndarray:
        n = self.blocks.shape[-3]
        a, b = vec[..., :n], vec[..., n:]
        m = self.blocks
        count_flops(6 * a.size)
        return np.concatenate(
            [m[..., 0, 0] * a + m[..., 0, 1] * b, m[..., 1, 0] * a + m[..., 1, 1] * b], axis=-1
        )

    def dense(self) -> np.ndarray:
        n = self.blocks.shape[-3]
        lead = self.blocks.shape[:-3]
        out = np.zeros((*lead, 2 * n, 2 * n), dtype=self.blocks.dtype)
        idx = np.arange(n)
        for r in range(2):
            for c in range(2):
                out[..., r * n + idx, c * n + idx] = self.blocks[..., r, c]
        return out

    def adjoint(self) -> "HeavyBallBlock":
        return HeavyBallBlock(np.conj(np.swapaxes(self.blocks, -1, -2)))

    @classmethod
    def identity(cls, width, lead_shape=(), dtype=np.float64):
        if width % 2:
            raise ContractError(f"heavy-ball block width must be even, got {width}")
        return cls(np.broadcast_to(np.eye(2, dtype=dtype), (*lead_shape, width // 2, 2, 2)).copy())


_KINDS = {"dense": Dense, "diagonal": Diagonal, "momentum": MomentumBlock, "heavyball": HeavyBallBlock}


@dataclass(frozen=True)
class AffineElement:
    """One affine step, or a time-stacked sequence of them (time on axis 0)."""

    transition: _Transition
    offset: np.ndarray

    def __post_init__(self):
        if self.transition.width != self.offset.shape[-1]:
            raise ContractError(
                f"transition width {self.transition.width} != offset width {self.offset.shape[-1]}"
            )

    @property
    def width(self) -> int:
        return self.offset.shape[-1]

    def __len__(self) -> int:
        return self.offset.shape[0]

    def __getitem__(self, idx) -> "AffineElement":
        return AffineElement(self.transition.map(lambda a: a[idx]), self.offset[idx])

    def map(self, fn) -> "AffineElement":
        return AffineElement(self.transition.map(fn), fn(self.offset))

    @staticmethod
    def stack(elements: Sequence["AffineElement"]) -> "AffineElement":
        first = elements[0]
        kind = type(first.transition)
        if any(type(e.transition) is not kind for e in elements):
            raise ContractError("cannot stack elements of different transition kinds")
        widths = {e.width for e in elements}
        if len(widths) != 1:
            raise ContractError(f"non-uniform widths {sorted(widths)}")
        cols = zip(*[e.transition.arrays() for e in elements])
        return AffineElement(
            kind(*[np.stack(c) for c in cols]), np.stack([e.offset for e in elements])
        )

    @staticmethod
    def concat(parts: Sequence["AffineElement"]) -> "AffineElement":
        kind = type(parts[0].transition)
        cols = zip(*[p.transition.arrays() for p in parts])
        return AffineElement(
            kind(*[np.concatenate(c) for c in cols]), np.concatenate([p.offset for p in parts])
        )


@dataclass
class ScanOutput:
    states: np.ndarray
    composed: _Transition | None = None
    combine_depth: int | None = None


def _align(a: _Transition, b: _Transition):
    if type(a) is type(b):
        return a, b
    if isinstance(a, Dense) or isinstance(b, Dense):
        return Dense(a.dense()), Dense(b.dense())
    raise ContractError(
        f"cannot combine {type(a).__name__} with {type(b).__name__}; densify one side first"
    )


def combine(a: AffineElement, b: AffineElement) -> AffineElement:
    """Apply ``a`` then ``b``: returns ``(T_b T_a, T_b f_a + f_b)``."""
    if a.width != b.width:
        raise ContractError(f"width mismatch: {a.width} vs {b.width}")
    ta, tb = _align(a.transition, b.transition)
    offset = tb.apply(a.offset) + b.offset
    count_flops(offset.size)
    return AffineElement(tb.compose(ta), offset)


def identity_element(kind: str | type, width: int, lead_shape=(), dtype=np.float64) -> AffineElement:
    cls = _KINDS[kind] if isinstance(kind, str) else kind
    return AffineElement(cls.identity(width, lead_shape, dtype), np.zeros((*lead_shape, width), dtype))


def _as_sequence(elements) -> AffineElement:
    if isinstance(elements, AffineElement):
        seq = elements
    else:
        if len(elements) == 0:
            raise ContractError("scan requires at least one element")
        seq = AffineElement.stack(list(elements))
    if len(seq) == 0:
        raise ContractError("scan requires at least one element")
    return seq


def _initial_state(seq: AffineElement, s0) -> np.ndarray:
    lead = seq.offset.shape[1:]
    if s0 is None:
        return np.zeros(lead, dtype=_result_dtype(seq.offset, *seq.transition.arrays()))
    s0 = np.asarray(s0)
    if s0.shape[-1] != seq.width:
        raise ContractError(f"s0 width {s0.shape[-1]} != element width {seq.width}")
    return np.broadcast_to(s0, np.broadcast_shapes(s0.shape, lead))


def scan_sequential(elements, s0=None, return_composed: bool = False) -> ScanOutput:
    """Left-to-right evaluation ``s_n = T_n s_{n-1} + f_n`` (the reference path)."""
    seq = _as_sequence(elements)
    s = _initial_state(seq, s0)
    out = np.empty(np.broadcast_shapes(seq.offset.shape, (1, *s.shape)),
                   dtype=np.result_type(s, seq.offset, *seq.transition.arrays()))
    running = None
    composed = []
    for n in range(len(seq)):
        t = seq.transition.map(lambda a, n=n: a[n])
        s = t.apply(s) + seq.offset[n]
        count_flops(s.size)
        out[n] = s
        if return_composed:
            running = t if running is None else t.compose(running)
            composed.append(running)
    comp = None
    if return_composed:
        comp = type(composed[0])(*[np.stack(c) for c in zip(*[c.arrays() for c in composed])])
    return ScanOutput(out, comp, combine_depth=len(seq))


def _ladner_fischer(seq: AffineElement, depth: np.ndarray, k: int):
    """Inclusive prefixes of ``seq`` (length a power of two).

    ``k = 0`` gives depth log2(n); ``k = 1`` gives depth log2(n) + 1 everywhere
    except the last output, which is ready at log2(n). ``depth`` tracks the
    number of combines on the longest dependency chain of every output.
    """
    n = len(seq)
    if n == 1:
        return seq, depth
    if k == 0:
        m = n // 2
        left, dl = _ladner_fischer(seq[:m], depth[:m], 1)
        right, dr = _ladner_fischer(seq[m:], depth[m:], 0)
        right = combine(left[m - 1 : m], right)
        dr = np.maximum(dl[m - 1], dr) + 1
        return AffineElement.concat([left, right]), np.concatenate([dl, dr])
    pairs = combine(seq[0::2], seq[1::2])
    dp = np.maximum(depth[0::2], depth[1::2]) + 1
    sub, ds = _ladner_fischer(pairs, dp, 0)
    evens = combine(sub[:-1], seq[2::2])
    de = np.maximum(ds[:-1], depth[2::2]) + 1
    gathered = AffineElement.concat([seq[0:1], sub, evens])
    positions = np.concatenate([[0], np.arange(1, n, 2), np.arange(2, n, 2)])
    order = np.argsort(positions)
    dgathered = np.concatenate([depth[0:1], ds, de])
    return gathered[order], dgathered[order]


def scan_parallel(elements, s0=None, return_composed: bool = False) -> ScanOutput:
    """Logarithmic-depth evaluation of the same recurrence as :func:`scan_sequential`.

    The sequence is padded with identity steps to a power of two, reduced by a
    fixed Ladner-Fischer circuit, and each prefix is applied to ``s0``. The
    reported ``combine_depth`` is measured on the circuit and equals
    ``ceil(log2 L) + 1``; the circuit depends only on ``L``, so results are
    identical from run to run.
    """
    seq = _as_sequence(elements)
    s = _initial_state(seq, s0)
    length = len(seq)
    padded_len = 1 << (length - 1).bit_length()
    if padded_len > length:
        lead = seq.offset.shape[1:-1]
        pad = identity_element(
            type(seq.transition), seq.width, (padded_len - length, *lead),
            dtype=_result_dtype(seq.offset, *seq.transition.arrays()),
        )
        seq = AffineElement.concat([seq, pad])
    prefixes, depth = _ladner_fischer(seq, np.zeros(padded_len, dtype=np.int64), 0)
    prefixes = prefixes[:length]
    states = prefixes.transition.apply(s) + prefixes.offset
    count_flops(states.size)
    combine_depth = int(depth[:length].max()) + 1
    return ScanOutput(states, prefixes.transition if return_composed else None, combine_depth)


def swap_halves(vec: np.ndarray) -> np.ndarray:
    n = vec.shape[-1] // 2
    return np.concatenate([vec[..., n:], vec[..., :n]], axis=-1)


def adjoint_scan(transitions: _Transition, direct: np.ndarray, parallel: bool = True) -> np.ndarray:
    """Reverse-time adjoint ``lam_n = direct_n + T_{n+1}^H lam_{n+1}``.

    ``transitions`` holds the forward step matrices ``T_0 .. T_{L-1}`` (time on
    axis 0) and ``direct`` the explicit loss gradients per step. Complex
    adjoints follow the ``dL/dRe + i dL/dIm`` convention.
    """
    adj = transitions.adjoint()
    rev = adj.map(lambda a: np.roll(a[::-1], 1, axis=0))
    offsets = direct[::-1]
    if transitions.adjoint_swaps_halves:
        offsets = swap_halves(offsets)
    seq = AffineElement(rev, np.ascontiguousarray(offsets))
    states = (scan_parallel if parallel else scan_sequential)(seq).states
    if transitions.adjoint_swaps_halves:
        states = swap_halves(states)
    return states[::-1]
