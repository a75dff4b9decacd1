"""Dense building blocks with explicit backward passes.

Every ``*_forward`` returns ``(out, cache)`` and the matching ``*_backward``
takes the cache and the upstream gradient. Sequences are ``(B, L, C)``.
"""

from __future__ import annotations

import numpy as np

from ..numkit import ContractError, Rng, count_flops

BN_EPS = 1e-5
LN_EPS = 1e-5
BN_MOMENTUM = 0.1


def conv_out_length(L: int, kernel: int, stride: int) -> int:
    return (L + 2 * (kernel // 2) - kernel) // stride + 1


def conv1d_forward(x, weight, bias, stride: int = 1):
    """Zero-padded ("same" for stride 1) 1D convolution; weight is (Cout, Cin, K)."""
    x = np.asarray(x, dtype=np.float64)
    cout, cin, k = weight.shape
    if k % 2 != 1:
        raise ContractError("convolution kernel must be odd")
    if x.shape[-1] != cin:
        raise ContractError(f"expected {cin} input channels, got {x.shape[-1]}")
    pad = k // 2
    xp = np.pad(x, ((0, 0), (pad, pad), (0, 0)))
    lout = conv_out_length(x.shape[1], k, stride)
    idx = stride * np.arange(lout)[:, None] + np.arange(k)[None, :]
    cols = xp[:, idx, :]                      # (B, Lout, K, Cin)
    out = np.einsum("btkc,ock->bto", cols, weight) + bias
    count_flops(2 * out.size * cin * k)
    return out, (cols, idx, x.shape, weight, stride)


def conv1d_backward(cache, g):
    cols, idx, xshape, weight, stride = cache
    gw = np.einsum("bto,btkc->ock", g, cols)
    gb = g.sum(axis=(0, 1))
    gcols = np.einsum("bto,ock->btkc", g, weight)
    k = weight.shape[2]
    pad = k // 2
    gxp = np.zeros((xshape[0], xshape[1] + 2 * pad, xshape[2]))
    for j in range(k):
        gxp[:, idx[:, j], :] += gcols[:, :, j, :]
    return gxp[:, pad : pad + xshape[1], :], gw, gb


def batchnorm_forward(x, gamma, beta, running_mean, running_var, train: bool):
    """Normalize each channel over batch and time.

    In train mode batch statistics are used and the running buffers are
    returned updated (momentum 0.1, unbiased variance); eval mode uses the
    running buffers unchanged.
    """
    if train:
        n = x.shape[0] * x.shape[1]
        mean = x.mean(axis=(0, 1))
        var = x.var(axis=(0, 1))
        unbiased = var * n / max(n - 1, 1)
        new_mean = (1 - BN_MOMENTUM) * running_mean + BN_MOMENTUM * mean
        new_var = (1 - BN_MOMENTUM) * running_var + BN_MOMENTUM * unbiased
    else:
        mean, var = running_mean, running_var
        new_mean, new_var = running_mean, running_var
    inv = 1.0 / np.sqrt(var + BN_EPS)
    xhat = (x - mean) * inv
    count_flops(4 * x.size)
    return xhat * gamma + beta, (xhat, inv, gamma, train), (new_mean, new_var)


def batchnorm_backward(cache, g):
    xhat, inv, gamma, train = cache
    ggamma = np.sum(g * xhat, axis=(0, 1))
    gbeta = g.sum(axis=(0, 1))
    gx_hat = g * gamma
    if not train:
        return gx_hat * inv, ggamma, gbeta
    n = g.shape[0] * g.shape[1]
    gx = inv / n * (n * gx_hat - gx_hat.sum(axis=(0, 1)) - xhat * np.sum(gx_hat * xhat, axis=(0, 1)))
    return gx, ggamma, gbeta


def relu_forward(x):
    mask = x > 0
    return np.where(mask, x, 0.0), mask


def relu_backward(mask, g):
    return np.where(mask, g, 0.0)


def dropout_forward(x, p: float, train: bool, rng: Rng | None):
    """Inverted dropout: kept activations are scaled by 1 / (1 - p)."""
    if not 0.0 <= p < 1.0:
        raise ContractError("dropout probability must lie in [0, 1)")
    if not train or p == 0.0:
        return x, None
    if rng is None:
        raise ContractError("train-mode dropout needs an rng")
    mask = (rng.random(x.shape) >= p) / (1.0 - p)
    return x * mask, mask


def dropout_backward(mask, g):
    return g if mask is None else g * mask


def layernorm_forward(x, gamma, beta):
    mean = x.mean(axis=-1, keepdims=True)
    var = x.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + LN_EPS)
    xhat = (x - mean) * inv
    count_flops(5 * x.size)
    return xhat * gamma + beta, (xhat, inv, gamma)


def layernorm_backward(cache, g):
    xhat, inv, gamma = cache
    axes = tuple(range(g.ndim - 1))
    ggamma = np.sum(g * xhat, axis=axes)
    gbeta = np.sum(g, axis=axes)
    gx_hat = g * gamma
    d = g.shape[-1]
    gx = inv / d * (d * gx_hat - gx_hat.sum(axis=-1, keepdims=True)
                    - xhat * np.sum(gx_hat * xhat, axis=-1, keepdims=True))
    return gx, ggamma, gbeta


def cross_entropy(logits, labels):
    """Mean log-sum-exp cross-entropy and its gradient ``softmax - onehot``.

    Accepts a single logit vector with an integer label, or a ``(B, C)``
    batch with ``B`` labels (the gradient is then divided by ``B``).
    """
    z = np.asarray(logits, dtype=np.float64)
    single = z.ndim == 1
    z2 = z[None] if single else z
    y = np.atleast_1d(np.asarray(labels))
    c = z2.shape[-1]
    if y.shape[0] != z2.shape[0]:
        raise ContractError("one label per logit row is required")
    if np.any(y < 0) or np.any(y >= c):
        raise ContractError(f"labels must lie in [0, {c})")
    y = y.astype(np.int64)
    zmax = z2.max(axis=-1, keepdims=True)
    shifted = z2 - zmax
    lse = np.log(np.sum(np.exp(shifted), axis=-1))
    rows = np.arange(z2.shape[0])
    losses = lse - shifted[rows, y]
    probs = np.exp(shifted - lse[:, None])
    grad = probs
    grad[rows, y] -= 1.0
    grad /= z2.shape[0]
    loss = float(losses.mean())
    return loss, (grad[0] if single else grad)
