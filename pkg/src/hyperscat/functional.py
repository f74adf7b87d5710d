"""Differentiable layer primitives used by the networks."""

from __future__ import annotations

import numpy as np

from .tensor import Tensor, _make, as_tensor


def linear(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """Row-wise affine map ``x @ weight + bias`` for x of shape (N, d_in)."""
    x, weight, bias = as_tensor(x), as_tensor(weight), as_tensor(bias)
    if x.ndim != 2 or weight.ndim != 2 or x.shape[1] != weight.shape[0]:
        raise ValueError(f"linear: cannot apply weight {weight.shape} to input {x.shape}")
    if bias.shape != (weight.shape[1],):
        raise ValueError(f"linear: bias shape {bias.shape} does not match {weight.shape[1]} outputs")
    X, W = x.data, weight.data

    def backward(g):
        gx = g @ W.T if x.requires_grad else None
        gw = X.T @ g if weight.requires_grad else None
        gb = g.sum(axis=0) if bias.requires_grad else None
        return gx, gw, gb

    return _make(X @ W + bias.data, (x, weight, bias), backward, "linear")


def conv2d_same(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """Stride-1 cross-correlation with zero padding that keeps H and W.

    ``x`` is (C_in, H, W) or batched (N, C_in, H, W); ``weight`` is
    (C_out, C_in, k, k) with odd k.
    """
    x, weight, bias = as_tensor(x), as_tensor(weight), as_tensor(bias)
    if weight.ndim != 4 or weight.shape[2] != weight.shape[3]:
        raise ValueError(f"conv2d_same: weight must be (C_out, C_in, k, k), got {weight.shape}")
    k = weight.shape[2]
    if k % 2 == 0:
        raise ValueError(f"conv2d_same: kernel size must be odd, got {k}")
    single = x.ndim == 3
    X = x.data[None] if single else x.data
    if X.ndim != 4:
        raise ValueError(f"conv2d_same: input must be 3-D or 4-D, got {x.shape}")
    n, c_in, h, w = X.shape
    c_out = weight.shape[0]
    if weight.shape[1] != c_in:
        raise ValueError(f"conv2d_same: input has {c_in} channels, weight expects {weight.shape[1]}")
    if bias.shape != (c_out,):
        raise ValueError(f"conv2d_same: bias shape {bias.shape} != ({c_out},)")

    p = (k - 1) // 2
    # channel-major shifted copies, one matmul per kernel tap
    Xp = np.pad(X, ((0, 0), (0, 0), (p, p), (p, p))).transpose(1, 0, 2, 3)
    taps = [(dy, dx) for dy in range(k) for dx in range(k)]
    patches = {
        (dy, dx): np.ascontiguousarray(Xp[:, :, dy:dy + h, dx:dx + w]).reshape(c_in, -1)
        for dy, dx in taps
    }
    W = weight.data
    Wt = np.ascontiguousarray(W.transpose(2, 3, 0, 1))  # strided slices would bypass BLAS
    acc = np.zeros((c_out, n * h * w))
    for dy, dx in taps:
        acc += Wt[dy, dx] @ patches[(dy, dx)]
    acc += bias.data[:, None]
    out = acc.reshape(c_out, n, h, w).transpose(1, 0, 2, 3)

    def backward(g):
        G = np.ascontiguousarray((g[None] if single else g).transpose(1, 0, 2, 3)).reshape(c_out, -1)
        gx = gw = gb = None
        if bias.requires_grad:
            gb = G.sum(axis=1)
        if weight.requires_grad:
            gw = np.empty_like(W)
            for dy, dx in taps:
                gw[:, :, dy, dx] = G @ patches[(dy, dx)].T
        if x.requires_grad:
            gxp = np.zeros((c_in, n, h + 2 * p, w + 2 * p))
            for dy, dx in taps:
                gxp[:, :, dy:dy + h, dx:dx + w] += (Wt[dy, dx].T @ G).reshape(c_in, n, h, w)
            gx = gxp[:, :, p:p + h, p:p + w].transpose(1, 0, 2, 3)
            if single:
                gx = gx[0]
        return gx, gw, gb

    return _make(out[0] if single else out, (x, weight, bias), backward, "conv2d")


def upsample_nearest2(x: Tensor) -> Tensor:
    """Replicate each pixel into a 2x2 block over the last two axes."""
    x = as_tensor(x)
    if x.ndim < 2:
        raise ValueError("upsample_nearest2 needs at least 2 dimensions")
    out = x.data.repeat(2, axis=-2).repeat(2, axis=-1)
    lead = x.shape[:-2]
    h, w = x.shape[-2:]

    def backward(g):
        return (g.reshape(*lead, h, 2, w, 2).sum(axis=(-3, -1)),)

    return _make(out, (x,), backward, "upsample2")


class BatchNormState:
    """Running statistics of one batch-norm layer (not trained by gradients)."""

    def __init__(self, channels: int, momentum: float = 0.1, eps: float = 1e-5):
        self.running_mean = np.zeros(channels)
        self.running_var = np.ones(channels)
        self.momentum = momentum
        self.eps = eps


def batchnorm2d(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    state: BatchNormState,
    training: bool,
) -> Tensor:
    """Per-channel batch normalization of an (N, C, H, W) tensor.

    Training mode normalizes by the batch's biased variance and folds the
    unbiased variance into the running estimate; eval mode uses the running
    estimate only.
    """
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    if x.ndim != 4:
        raise ValueError(f"batchnorm2d expects (N, C, H, W), got {x.shape}")
    n, c, h, w = x.shape
    if n * h * w == 0:
        raise ValueError("batchnorm2d: zero-size batch")
    if gamma.shape != (c,) or beta.shape != (c,) or state.running_mean.shape != (c,):
        raise ValueError(f"batchnorm2d: parameters do not match {c} channels")
    X = x.data
    G = gamma.data[None, :, None, None]
    B = beta.data[None, :, None, None]

    if not training:
        scale = 1.0 / np.sqrt(state.running_var + state.eps)
        xhat = (X - state.running_mean[None, :, None, None]) * scale[None, :, None, None]

        def backward(g):
            gx = g * G * scale[None, :, None, None] if x.requires_grad else None
            return gx, (g * xhat).sum(axis=(0, 2, 3)), g.sum(axis=(0, 2, 3))

        return _make(xhat * G + B, (x, gamma, beta), backward, "batchnorm_eval")

    m = n * h * w
    mean = X.mean(axis=(0, 2, 3))
    var = X.var(axis=(0, 2, 3))
    inv_std = 1.0 / np.sqrt(var + state.eps)
    xhat = (X - mean[None, :, None, None]) * inv_std[None, :, None, None]

    mom = state.momentum
    unbiased = var * m / (m - 1) if m > 1 else var
    state.running_mean = (1 - mom) * state.running_mean + mom * mean
    state.running_var = (1 - mom) * state.running_var + mom * unbiased

    def backward(g):
        gx = None
        if x.requires_grad:
            gxhat = g * G
            gx = (inv_std[None, :, None, None] / m) * (
                m * gxhat
                - gxhat.sum(axis=(0, 2, 3), keepdims=True)
                - xhat * (gxhat * xhat).sum(axis=(0, 2, 3), keepdims=True)
            )
        return gx, (g * xhat).sum(axis=(0, 2, 3)), g.sum(axis=(0, 2, 3))

    return _make(xhat * G + B, (x, gamma, beta), backward, "batchnorm_train")


# Row/column taps of a 3x3 kernel seen from the low-resolution grid after
# nearest x2 upsampling: output phase -> [(low-res offset, kernel indices)].
_PHASE_TAPS = {
    0: ((-1, (0,)), (0, (1, 2))),
    1: ((0, (0, 1)), (1, (2,))),
}


def upsample2_conv2d(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """Exactly ``conv2d_same(upsample_nearest2(x), weight, bias)`` for 3x3 kernels.

    Works on the low-resolution grid, one 2x2 effective kernel per output
    phase, which needs 4/9 of the multiply-adds of the two-step route.
    """
    x, weight, bias = as_tensor(x), as_tensor(weight), as_tensor(bias)
    if weight.ndim != 4 or weight.shape[2:] != (3, 3):
        return conv2d_same(upsample_nearest2(x), weight, bias)
    single = x.ndim == 3
    X = x.data[None] if single else x.data
    n, c_in, h, w = X.shape
    c_out = weight.shape[0]
    if weight.shape[1] != c_in:
        raise ValueError(f"upsample2_conv2d: input has {c_in} channels, weight expects {weight.shape[1]}")
    if bias.shape != (c_out,):
        raise ValueError(f"upsample2_conv2d: bias shape {bias.shape} != ({c_out},)")
    W = weight.data

    # channel-major contiguous shifted copies: patches[(r, s)] is (c_in, n*h*w)
    Xp = np.pad(X, ((0, 0), (0, 0), (1, 1), (1, 1))).transpose(1, 0, 2, 3)
    patches = {
        (r, s): np.ascontiguousarray(Xp[:, :, 1 + r:1 + r + h, 1 + s:1 + s + w]).reshape(c_in, -1)
        for r in (-1, 0, 1)
        for s in (-1, 0, 1)
    }
    combos = []
    for a in (0, 1):
        for b in (0, 1):
            for r, rows in _PHASE_TAPS[a]:
                for s, cols in _PHASE_TAPS[b]:
                    combos.append((a, b, r, s, rows, cols))

    out = np.empty((c_out, n, 2 * h, 2 * w))
    for a in (0, 1):
        for b in (0, 1):
            acc = np.zeros((c_out, n * h * w))
            for _, _, r, s, rows, cols in (cb for cb in combos if cb[0] == a and cb[1] == b):
                keff = W[:, :, rows, :][:, :, :, cols].sum(axis=(2, 3))
                acc += keff @ patches[(r, s)]
            out[:, :, a::2, b::2] = acc.reshape(c_out, n, h, w)
    out += bias.data[:, None, None, None]
    result = out.transpose(1, 0, 2, 3)

    def backward(g):
        G = (g[None] if single else g).transpose(1, 0, 2, 3)
        Gph = {
            (a, b): np.ascontiguousarray(G[:, :, a::2, b::2]).reshape(c_out, -1)
            for a in (0, 1)
            for b in (0, 1)
        }
        gx = gw = gb = None
        if bias.requires_grad:
            gb = G.sum(axis=(1, 2, 3))
        if weight.requires_grad:
            gw = np.zeros_like(W)
            for a, b, r, s, rows, cols in combos:
                gk = Gph[(a, b)] @ patches[(r, s)].T
                for dy in rows:
                    for dx in cols:
                        gw[:, :, dy, dx] += gk
        if x.requires_grad:
            gxp = np.zeros((c_in, n, h + 2, w + 2))
            for a, b, r, s, rows, cols in combos:
                keff = W[:, :, rows, :][:, :, :, cols].sum(axis=(2, 3))
                gxp[:, :, 1 + r:1 + r + h, 1 + s:1 + s + w] += (keff.T @ Gph[(a, b)]).reshape(c_in, n, h, w)
            gx = gxp[:, :, 1:h + 1, 1:w + 1].transpose(1, 0, 2, 3)
            if single:
                gx = gx[0]
        return gx, gw, gb

    return _make(result[0] if single else result, (x, weight, bias), backward, "upsample2_conv2d")
