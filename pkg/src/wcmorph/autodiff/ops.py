"""Differentiable primitives used by the encoders and the decoder.

Image-like tensors are laid out channel-first, either ``(C, H, W)`` for a
single image or ``(N, C, H, W)`` for a batch.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from ..errors import DegenerateInputError, DimensionError
from .tensor import Tensor, as_tensor

NORM_EPS = 1e-12
BN_EPS = 1e-5
BN_MOMENTUM = 0.9


def fully_connected(x: Tensor, W: Tensor, b: Tensor | None = None) -> Tensor:
    """``y = W x (+ b)`` for ``x`` of shape ``(n_in,)`` or ``(N, n_in)``."""
    x, W = as_tensor(x), as_tensor(W)
    if W.ndim != 2 or x.ndim not in (1, 2) or x.shape[-1] != W.shape[1]:
        raise DimensionError(f"fully_connected: x {x.shape} does not fit W {W.shape}")
    if b is not None and as_tensor(b).shape != (W.shape[0],):
        raise DimensionError(f"fully_connected: bias {as_tensor(b).shape} does not fit W {W.shape}")
    X, Wd = x.data, W.data
    X2 = X.reshape(-1, X.shape[-1])
    single = x.ndim == 1

    def backward(g):
        g2 = g.reshape(-1, Wd.shape[0])
        gx = g2 @ Wd if x.requires_grad else None
        gW = g2.T @ X2 if W.requires_grad else None
        if gx is not None and single:
            gx = gx[0]
        return gx, gW

    y = X2 @ Wd.T
    out = Tensor._from_op(y[0] if single else y, (x, W), backward, "fully_connected")
    if b is not None:
        out = out + b
    return out


def _conv_out(size: int, k: int, stride: int, padding: int) -> int:
    return (size + 2 * padding - k) // stride + 1


def _im2col(Xn: np.ndarray, kh: int, kw: int, stride: int, ho: int, wo: int) -> np.ndarray:
    """Rows ``(n, y, x)`` and columns ``(i, j, c)`` of a padded channel-last array."""
    n, c = Xn.shape[0], Xn.shape[3]
    win = sliding_window_view(Xn, (kh, kw), axis=(1, 2))[:, ::stride, ::stride][:, :ho, :wo]
    return win.transpose(0, 1, 2, 4, 5, 3).reshape(n * ho * wo, kh * kw * c)


def conv2d(x: Tensor, k: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation with zero padding, no bias."""
    x, k = as_tensor(x), as_tensor(k)
    single = x.ndim == 3
    if x.ndim not in (3, 4) or k.ndim != 4:
        raise DimensionError(f"conv2d: expected (N,)C,H,W input and O,C,kh,kw kernel, got {x.shape}, {k.shape}")
    if stride < 1 or padding < 0:
        raise ValueError("conv2d: stride must be >= 1 and padding >= 0")
    X = x.data[None] if single else x.data
    n, c, h, w = X.shape
    o, kc, kh, kw = k.shape
    if kc != c:
        raise DimensionError(f"conv2d: input has {c} channels, kernel expects {kc}")
    if kh > h + 2 * padding or kw > w + 2 * padding:
        raise DimensionError(f"conv2d: kernel {kh}x{kw} larger than padded input {h}x{w} (pad {padding})")
    ho, wo = _conv_out(h, kh, stride, padding), _conv_out(w, kw, stride, padding)
    # channel-last columns keep every copied run contiguous in c
    Xn = np.pad(X.transpose(0, 2, 3, 1), ((0, 0), (padding, padding), (padding, padding), (0, 0)))
    cols = _im2col(Xn, kh, kw, stride, ho, wo)
    K = k.data
    Kmat = K.transpose(0, 2, 3, 1).reshape(o, -1)
    out = (cols @ Kmat.T).reshape(n, ho, wo, o).transpose(0, 3, 1, 2)

    def backward(g):
        gn = g.transpose(0, 2, 3, 1)
        gmat = gn.reshape(n * ho * wo, o)
        gk = (gmat.T @ cols).reshape(o, kh, kw, c).transpose(0, 3, 1, 2) if k.requires_grad else None
        if not x.requires_grad:
            return None, gk
        if stride == 1 and o <= c and padding < min(kh, kw):
            # correlate the padded output gradient with the flipped kernel
            ph, pw = kh - 1 - padding, kw - 1 - padding
            gp = np.pad(gn, ((0, 0), (ph, ph), (pw, pw), (0, 0)))
            Kflip = K[:, :, ::-1, ::-1].transpose(2, 3, 0, 1).reshape(kh * kw * o, c)
            gX = (_im2col(gp, kh, kw, 1, h, w) @ Kflip).reshape(n, h, w, c).transpose(0, 3, 1, 2)
        else:
            gcols = (gmat @ Kmat).reshape(n, ho, wo, kh, kw, c)
            gXp = np.zeros((n, h + 2 * padding, w + 2 * padding, c))
            for i in range(kh):
                for j in range(kw):
                    gXp[:, i : i + stride * ho : stride, j : j + stride * wo : stride, :] += gcols[:, :, :, i, j, :]
            gX = gXp[:, padding : padding + h, padding : padding + w, :].transpose(0, 3, 1, 2)
        return (gX[0] if single else gX), gk

    out = np.ascontiguousarray(out)
    return Tensor._from_op(out[0] if single else out, (x, k), backward, "conv2d")


def upsample_nearest(x: Tensor, factor: int) -> Tensor:
    if int(factor) != factor or factor < 1:
        raise ValueError(f"upsample factor must be an integer >= 1, got {factor}")
    x = as_tensor(x)
    if x.ndim not in (3, 4):
        raise DimensionError(f"upsample_nearest expects (N,)C,H,W, got {x.shape}")
    f = int(factor)
    shape = x.shape
    out = x.data.repeat(f, axis=-2).repeat(f, axis=-1)

    def backward(g):
        lead = shape[:-2]
        h, w = shape[-2:]
        return (g.reshape(*lead, h, f, w, f).sum(axis=(-3, -1)),)

    return Tensor._from_op(out, (x,), backward, "upsample_nearest")


def leaky_relu(x: Tensor, slope: float = 0.02) -> Tensor:
    x = as_tensor(x)
    scale = np.where(x.data > 0, 1.0, slope)
    return Tensor._from_op(x.data * scale, (x,), lambda g: (g * scale,), "leaky_relu")


def sigmoid(x: Tensor) -> Tensor:
    x = as_tensor(x)
    # split by sign so exp never overflows
    d = x.data
    e = np.exp(-np.abs(d))
    s = np.where(d >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    return Tensor._from_op(s, (x,), lambda g: (g * s * (1.0 - s),), "sigmoid")


def concat(tensors: list[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    bounds = np.cumsum([0] + sizes)

    def backward(g):
        return tuple(np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=axis) for i in range(len(tensors)))

    return Tensor._from_op(out, tensors, backward, "concat")


def batch_norm(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    training: bool,
    momentum: float = BN_MOMENTUM,
    eps: float = BN_EPS,
) -> Tensor:
    """Normalize over every axis except axis 1 (features or channels).

    In training mode the running statistics are updated in place as
    ``running = momentum * running + (1 - momentum) * batch``.
    """
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    if x.ndim < 2:
        raise DimensionError(f"batch_norm expects (batch, features, ...), got {x.shape}")
    nfeat = x.shape[1]
    if gamma.shape != (nfeat,) or beta.shape != (nfeat,):
        raise DimensionError(f"batch_norm: scale/shift must have shape ({nfeat},)")
    axes = (0,) + tuple(range(2, x.ndim))
    bshape = (1, nfeat) + (1,) * (x.ndim - 2)
    X = x.data
    if training:
        if x.shape[0] < 2:
            raise ValueError("batch_norm in training mode needs a batch of at least 2")
        mu = X.mean(axis=axes)
        var = X.var(axis=axes)
        running_mean *= momentum
        running_mean += (1.0 - momentum) * mu
        running_var *= momentum
        running_var += (1.0 - momentum) * var
    else:
        mu, var = running_mean.copy(), running_var.copy()
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (X - mu.reshape(bshape)) * inv.reshape(bshape)
    G = gamma.data.reshape(bshape)
    out = xhat * G + beta.data.reshape(bshape)
    m = X.size // nfeat

    def backward(g):
        gbeta = g.sum(axis=axes)
        ggamma = (g * xhat).sum(axis=axes)
        gxhat = g * G
        if training:
            gx = (inv.reshape(bshape) / m) * (
                m * gxhat - gxhat.sum(axis=axes).reshape(bshape) - xhat * (gxhat * xhat).sum(axis=axes).reshape(bshape)
            )
        else:
            gx = gxhat * inv.reshape(bshape)
        return gx, ggamma, gbeta

    return Tensor._from_op(out, (x, gamma, beta), backward, "batch_norm")


def mse_loss(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise DimensionError(f"mse_loss shape mismatch {a.shape} vs {b.shape}")
    diff = a.data - b.data
    n = diff.size

    def backward(g):
        ga = 2.0 * g * diff / n
        return ga, -ga

    return Tensor._from_op(np.array(np.mean(diff * diff)), (a, b), backward, "mse_loss")


def l2_normalize(x: Tensor) -> Tensor:
    """Scale each vector along the last axis to unit Euclidean norm."""
    x = as_tensor(x)
    X = x.data
    norm = np.sqrt(np.sum(X * X, axis=-1, keepdims=True))
    if np.any(norm <= NORM_EPS):
        raise DegenerateInputError("cannot normalize a vector with near-zero norm")
    y = X / norm

    def backward(g):
        return ((g - y * np.sum(g * y, axis=-1, keepdims=True)) / norm,)

    return Tensor._from_op(y, (x,), backward, "l2_normalize")


def angle(a: Tensor, b: Tensor) -> Tensor:
    """Row-wise angle between unit vectors (last axis), computed as
    ``2 atan2(|a - b|, |a + b|)`` so that identical inputs give exactly 0."""
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise DimensionError(f"angle shape mismatch {a.shape} vs {b.shape}")
    d, s = a.data - b.data, a.data + b.data
    u = np.sqrt(np.sum(d * d, axis=-1, keepdims=True))
    v = np.sqrt(np.sum(s * s, axis=-1, keepdims=True))
    out = 2.0 * np.arctan2(u[..., 0], v[..., 0])
    # d theta = 2 (v du - u dv) / (u^2 + v^2); zero where a norm vanishes
    denom = u * u + v * v
    du = np.divide(d, u, out=np.zeros_like(d), where=u > 0)
    dv = np.divide(s, v, out=np.zeros_like(s), where=v > 0)
    ga_dir = 2.0 * (v * du - u * dv) / denom
    gb_dir = 2.0 * (-v * du - u * dv) / denom

    def backward(g):
        g = g[..., None]
        return g * ga_dir, g * gb_dir

    return Tensor._from_op(out, (a, b), backward, "angle")


def cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean softmax cross-entropy of ``(N, K)`` logits against integer labels."""
    logits = as_tensor(logits)
    labels = np.asarray(labels, dtype=np.int64)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise DimensionError(f"cross_entropy: logits {logits.shape} vs labels {labels.shape}")
    Z = logits.data - logits.data.max(axis=1, keepdims=True)
    logp = Z - np.log(np.exp(Z).sum(axis=1, keepdims=True))
    n = labels.size
    rows = np.arange(n)

    def backward(g):
        p = np.exp(logp)
        p[rows, labels] -= 1.0
        return (g * p / n,)

    return Tensor._from_op(np.array(-logp[rows, labels].mean()), (logits,), backward, "cross_entropy")


def transpose(x: Tensor) -> Tensor:
    x = as_tensor(x)
    if x.ndim != 2:
        raise DimensionError("transpose expects a 2-d tensor")
    return Tensor._from_op(x.data.T.copy(), (x,), lambda g: (g.T,), "transpose")
