"""Spatial and network-layer operations on NCHW tensors.

Convolution is im2col + one BLAS matmul; its backward scatters through the
kernel taps with strided slice-adds rather than np.add.at, which keeps the
whole step vectorized. Batch norm gets the full train-mode backward
(gradients flow through the batch statistics).
"""

from __future__ import annotations

from typing import Optional, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ShapeMismatch
from .tensor import Tensor, _node, as_tensor, register_op


@register_op("conv2d")
def conv2d(x, w, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D convolution (cross-correlation), no bias; x (N,Cin,H,W), w (Cout,Cin,kh,kw)."""
    x, w = as_tensor(x), as_tensor(w)
    if x.ndim != 4 or w.ndim != 4 or x.shape[1] != w.shape[1]:
        raise ShapeMismatch(f"conv2d: incompatible shapes {x.shape} and {w.shape}")
    n, cin, h, wd = x.shape
    cout, _, kh, kw = w.shape
    s, p = int(stride), int(padding)
    ho = (h + 2 * p - kh) // s + 1
    wo = (wd + 2 * p - kw) // s + 1
    if ho <= 0 or wo <= 0:
        raise ShapeMismatch(f"conv2d: kernel {kh}x{kw} does not fit input {h}x{wd} (pad {p})")
    xp = np.pad(x.data, ((0, 0), (0, 0), (p, p), (p, p))) if p else x.data
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::s, ::s]
    cols = np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(n * ho * wo, cin * kh * kw)
    wmat = w.data.reshape(cout, -1)
    out = (cols @ wmat.T).reshape(n, ho, wo, cout).transpose(0, 3, 1, 2)

    def fn(g):
        gmat = np.ascontiguousarray(g.transpose(0, 2, 3, 1)).reshape(n * ho * wo, cout)
        gw = (gmat.T @ cols).reshape(w.shape)
        if not (x.requires_grad or x._parents):
            return None, gw
        gwin = (gmat @ wmat).reshape(n, ho, wo, cin, kh, kw)
        gxp = np.zeros((n, cin, h + 2 * p, wd + 2 * p), dtype=np.float32)
        for di in range(kh):
            for dj in range(kw):
                gxp[:, :, di : di + s * ho : s, dj : dj + s * wo : s] += gwin[:, :, :, :, di, dj].transpose(0, 3, 1, 2)
        gx = gxp[:, :, p : p + h, p : p + wd] if p else gxp
        return gx, gw

    return _node(np.ascontiguousarray(out), (x, w), fn, "conv2d")


@register_op("maxpool2d")
def maxpool2d(x, kernel: int = 2) -> Tensor:
    """Non-overlapping max pooling (stride == kernel); ties take the first index."""
    x = as_tensor(x)
    k = int(kernel)
    if x.ndim != 4 or x.shape[2] % k or x.shape[3] % k:
        raise ShapeMismatch(f"maxpool2d: shape {x.shape} not divisible by kernel {k}")
    n, c, h, w = x.shape
    ho, wo = h // k, w // k
    win = x.data.reshape(n, c, ho, k, wo, k).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, ho, wo, k * k)
    am = win.argmax(axis=-1)
    out = np.take_along_axis(win, am[..., None], axis=-1)[..., 0]

    def fn(g):
        onehot = (np.arange(k * k, dtype=am.dtype) == am[..., None])
        gwin = g[..., None] * onehot
        gx = gwin.reshape(n, c, ho, wo, k, k).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h, w)
        return (np.ascontiguousarray(gx),)

    return _node(out, (x,), fn, "maxpool2d")


def _bn_axes(shape: tuple) -> tuple:
    if len(shape) == 4:
        return (0, 2, 3)
    if len(shape) == 2:
        return (0,)
    raise ShapeMismatch(f"batch_norm needs 2-D or 4-D input, got shape {shape}")


def _bn_bshape(shape: tuple) -> tuple:
    return (1, shape[1], 1, 1) if len(shape) == 4 else (1, shape[1])


@register_op("batch_norm")
def batch_norm(
    x,
    gamma,
    beta,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    training: bool,
    momentum: float = 0.1,
    eps: float = 1e-5,
    update_running: bool = True,
) -> Tensor:
    """Batch normalization over (N,) or (N,H,W) per channel.

    ``running_mean``/``running_var`` are plain arrays mutated in place when
    ``training and update_running``; they are state, not graph nodes.
    """
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    axes = _bn_axes(x.shape)
    bshape = _bn_bshape(x.shape)
    c = x.shape[1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeMismatch(f"batch_norm: scale/shift must be shape ({c},)")
    if training:
        m = x.size // c
        mu = np.mean(x.data, axis=axes, dtype=np.float64)
        xc = x.data - mu.astype(np.float32).reshape(bshape)
        var = np.mean(xc * xc, axis=axes, dtype=np.float64)
        if update_running:
            unbiased = var * (m / (m - 1)) if m > 1 else var
            running_mean[...] = ((1 - momentum) * running_mean + momentum * mu).astype(np.float32)
            running_var[...] = ((1 - momentum) * running_var + momentum * unbiased).astype(np.float32)
    else:
        mu = running_mean.astype(np.float64)
        xc = x.data - running_mean.reshape(bshape)
        var = running_var.astype(np.float64)
        m = x.size // c
    inv_std = (1.0 / np.sqrt(var + eps)).astype(np.float32)
    xhat = xc * inv_std.reshape(bshape)
    out = gamma.data.reshape(bshape) * xhat + beta.data.reshape(bshape)

    def fn(g):
        dgamma = np.sum(g * xhat, axis=axes, dtype=np.float64).astype(np.float32)
        dbeta = np.sum(g, axis=axes, dtype=np.float64).astype(np.float32)
        dxhat = g * gamma.data.reshape(bshape)
        if training:
            s1 = np.sum(dxhat, axis=axes, dtype=np.float64).astype(np.float32).reshape(bshape)
            s2 = np.sum(dxhat * xhat, axis=axes, dtype=np.float64).astype(np.float32).reshape(bshape)
            gx = (inv_std.reshape(bshape) / m) * (m * dxhat - s1 - xhat * s2)
        else:
            gx = dxhat * inv_std.reshape(bshape)
        return gx.astype(np.float32), dgamma, dbeta

    return _node(out, (x, gamma, beta), fn, "batch_norm")


_BILINEAR_CACHE: dict = {}


def _bilinear_matrix(n_in: int, factor: int) -> np.ndarray:
    """(factor*n_in, n_in) interpolation matrix, half-pixel-centre convention."""
    key = (n_in, factor)
    mat = _BILINEAR_CACHE.get(key)
    if mat is None:
        n_out = n_in * factor
        mat64 = np.zeros((n_out, n_in), dtype=np.float64)
        src = (np.arange(n_out) + 0.5) / factor - 0.5
        i0 = np.floor(src).astype(int)
        w1 = src - i0
        i0c = np.clip(i0, 0, n_in - 1)
        i1c = np.clip(i0 + 1, 0, n_in - 1)
        for o in range(n_out):
            mat64[o, i0c[o]] += 1.0 - w1[o]
            mat64[o, i1c[o]] += w1[o]
        mat = mat64.astype(np.float32)
        _BILINEAR_CACHE[key] = mat
    return mat


@register_op("bilinear_upsample")
def bilinear_upsample(x, factor: int) -> Tensor:
    """Bilinear upsampling by a positive integer factor on (N,C,H,W)."""
    x = as_tensor(x)
    f = int(factor)
    if x.ndim != 4 or f < 1:
        raise ShapeMismatch(f"bilinear_upsample: need 4-D input and factor >= 1, got {x.shape}, {factor}")
    if f == 1:
        return _node(x.data.copy(), (x,), lambda g: (g,), "bilinear_upsample")
    ah = _bilinear_matrix(x.shape[2], f)
    aw = _bilinear_matrix(x.shape[3], f)
    t = np.tensordot(x.data, ah, axes=([2], [1]))        # (N,C,W,fH)
    out = np.tensordot(t, aw, axes=([2], [1]))           # (N,C,fH,fW)

    def fn(g):
        t2 = np.tensordot(g, ah, axes=([2], [0]))        # (N,C,fW,H)
        gx = np.tensordot(t2, aw, axes=([2], [0]))       # (N,C,H,W)
        return (np.ascontiguousarray(gx),)

    return _node(np.ascontiguousarray(out), (x,), fn, "bilinear_upsample")


@register_op("nearest_resize")
def nearest_resize(x, size: Sequence[int]) -> Tensor:
    """Nearest-neighbour resize of (N,C,H,W) to ``size`` (out_h, out_w)."""
    x = as_tensor(x)
    if x.ndim != 4:
        raise ShapeMismatch(f"nearest_resize needs 4-D input, got shape {x.shape}")
    n, c, h, w = x.shape
    oh, ow = int(size[0]), int(size[1])
    ih = (np.arange(oh) * h) // oh
    iw = (np.arange(ow) * w) // ow
    out = x.data[:, :, ih[:, None], iw[None, :]]

    def fn(g):
        if oh % h == 0 and ow % w == 0:
            fh, fw = oh // h, ow // w
            gx = g.reshape(n, c, h, fh, w, fw).sum(axis=(3, 5))
        else:
            gx = np.zeros_like(x.data)
            np.add.at(gx, (slice(None), slice(None), ih[:, None], iw[None, :]), g)
        return (gx.astype(np.float32),)

    return _node(np.ascontiguousarray(out), (x,), fn, "nearest_resize")


@register_op("spatial_mean")
def spatial_mean(x) -> Tensor:
    """Mean over the spatial axes: (N,C,H,W) -> (N,C) or (C,H,W) -> (C,)."""
    x = as_tensor(x)
    if x.ndim not in (3, 4):
        raise ShapeMismatch(f"spatial_mean needs 3-D or 4-D input, got shape {x.shape}")
    hw = x.shape[-1] * x.shape[-2]
    out = (np.sum(x.data, axis=(-2, -1), dtype=np.float64) / hw).astype(np.float32)

    def fn(g):
        return ((g / np.float32(hw))[..., None, None] * np.ones_like(x.data),)

    return _node(out, (x,), fn, "spatial_mean")


@register_op("masked_mean")
def masked_mean(x, mask: np.ndarray) -> Tensor:
    """Mean of feature pixels where mask == 1; empty masks yield zeros.

    x (C,H,W) with mask (H,W) -> (C,); x (N,C,H,W) with mask (N,H,W) -> (N,C).
    The mask is data, not a graph node.
    """
    x = as_tensor(x)
    m = np.asarray(mask, dtype=np.float32)
    if x.ndim == 3:
        if m.shape != x.shape[1:]:
            raise ShapeMismatch(f"masked_mean: mask {m.shape} vs features {x.shape}")
        mb = m[None, :, :]
        count = float(np.sum(m, dtype=np.float64))
        denom = np.float64(max(count, 1.0))
        out = (np.sum(x.data * mb, axis=(-2, -1), dtype=np.float64) / denom).astype(np.float32)

        def fn(g):
            return ((g[:, None, None] / np.float32(denom)) * mb,)

    elif x.ndim == 4:
        if m.shape != (x.shape[0],) + x.shape[2:]:
            raise ShapeMismatch(f"masked_mean: mask {m.shape} vs features {x.shape}")
        mb = m[:, None, :, :]
        count = np.sum(m, axis=(-2, -1), dtype=np.float64)
        denom = np.maximum(count, 1.0)
        out = (np.sum(x.data * mb, axis=(-2, -1), dtype=np.float64) / denom[:, None]).astype(np.float32)

        def fn(g):
            return ((g / denom[:, None].astype(np.float32))[:, :, None, None] * mb,)

    else:
        raise ShapeMismatch(f"masked_mean needs 3-D or 4-D input, got shape {x.shape}")
    return _node(out, (x,), fn, "masked_mean")


@register_op("cross_entropy")
def cross_entropy(logits, labels: np.ndarray, class_weights: Optional[np.ndarray] = None) -> Tensor:
    """Weighted-mean softmax cross entropy over classes on axis 1.

    logits (N,K) with labels (N,), or (N,K,H,W) with labels (N,H,W).
    """
    logits = as_tensor(logits)
    y = np.asarray(labels)
    if y.dtype.kind != "i":
        y = y.astype(np.int64)
    if logits.ndim not in (2, 4) or y.shape != logits.shape[:1] + logits.shape[2:]:
        raise ShapeMismatch(f"cross_entropy: logits {logits.shape} vs labels {y.shape}")
    k = logits.shape[1]
    z = logits.data.astype(np.float64)
    z = z - z.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    y_idx = np.expand_dims(y, 1)
    nll = -np.take_along_axis(logp, y_idx, axis=1)[:, 0]
    if class_weights is None:
        wpix = np.ones_like(nll)
    else:
        cw = np.asarray(class_weights, dtype=np.float64)
        if cw.shape != (k,):
            raise ShapeMismatch(f"cross_entropy: class_weights must be shape ({k},)")
        wpix = cw[y]
    wsum = float(np.sum(wpix))
    out = np.float32(np.sum(nll * wpix) / max(wsum, 1e-12))

    def fn(g):
        soft = np.exp(logp)
        onehot = np.zeros_like(soft)
        np.put_along_axis(onehot, y_idx, 1.0, axis=1)
        scale = (wpix / max(wsum, 1e-12))
        glogits = float(g) * np.expand_dims(scale, 1) * (soft - onehot)
        return (glogits.astype(np.float32),)

    return _node(out, (logits,), fn, "cross_entropy")
