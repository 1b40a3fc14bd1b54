"""Differentiable operations on :class:`~facade_rcnn.tensor.Tensor`.

Convolution follows the deep-learning convention: cross-correlation with
zero padding applied symmetrically on every side.
"""
from __future__ import annotations

from typing import Optional

import numpy as np
from scipy import sparse

from .tensor import Tensor, _make, ensure_tensor


def conv_output_size(size: int, k: int, stride: int, padding: int, dilation: int) -> int:
    return (size + 2 * padding - dilation * (k - 1) - 1) // stride + 1


def _check_conv(x: Tensor, w: Tensor, stride, padding, dilation):
    if x.ndim != 4:
        raise ValueError(f"conv2d input must be [N,C,H,W], got shape {x.shape}")
    if w.ndim != 4:
        raise ValueError(f"conv2d kernel must be [K,C,h,w], got shape {w.shape}")
    if x.shape[1] != w.shape[1]:
        raise ValueError(
            f"conv2d channel mismatch: input has C={x.shape[1]}, kernel expects C={w.shape[1]}")
    kh, kw = w.shape[2:]
    if kh % 2 == 0 or kw % 2 == 0:
        raise ValueError(f"conv2d kernel extents must be odd, got {kh}x{kw}")
    if stride < 1 or dilation < 1 or padding < 0:
        raise ValueError("conv2d needs stride >= 1, dilation >= 1, padding >= 0")
    for size, k, label in ((x.shape[2], kh, "H"), (x.shape[3], kw, "W")):
        if size + 2 * padding < dilation * (k - 1) + 1:
            raise ValueError(
                f"conv2d input {label}={size} with padding {padding} is smaller than the "
                f"dilated kernel extent {dilation * (k - 1) + 1}")


def conv2d(x: Tensor, w: Tensor, bias: Optional[Tensor] = None, stride: int = 1,
           padding: int = 0, dilation: int = 1) -> Tensor:
    """2-D cross-correlation of ``x`` [N,C,H,W] with ``w`` [K,C,h,w]."""
    x, w = ensure_tensor(x), ensure_tensor(w)
    _check_conv(x, w, stride, padding, dilation)
    n, c, h, wd = x.shape
    k, _, kh, kw = w.shape
    oh = conv_output_size(h, kh, stride, padding, dilation)
    ow = conv_output_size(wd, kw, stride, padding, dilation)
    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) \
        if padding else x.data

    cols = np.empty((n, oh, ow, c, kh, kw), dtype=x.dtype)
    for i in range(kh):
        for j in range(kw):
            hs, ws = i * dilation, j * dilation
            patch = xp[:, :, hs:hs + stride * (oh - 1) + 1:stride,
                       ws:ws + stride * (ow - 1) + 1:stride]
            cols[..., i, j] = patch.transpose(0, 2, 3, 1)
    cols = cols.reshape(n * oh * ow, c * kh * kw)
    wmat = w.data.reshape(k, -1)
    out = (cols @ wmat.T).reshape(n, oh, ow, k).transpose(0, 3, 1, 2)
    if bias is not None:
        out = out + bias.data.reshape(1, k, 1, 1)
    out = np.ascontiguousarray(out)

    xshape, pshape = x.shape, xp.shape

    def back(g):
        gmat = g.transpose(0, 2, 3, 1).reshape(-1, k)
        gx = None
        if x.requires_grad:
            dcols = (gmat @ wmat).reshape(n, oh, ow, c, kh, kw)
            gxp = np.zeros(pshape, dtype=g.dtype)
            for i in range(kh):
                for j in range(kw):
                    hs, ws = i * dilation, j * dilation
                    gxp[:, :, hs:hs + stride * (oh - 1) + 1:stride,
                        ws:ws + stride * (ow - 1) + 1:stride] += dcols[..., i, j].transpose(0, 3, 1, 2)
            gx = gxp[:, :, padding:padding + xshape[2], padding:padding + xshape[3]] \
                if padding else gxp
        gw = (gmat.T @ cols).reshape(w.shape) if w.requires_grad else None
        if bias is None:
            return gx, gw
        return gx, gw, gmat.sum(axis=0)

    parents = (x, w) if bias is None else (x, w, bias)
    return _make(out, parents, back)


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _make(np.where(mask, x.data, 0.0).astype(x.dtype), (x,), lambda g: (g * mask,))


def linear(x: Tensor, w: Tensor, b: Optional[Tensor] = None) -> Tensor:
    """``x @ w.T + b`` for ``x`` [N,in], ``w`` [out,in]."""
    out = x @ w.transpose(1, 0)
    return out if b is None else out + b


def smooth_l1(x) -> Tensor:
    """Elementwise ``0.5 x^2`` for ``|x| < 1`` and ``|x| - 0.5`` otherwise."""
    x = ensure_tensor(x)
    a = x.data
    small = np.abs(a) < 1.0
    out = np.where(small, 0.5 * a * a, np.abs(a) - 0.5)
    return _make(out, (x,), lambda g: (g * np.where(small, a, np.sign(a)),))


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    a = x.data
    shifted = a - a.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse
    soft = np.exp(out)

    def back(g):
        return (g - soft * g.sum(axis=axis, keepdims=True),)

    return _make(out, (x,), back)


def softmax(a: np.ndarray, axis: int = -1) -> np.ndarray:
    e = np.exp(a - a.max(axis=axis, keepdims=True))
    return e / e.sum(axis=axis, keepdims=True)


def _check_targets(target: np.ndarray, n_classes: int, ignore_index):
    valid = np.ones(target.shape, dtype=bool) if ignore_index is None \
        else target != ignore_index
    t = target[valid]
    if t.size and (t.min() < 0 or t.max() >= n_classes):
        raise ValueError(
            f"class index out of range [0, {n_classes}): found {int(t.min())}..{int(t.max())}")
    return valid


def cross_entropy(logits: Tensor, target, axis: int = 1, ignore_index: Optional[int] = None,
                  mask: Optional[np.ndarray] = None, reduction: str = "mean") -> Tensor:
    """Cross-entropy of class scores along ``axis`` against integer targets.

    ``target`` has the logits' shape with ``axis`` removed. Elements equal to
    ``ignore_index`` or outside ``mask`` are excluded; the mean is taken over
    the remaining elements and is 0 when none remain.
    """
    target = np.asarray(target, dtype=np.int64)
    axis = axis % logits.ndim
    n_classes = logits.shape[axis]
    expected = logits.shape[:axis] + logits.shape[axis + 1:]
    if target.shape != expected:
        raise ValueError(f"target shape {target.shape} does not match logits {logits.shape}")
    valid = _check_targets(target, n_classes, ignore_index)
    if mask is not None:
        valid = valid & np.asarray(mask, dtype=bool)
    count = int(valid.sum())

    lsm = log_softmax(logits, axis=axis)
    safe = np.where(valid, target, 0)
    onehot = (np.expand_dims(safe, axis) == np.arange(n_classes).reshape(
        [-1 if d == axis else 1 for d in range(logits.ndim)]))
    weight = onehot * np.expand_dims(valid, axis)
    if reduction == "sum":
        scale = 1.0
    elif reduction == "mean":
        scale = 1.0 / count if count else 0.0
    else:
        raise ValueError(f"unknown reduction {reduction!r}")
    return -(lsm * Tensor(weight * scale, dtype=logits.dtype)).sum()


def softmax_cross_entropy(logits: Tensor, target) -> Tensor:
    """Mean cross-entropy for ``logits`` [N,C] and class indices [N]."""
    if logits.ndim != 2:
        raise ValueError(f"logits must be [N,C], got {logits.shape}")
    return cross_entropy(logits, target, axis=1)


def bce_with_logits(logits: Tensor, target, weight=None) -> Tensor:
    """Summed binary cross-entropy on logits, optionally per-element weighted."""
    z = logits.data
    t = np.asarray(target, dtype=z.dtype)
    wgt = np.ones_like(z) if weight is None else np.asarray(weight, dtype=z.dtype)
    # log(1 + exp(-|z|)) + max(z, 0) - z t
    out = (np.logaddexp(0.0, -np.abs(z)) + np.maximum(z, 0.0) - z * t) * wgt
    sig = 1.0 / (1.0 + np.exp(-z))
    return _make(np.sum(out), (logits,), lambda g: (g * (sig - t) * wgt,))


def batch_norm(x: Tensor, gamma: Tensor, beta: Tensor, running_mean: np.ndarray,
               running_var: np.ndarray, training: bool, momentum: float = 0.1,
               eps: float = 1e-5) -> Tensor:
    """Per-channel normalisation of ``x`` [N,C,H,W].

    In training mode batch statistics are used and the running buffers are
    updated in place; otherwise the running buffers are used as constants.
    """
    c = x.shape[1]
    shape = (1, c, 1, 1)
    if training:
        axes = (0, 2, 3)
        m = x.data.shape[0] * x.data.shape[2] * x.data.shape[3]
        mu = x.data.mean(axis=axes)
        var = x.data.var(axis=axes)
        running_mean *= 1 - momentum
        running_mean += momentum * mu
        running_var *= 1 - momentum
        running_var += momentum * var * m / max(m - 1, 1)
        inv = 1.0 / np.sqrt(var + eps)
        xhat = (x.data - mu.reshape(shape)) * inv.reshape(shape)

        def back(g):
            gam = gamma.data.reshape(shape)
            gx = None
            if x.requires_grad:
                gh = g * gam
                gx = inv.reshape(shape) / m * (
                    m * gh - gh.sum(axis=axes, keepdims=True)
                    - xhat * (gh * xhat).sum(axis=axes, keepdims=True))
            return gx, (g * xhat).sum(axis=axes), g.sum(axis=axes)
    else:
        inv = 1.0 / np.sqrt(running_var + eps)
        xhat = (x.data - running_mean.reshape(shape)) * inv.reshape(shape)

        def back(g):
            gx = g * (gamma.data * inv).reshape(shape)
            return gx, (g * xhat).sum(axis=(0, 2, 3)), g.sum(axis=(0, 2, 3))

    out = (xhat * gamma.data.reshape(shape) + beta.data.reshape(shape)).astype(x.dtype)
    return _make(out, (x, gamma, beta), back)


def bilinear_matrix(out_size: int, in_size: int, dtype=np.float64) -> np.ndarray:
    """Row-stochastic [out, in] matrix of half-pixel-centred linear resampling."""
    mat = np.zeros((out_size, in_size), dtype=dtype)
    scale = in_size / out_size
    for o in range(out_size):
        src = (o + 0.5) * scale - 0.5
        src = min(max(src, 0.0), in_size - 1)
        lo = int(np.floor(src))
        hi = min(lo + 1, in_size - 1)
        frac = src - lo
        mat[o, lo] += 1.0 - frac
        mat[o, hi] += frac
    return mat


def resize_bilinear(x: Tensor, size: tuple) -> Tensor:
    """Bilinear resize of the last two axes of ``x`` to ``size``."""
    ah = bilinear_matrix(size[0], x.shape[-2], x.dtype)
    aw = bilinear_matrix(size[1], x.shape[-1], x.dtype)
    out = ah @ x.data @ aw.T
    return _make(out, (x,), lambda g: (ah.T @ g @ aw,))


def roi_align(feature: Tensor, boxes: np.ndarray, out_size: int, spatial_scale: float) -> Tensor:
    """Crop-and-resize pooling of ``feature`` [C,H,W] over ``boxes`` [R,4].

    Boxes are (x_min, y_min, x_max, y_max) in image pixels. Each output bin
    takes one bilinear sample at its centre. Returns [R,C,out,out].
    """
    c, h, w = feature.shape
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4) * spatial_scale
    r = boxes.shape[0]
    steps = (np.arange(out_size) + 0.5) / out_size
    xs = boxes[:, 0:1] + steps[None] * (boxes[:, 2:3] - boxes[:, 0:1]) - 0.5
    ys = boxes[:, 1:2] + steps[None] * (boxes[:, 3:4] - boxes[:, 1:2]) - 0.5
    xs = np.clip(xs, 0.0, w - 1)
    ys = np.clip(ys, 0.0, h - 1)
    x0 = np.floor(xs).astype(np.int64)
    y0 = np.floor(ys).astype(np.int64)
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    fx = (xs - x0)[:, None, :]
    fy = (ys - y0)[:, :, None]
    # [R, out_y, out_x] index / weight grids for the four neighbours
    rows = np.arange(r * out_size * out_size)
    idx, wts = [], []
    for yy, xx, wt in (
        (y0[:, :, None], x0[:, None, :], (1 - fy) * (1 - fx)),
        (y0[:, :, None], x1[:, None, :], (1 - fy) * fx),
        (y1[:, :, None], x0[:, None, :], fy * (1 - fx)),
        (y1[:, :, None], x1[:, None, :], fy * fx),
    ):
        yy, xx = np.broadcast_arrays(yy, xx)
        idx.append((yy * w + xx).reshape(-1))
        wts.append(wt.reshape(-1))
    sampler = sparse.csr_matrix(
        (np.concatenate(wts), (np.tile(rows, 4), np.concatenate(idx))),
        shape=(rows.size, h * w), dtype=feature.dtype)
    flat = feature.data.reshape(c, h * w)
    out = (sampler @ flat.T).reshape(r, out_size, out_size, c).transpose(0, 3, 1, 2)

    def back(g):
        gmat = g.transpose(0, 2, 3, 1).reshape(-1, c)
        return ((sampler.T @ gmat).T.reshape(c, h, w),)

    return _make(np.ascontiguousarray(out), (feature,), back)


def concat(tensors, axis: int = 0) -> Tensor:
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    return _make(out, tuple(tensors), lambda g: tuple(np.split(g, splits, axis=axis)))
