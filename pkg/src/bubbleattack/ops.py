"""Differentiable primitives.

Image ops accept either a single ``(C, H, W)`` tensor or a batch
``(N, C, H, W)``; vector ops accept ``(D,)`` or ``(N, D)``.
"""
from __future__ import annotations

import numpy as np

from . import kernels
from .tensor import Kind, PrecisionMode, Tensor, record


class DimensionError(ValueError):
    pass


class LabelError(ValueError):
    pass


def _mode_of(*items) -> PrecisionMode:
    modes = {t.mode for t in items if isinstance(t, Tensor)}
    if len(modes) > 1:
        raise ValueError(f"mixed precision modes: {sorted(m.name for m in modes)}")
    return modes.pop()


def as_tensor(x, mode: PrecisionMode) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor._wrap(mode.finish(np.asarray(x, dtype=np.float64)), mode)


def _unbroadcast(g, shape):
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# ---------------------------------------------------------------- elementwise

def add(a, b):
    mode = _mode_of(a, b)
    a, b = as_tensor(a, mode), as_tensor(b, mode)
    out = Tensor._wrap(mode.finish(a.data + b.data), mode)

    def back(g, needs):
        return (mode.finish(_unbroadcast(g, a.shape)) if needs[0] else None,
                mode.finish(_unbroadcast(g, b.shape)) if needs[1] else None)
    return record((a, b), out, back, "add")


def sub(a, b):
    mode = _mode_of(a, b)
    a, b = as_tensor(a, mode), as_tensor(b, mode)
    out = Tensor._wrap(mode.finish(a.data - b.data), mode)

    def back(g, needs):
        return (mode.finish(_unbroadcast(g, a.shape)) if needs[0] else None,
                mode.finish(_unbroadcast(-g, b.shape)) if needs[1] else None)
    return record((a, b), out, back, "sub")


def mul(a, b):
    mode = _mode_of(a, b)
    a, b = as_tensor(a, mode), as_tensor(b, mode)
    out = Tensor._wrap(mode.finish(mode.operand(a.data) * mode.operand(b.data)), mode)

    def back(g, needs):
        ga = gb = None
        if needs[0]:
            ga = mode.finish(_unbroadcast(mode.operand(g) * mode.operand(b.data), a.shape))
        if needs[1]:
            gb = mode.finish(_unbroadcast(mode.operand(g) * mode.operand(a.data), b.shape))
        return ga, gb
    return record((a, b), out, back, "mul")


def tsum(x: Tensor, axis=None):
    mode = x.mode
    out = Tensor._wrap(mode.finish(x.data.sum(axis=axis)), mode)

    def back(g, needs):
        gg = g if axis is None else np.expand_dims(g, axis)
        return (mode.finish(np.broadcast_to(gg, x.shape).copy()),)
    return record((x,), out, back, "sum")


def mean(x: Tensor):
    return mul(tsum(x), 1.0 / x.data.size)


def relu(x: Tensor):
    mode = x.mode
    pos = x.data > 0
    out = Tensor._wrap(np.where(pos, x.data, x.data.dtype.type(0)), mode)

    def back(g, needs):
        return (np.where(pos, g, g.dtype.type(0)),)
    return record((x,), out, back, "relu")


def reshape(x: Tensor, shape):
    mode = x.mode
    out = Tensor._wrap(x.data.reshape(shape), mode)

    def back(g, needs):
        return (g.reshape(x.shape),)
    return record((x,), out, back, "reshape")


def flatten(x: Tensor):
    """Flatten all but the leading (batch) axis."""
    return reshape(x, (x.shape[0], -1))


def crop(x: Tensor, index):
    """Differentiable basic slicing, e.g. ``crop(x, (..., slice(1, -1), slice(None)))``."""
    mode = x.mode
    out = Tensor._wrap(np.ascontiguousarray(x.data[index]), mode)

    def back(g, needs):
        full = np.zeros(x.shape, dtype=g.dtype)
        full[index] = g
        return (full,)
    return record((x,), out, back, "crop")


def dropout(x: Tensor, rate: float, rng: np.random.Generator | None, training: bool):
    """Inverted dropout; identity unless ``training``."""
    if not training or rate <= 0.0:
        return x
    if rate >= 1.0:
        raise ValueError("dropout rate must be < 1")
    mode = x.mode
    keep = (rng.random(x.shape) >= rate)
    scale = (keep / (1.0 - rate)).astype(x.data.dtype)
    out = Tensor._wrap(mode.finish(x.data * scale), mode)

    def back(g, needs):
        return (mode.finish(g * scale),)
    return record((x,), out, back, "dropout")


# ---------------------------------------------------------------- dense layers

def linear(x: Tensor, weights: Tensor, bias: Tensor | None = None):
    """Affine map ``x W^T + b`` with ``W`` of shape (M, N)."""
    mode = _mode_of(x, weights, bias)
    if weights.ndim != 2:
        raise DimensionError(f"weights must be 2-D, got shape {weights.shape}")
    if x.shape[-1] != weights.shape[1]:
        raise DimensionError(
            f"input axis -1 has {x.shape[-1]} features but weights axis 1 expects {weights.shape[1]}")
    if bias is not None and bias.shape != (weights.shape[0],):
        raise DimensionError(f"bias shape {bias.shape} does not match weights axis 0 ({weights.shape[0]})")
    z = mode.matmul(x.data, weights.data.T)
    if bias is not None:
        z = mode.finish(z + bias.data)
    out = Tensor._wrap(z, mode)

    def back(g, needs):
        gx = mode.matmul(g, weights.data) if needs[0] else None
        gw = gb = None
        if needs[1]:
            gw = mode.matmul(g.reshape(-1, g.shape[-1]).T, x.data.reshape(-1, x.shape[-1]))
        if len(needs) > 2 and needs[2]:
            gb = mode.finish(g.reshape(-1, g.shape[-1]).sum(axis=0))
        return gx, gw, gb
    inputs = (x, weights) if bias is None else (x, weights, bias)
    return record(inputs, out, back, "linear")


# ---------------------------------------------------------------- convolution

def _batched(x: Tensor):
    if x.ndim == 3:
        return reshape(x, (1,) + x.shape), True
    if x.ndim == 4:
        return x, False
    raise DimensionError(f"expected (C,H,W) or (N,C,H,W) input, got shape {x.shape}")


def conv2d(x: Tensor, kernel: Tensor, bias: Tensor | None = None, stride: int = 1, padding: int = 0):
    """Valid cross-correlation (after optional zero padding)."""
    xb, single = _batched(x)
    mode = _mode_of(xb, kernel, bias)
    if kernel.ndim != 4:
        raise DimensionError(f"kernel must be (F, C, kh, kw), got shape {kernel.shape}")
    f, c, kh, kw = kernel.shape
    n, cx, h, w = xb.shape
    if cx != c:
        raise DimensionError(f"input axis 1 (channels) is {cx} but kernel axis 1 is {c}")
    hp, wp = h + 2 * padding, w + 2 * padding
    if hp < kh or wp < kw:
        raise DimensionError(f"input spatial axes (2, 3) = ({h}, {w}) smaller than kernel ({kh}, {kw})")
    if bias is not None and bias.shape != (f,):
        raise DimensionError(f"bias shape {bias.shape} does not match kernel axis 0 ({f})")

    xd = mode.operand(xb.data)
    if padding:
        xd = np.pad(xd, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    cols = kernels.im2col(xd, kh, kw, stride)
    ho, wo = cols.shape[4], cols.shape[5]
    K, P = c * kh * kw, ho * wo
    cm = cols.reshape(n, K, P)
    wm = mode.operand(kernel.data).reshape(f, K)
    z = mode.finish(np.matmul(wm, cm))
    if bias is not None:
        z = mode.finish(z + bias.data[None, :, None])
    out = Tensor._wrap(z.reshape(n, f, ho, wo), mode)

    def back(g, needs):
        gm = mode.operand(g.reshape(n, f, P))
        gx = gk = gbias = None
        if needs[0]:
            dcols = mode.finish(np.matmul(wm.T, gm)).reshape(n, c, kh, kw, ho, wo)
            full = mode.finish(kernels.col2im(dcols, hp, wp, stride))
            gx = full[:, :, padding:padding + h, padding:padding + w] if padding else full
            gx = np.ascontiguousarray(gx)
        if needs[1]:
            gk = mode.finish(np.matmul(gm, cm.transpose(0, 2, 1)).sum(axis=0)).reshape(kernel.shape)
        if len(needs) > 2 and needs[2]:
            gbias = mode.finish(g.sum(axis=(0, 2, 3)))
        return gx, gk, gbias
    inputs = (xb, kernel) if bias is None else (xb, kernel, bias)
    out = record(inputs, out, back, "conv2d")
    return reshape(out, out.shape[1:]) if single else out


def conv_transpose2d(x: Tensor, kernel: Tensor, bias: Tensor | None = None, stride: int = 1):
    """Transposed convolution; kernel layout (C_in, F_out, kh, kw), no padding."""
    xb, single = _batched(x)
    mode = _mode_of(xb, kernel, bias)
    if kernel.ndim != 4:
        raise DimensionError(f"kernel must be (C, F, kh, kw), got shape {kernel.shape}")
    c, f, kh, kw = kernel.shape
    n, cx, h, w = xb.shape
    if cx != c:
        raise DimensionError(f"input axis 1 (channels) is {cx} but kernel axis 0 is {c}")
    ho, wo = (h - 1) * stride + kh, (w - 1) * stride + kw
    K = f * kh * kw
    xm = mode.operand(xb.data).reshape(n, c, h * w)
    wm = mode.operand(kernel.data).reshape(c, K)
    cols = mode.finish(np.matmul(wm.T, xm)).reshape(n, f, kh, kw, h, w)
    z = mode.finish(kernels.col2im(cols, ho, wo, stride))
    if bias is not None:
        z = mode.finish(z + bias.data[None, :, None, None])
    out = Tensor._wrap(z, mode)

    def back(g, needs):
        gcols = kernels.im2col(mode.operand(g), kh, kw, stride).reshape(n, K, h * w)
        gx = gk = gbias = None
        if needs[0]:
            gx = mode.finish(np.matmul(wm, gcols)).reshape(n, c, h, w)
        if needs[1]:
            gk = mode.finish(np.matmul(xm, gcols.transpose(0, 2, 1)).sum(axis=0)).reshape(kernel.shape)
        if len(needs) > 2 and needs[2]:
            gbias = mode.finish(g.sum(axis=(0, 2, 3)))
        return gx, gk, gbias
    inputs = (xb, kernel) if bias is None else (xb, kernel, bias)
    out = record(inputs, out, back, "conv_transpose2d")
    return reshape(out, out.shape[1:]) if single else out


def maxpool2(x: Tensor):
    """2x2 max pooling with stride 2.

    Odd trailing rows/columns are dropped (floor semantics). Ties route the
    gradient to the first cell in row-major window order.
    """
    if x.data.size == 0:
        raise DimensionError("maxpool2 on empty input")
    xb, single = _batched(x)
    mode = xb.mode
    n, c, h, w = xb.shape
    if h < 2 or w < 2:
        raise DimensionError(f"spatial axes (2, 3) = ({h}, {w}) too small for 2x2 pooling")
    he, we = h - h % 2, w - w % 2
    src = xb.data[:, :, :he, :we]
    pooled, idx = kernels.maxpool2_forward(np.ascontiguousarray(src))
    out = Tensor._wrap(pooled, mode)

    def back(g, needs):
        gi = kernels.maxpool2_backward(g, idx)
        if (he, we) != (h, w):
            full = np.zeros((n, c, h, w), dtype=gi.dtype)
            full[:, :, :he, :we] = gi
            gi = full
        return (gi,)
    out = record((xb,), out, back, "maxpool2")
    return reshape(out, out.shape[1:]) if single else out


# ---------------------------------------------------------------- heads and losses

def softmax(z: Tensor, stabilized: bool = False):
    """Softmax along the last axis, evaluated as ``e^z / sum(e^z)``.

    With ``stabilized`` the row maximum is subtracted first. The default
    deliberately keeps the raw form so float32 absorption and underflow
    behave as they do in a naive implementation.
    """
    mode = z.mode
    if z.shape[-1] < 2:
        raise DimensionError(f"softmax needs at least 2 classes on axis -1, got {z.shape[-1]}")
    zz = z.data
    if stabilized:
        zz = mode.finish(zz - zz.max(axis=-1, keepdims=True))
    with np.errstate(over="ignore", under="ignore", invalid="ignore"):
        e = mode.finish(np.exp(zz))
        s = mode.finish(e.sum(axis=-1, keepdims=True))
        y = mode.finish(e / s)
    out = Tensor._wrap(y, mode)

    def back(g, needs):
        with np.errstate(invalid="ignore", over="ignore", under="ignore"):
            gy = mode.finish(g * y)
            dot = mode.finish(gy.sum(axis=-1, keepdims=True))
            return (mode.finish(gy - mode.finish(y * dot)),)
    return record((z,), out, back, "softmax", saved={"exp": e, "sum": s})


def _check_onehot(onehot: np.ndarray):
    ok = np.isin(onehot, (0.0, 1.0)).all() and np.all(onehot.sum(axis=-1) == 1)
    if not ok:
        raise LabelError("labels must be one-hot rows (a single 1, zeros elsewhere)")


def cross_entropy(confidence: Tensor, onehot, reduction: str = "sum"):
    """``-sum_i y_i log(conf_i)`` per row, with ``0 * log 0`` taken as 0.

    When ``confidence`` came straight out of :func:`softmax`, the backward
    pass uses the combined softmax/CE derivative ``conf - y`` on the logits
    (finite even where ``log`` returned -inf). Otherwise the gradient with
    respect to ``confidence`` is ``-y / conf``, which is infinite at a zero
    confidence on the labelled class.
    """
    mode = confidence.mode
    y = np.asarray(onehot, dtype=np.float64)
    if y.shape != confidence.shape:
        raise LabelError(f"label shape {y.shape} != confidence shape {confidence.shape}")
    _check_onehot(y)
    ym = y.astype(mode.dtype)
    conf = confidence.data
    with np.errstate(divide="ignore", invalid="ignore"):
        picked = np.where(y > 0, conf, conf.dtype.type(1)).prod(axis=-1)
        rows = mode.finish(-np.log(picked))
    if reduction == "sum":
        loss = mode.finish(rows.sum())
        scale = 1.0
    elif reduction == "mean":
        loss = mode.finish(rows.sum() / rows.size)
        scale = 1.0 / rows.size
    elif reduction == "none":
        loss = rows
        scale = None
    else:
        raise ValueError(f"unknown reduction {reduction!r}")
    out = Tensor._wrap(np.asarray(loss), mode)

    def upstream(g):
        if scale is None:
            return g[..., None]
        return g * mode.dtype(scale) if scale != 1.0 else g

    node = confidence._node
    if node is not None and node.kind == "softmax":
        logits = node.inputs[0]

        def back_fused(g, needs):
            return (mode.finish(mode.finish(conf - ym) * upstream(g)),)
        return record((logits,), out, back_fused, "softmax_cross_entropy")

    def back(g, needs):
        with np.errstate(divide="ignore", invalid="ignore"):
            return (mode.finish(mode.finish(-ym / conf) * upstream(g)),)
    return record((confidence,), out, back, "cross_entropy")


def binary_dlr(logits: Tensor, labels, reduction: str = "sum"):
    """Two-class DLR numerator: ``-(z_y - z_{1-y})`` per row."""
    labels = np.asarray(labels, dtype=np.int64)
    if logits.shape[-1] != 2:
        raise DimensionError(f"binary DLR needs 2 logits on axis -1, got {logits.shape[-1]}")
    coef = np.zeros(logits.shape, dtype=np.float64)
    idx = np.arange(labels.size)
    coef.reshape(-1, 2)[idx, labels.reshape(-1)] = -1.0
    coef.reshape(-1, 2)[idx, 1 - labels.reshape(-1)] = 1.0
    rows = tsum_last(mul(logits, coef))
    if reduction == "none":
        return rows
    return tsum(rows) if reduction == "sum" else mean(rows)


def tsum_last(x: Tensor):
    return tsum(x, axis=-1)


def mse(pred: Tensor, target):
    mode = pred.mode
    diff = sub(pred, as_tensor(target, mode))
    return mean(mul(diff, diff))
