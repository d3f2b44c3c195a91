"""Pure numpy implementations of the hot kernels.

Each function here has a compiled twin in ``_kernels.pyx`` with the same
signature and bit-identical output. ``bubbleattack.kernels`` picks one of
the two at import time.
"""
import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

_MIN_NORMAL32 = 2.0 ** -126
_SUBNORMAL_STEP_TF32 = 2.0 ** -136
_OVERFLOW32 = 2.0 ** 128
_DROP = np.uint64(42)  # 52 - 10 mantissa bits
_HALF = np.uint64((1 << 41) - 1)
_MASK = np.uint64(~((1 << 42) - 1) & 0xFFFFFFFFFFFFFFFF)


def im2col(x, kh, kw, stride):
    """(N, C, H, W) -> contiguous (N, C, kh, kw, Ho, Wo) patch array."""
    win = sliding_window_view(x, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    return np.ascontiguousarray(win.transpose(0, 1, 4, 5, 2, 3))


def col2im(cols, height, width, stride):
    """Scatter-add (N, C, kh, kw, Ho, Wo) patches onto an (N, C, height, width) grid."""
    n, c, kh, kw, ho, wo = cols.shape
    out = np.zeros((n, c, height, width), dtype=cols.dtype)
    for a in range(kh):
        for b in range(kw):
            out[:, :, a:a + stride * (ho - 1) + 1:stride, b:b + stride * (wo - 1) + 1:stride] += cols[:, :, a, b]
    return out


def maxpool2_forward(x):
    """2x2/2 max pooling on even extents; returns (out, argmax index 0..3)."""
    n, c, h, w = x.shape
    win = x.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5)
    win = win.reshape(n, c, h // 2, w // 2, 4)
    idx = np.argmax(win, axis=-1).astype(np.uint8)
    out = np.take_along_axis(win, idx[..., None].astype(np.intp), axis=-1)[..., 0]
    return np.ascontiguousarray(out), idx


def maxpool2_backward(grad_out, idx):
    n, c, ho, wo = grad_out.shape
    onehot = idx[..., None] == np.arange(4, dtype=np.uint8)
    spread = np.where(onehot, grad_out[..., None], grad_out.dtype.type(0))
    spread = spread.reshape(n, c, ho, wo, 2, 2).transpose(0, 1, 2, 4, 3, 5)
    return np.ascontiguousarray(spread.reshape(n, c, 2 * ho, 2 * wo))


def round_reduced(x):
    """Round float64 values to a 10-bit mantissa with float32 exponent range."""
    x = np.array(x, dtype=np.float64, copy=True)
    finite = np.isfinite(x)
    tiny = finite & (np.abs(x) < _MIN_NORMAL32)
    normal = finite & ~tiny
    bits = x[normal].view(np.uint64)
    bits = (bits + _HALF + ((bits >> _DROP) & np.uint64(1))) & _MASK
    vals = bits.view(np.float64)
    vals = np.where(np.abs(vals) >= _OVERFLOW32, np.copysign(np.inf, vals), vals)
    x[normal] = vals
    x[tiny] = np.rint(x[tiny] / _SUBNORMAL_STEP_TF32) * _SUBNORMAL_STEP_TF32
    return x


def error_diffusion(darkness, carry=None, row0=0):
    """Serpentine Floyd-Steinberg on a darkness field in [0, 1]; 1 = ink.

    ``carry`` holds error already pushed into the first row (from a strip
    above); ``row0`` is the absolute index of the first row, which fixes the
    scan direction. Returns ``(ink, carry_out)`` where ``carry_out`` is the
    error destined for the row after the last.
    """
    d = np.array(darkness, dtype=np.float64, copy=True)
    h, w = d.shape
    if carry is not None:
        d[0] += carry
    spill = np.zeros(w)
    out = np.zeros((h, w), dtype=np.uint8)
    for i in range(h):
        row = d[i]
        nxt = d[i + 1] if i + 1 < h else spill
        if (row0 + i) % 2 == 0:
            cols, step = range(w), 1
        else:
            cols, step = range(w - 1, -1, -1), -1
        for j in cols:
            old = row[j]
            ink = 1.0 if old >= 0.5 else 0.0
            out[i, j] = 1 if ink else 0
            err = old - ink
            jn = j + step
            jp = j - step
            if 0 <= jn < w:
                row[jn] += err * 0.4375
            if 0 <= jp < w:
                nxt[jp] += err * 0.1875
            nxt[j] += err * 0.3125
            if 0 <= jn < w:
                nxt[jn] += err * 0.0625
    return out, spill


def box_downsample(raster, factor):
    """Mean of each factor x factor block of a uint8 raster, as float64."""
    h, w = raster.shape
    blocks = raster.reshape(h // factor, factor, w // factor, factor)
    return blocks.sum(axis=(1, 3), dtype=np.int64) / float(factor * factor)
