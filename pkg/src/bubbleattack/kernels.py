"""Kernel backend selection.

The compiled ``_kernels`` extension is used when it imports; otherwise the
numpy ``_fallback`` is used. Set ``BUBBLEATTACK_PURE=1`` to force the
fallback (both produce identical bits).
"""
import os

from . import _fallback

BACKEND = "python"
_impl = _fallback

if os.environ.get("BUBBLEATTACK_PURE") != "1":
    try:
        from . import _kernels as _impl  # type: ignore[no-redef]

        BACKEND = "cython"
    except ImportError:  # extension not built
        _impl = _fallback


def _contig(a):
    return a if a.flags.c_contiguous else a.copy(order="C")


def im2col(x, kh, kw, stride=1):
    return _impl.im2col(_contig(x), kh, kw, stride)


def col2im(cols, height, width, stride=1):
    return _impl.col2im(_contig(cols), height, width, stride)


def maxpool2_forward(x):
    return _impl.maxpool2_forward(_contig(x))


def maxpool2_backward(grad_out, idx):
    return _impl.maxpool2_backward(_contig(grad_out), _contig(idx))


def round_reduced(x):
    return _impl.round_reduced(x)


def error_diffusion(darkness, carry=None, row0=0):
    return _impl.error_diffusion(darkness, carry, row0)


def box_downsample(raster, factor):
    return _impl.box_downsample(_contig(raster), factor)
