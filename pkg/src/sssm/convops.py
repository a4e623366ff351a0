"""Convolution primitives: 2D, 3D, and transposed 3D.

All three lower to one GEMM via an im2col gather, which is the only way to
get usable throughput out of numpy.  The gather/scatter loops run over
kernel offsets (9 or 27 strided block copies), never over pixels.

Data layouts: images are (H, W, C), volumes are (H, W, D, C).  2D kernels
are (k, k, Cin, Cout) indexed (dy, dx, cin, cout); 3D kernels are
(k, k, k, Cin, Cout) indexed (dh, dw, dd, cin, cout).  ``deconv3d`` takes
the kernel in the same layout as the ``conv3d`` it is the adjoint of, so a
single weight tensor describes both directions.
"""

from __future__ import annotations

import numpy as np

from .autodiff import Tensor, accumulate, make_op


def _same_pads(n: int, k: int, stride: int) -> tuple[int, int, int]:
    """(out_extent, pad_before, pad_after) for same-padding at a given stride."""
    out = -(-n // stride)
    needed = (out - 1) * stride + k
    total = max(0, needed - n)
    before = min((k - 1) // 2, total)
    return out, before, total - before


def _conv_geometry(spatial, k, stride, padding):
    """Per-axis (out, pad_before, pad_after); raises on impossible shapes."""
    geo = []
    for n in spatial:
        if padding == "same":
            geo.append(_same_pads(n, k, stride))
        else:
            if n < k:
                raise ValueError(f"conv: extent {n} smaller than kernel {k}")
            geo.append(((n - k) // stride + 1, 0, 0))
    return geo


def _offsets(j: int, k: int, s: int) -> list[int]:
    """Decode flat kernel offset j into s per-axis displacements (C order)."""
    offs = []
    for power in range(s - 1, -1, -1):
        q, j = divmod(j, k ** power)
        offs.append(q)
    return offs


def _im2col(xp: np.ndarray, k: int, stride: int, out_dims) -> np.ndarray:
    """Gather kernel windows of a padded array into (prod(out), k^S * C).

    ``xp`` has S spatial axes plus a trailing channel axis.  Column j of the
    flattened kernel enumerates spatial displacements in C order, matching
    kernel.reshape(k**S * C, -1).  One strided view + one copy; no per-offset
    loop.
    """
    s = len(out_dims)
    c = xp.shape[-1]
    win = np.lib.stride_tricks.sliding_window_view(xp, (k,) * s, axis=tuple(range(s)))
    sub = win[tuple(slice(None, stride * n, stride) for n in out_dims)]
    order = tuple(range(s)) + tuple(range(s + 1, 2 * s + 1)) + (s,)
    cols = np.ascontiguousarray(sub.transpose(order))
    return cols.reshape(int(np.prod(out_dims)), k ** s * c)


def _col2im(gcols: np.ndarray, padded_shape, k: int, stride: int, out_dims) -> np.ndarray:
    """Adjoint of ``_im2col``: scatter-add columns back onto the padded array."""
    s = len(out_dims)
    c = padded_shape[-1]
    g = gcols.reshape(tuple(out_dims) + (k ** s, c))
    xp = np.zeros(padded_shape, dtype=gcols.dtype)
    for j in range(k ** s):
        offs = _offsets(j, k, s)
        dst = tuple(slice(o, o + stride * out_dims[i], stride) for i, o in enumerate(offs))
        xp[dst + (slice(None),)] += g[..., j, :]
    return xp


def _unpad(xp: np.ndarray, geo) -> np.ndarray:
    slices = tuple(slice(pb, xp.shape[i] - pa) for i, (_, pb, pa) in enumerate(geo))
    return xp[slices + (slice(None),)]


def _conv_nd(x: Tensor, kernel: Tensor, bias: Tensor, stride: int, padding: str, nd: int) -> Tensor:
    k = kernel.data.shape[0]
    cin, cout = kernel.data.shape[-2], kernel.data.shape[-1]
    if x.data.shape[-1] != cin:
        raise ValueError(f"conv: input has {x.data.shape[-1]} channels, kernel expects {cin}")
    if bias.data.shape != (cout,):
        raise ValueError(f"conv: bias shape {bias.data.shape} != ({cout},)")
    if x.data.dtype != kernel.data.dtype:
        raise ValueError(f"conv: dtype mismatch {x.data.dtype} vs {kernel.data.dtype}")
    spatial = x.data.shape[:-1]
    geo = _conv_geometry(spatial, k, stride, padding)
    out_dims = [g[0] for g in geo]
    pads = tuple((g[1], g[2]) for g in geo) + ((0, 0),)
    xp = np.pad(x.data, pads)
    cols = _im2col(xp, k, stride, out_dims)
    wmat = kernel.data.reshape(k ** nd * cin, cout)
    out = cols @ wmat + bias.data
    out_data = out.reshape(tuple(out_dims) + (cout,))
    needs_cols = kernel.requires_grad
    cached_cols = cols if needs_cols else None

    def bwd(g):
        gmat = g.reshape(-1, cout)
        if kernel.requires_grad:
            accumulate(kernel, (cached_cols.T @ gmat).reshape(kernel.data.shape))
        if bias.requires_grad:
            accumulate(bias, gmat.sum(axis=0))
        if x.requires_grad:
            gxp = _col2im(gmat @ wmat.T, xp.shape, k, stride, out_dims)
            accumulate(x, _unpad(gxp, geo))

    return make_op(out_data, (x, kernel, bias), bwd)


def conv2d(x: Tensor, kernel: Tensor, bias: Tensor, stride: int = 1, padding: str = "same") -> Tensor:
    """2D convolution over an (H, W, Cin) tensor with a (k, k, Cin, Cout) kernel.

    ``padding`` is "same" (stride-1 output matches input dims) or "valid".
    Odd square kernels only.
    """
    if x.data.ndim != 3:
        raise ValueError(f"conv2d: expected (H, W, C) input, got shape {x.data.shape}")
    if kernel.data.ndim != 4 or kernel.data.shape[0] != kernel.data.shape[1]:
        raise ValueError(f"conv2d: expected (k, k, Cin, Cout) kernel, got shape {kernel.data.shape}")
    if kernel.data.shape[0] % 2 != 1:
        raise ValueError(f"conv2d: kernel extent must be odd, got {kernel.data.shape[0]}")
    if stride < 1:
        raise ValueError(f"conv2d: stride must be >= 1, got {stride}")
    if padding not in ("same", "valid"):
        raise ValueError(f"conv2d: padding must be 'same' or 'valid', got {padding!r}")
    return _conv_nd(x, kernel, bias, int(stride), padding, nd=2)


def conv3d(x: Tensor, kernel: Tensor, bias: Tensor, stride: int = 1) -> Tensor:
    """3D convolution over an (H, W, D, Cin) tensor, same-padded.

    Stride 1 preserves dims; stride 2 requires all three spatial dims to be
    divisible by 2 and halves them.
    """
    if x.data.ndim != 4:
        raise ValueError(f"conv3d: expected (H, W, D, C) input, got shape {x.data.shape}")
    if kernel.data.ndim != 5 or len({kernel.data.shape[0], kernel.data.shape[1], kernel.data.shape[2]}) != 1:
        raise ValueError(f"conv3d: expected (k, k, k, Cin, Cout) kernel, got shape {kernel.data.shape}")
    if stride not in (1, 2):
        raise ValueError(f"conv3d: stride must be 1 or 2, got {stride}")
    if stride == 2:
        bad = [n for n in x.data.shape[:3] if n % 2]
        if bad:
            raise ValueError(f"conv3d: stride-2 input dims must be even, got {x.data.shape[:3]}")
    return _conv_nd(x, kernel, bias, int(stride), "same", nd=3)


def deconv3d(y: Tensor, kernel: Tensor, bias: Tensor) -> Tensor:
    """Transposed 3D convolution, the exact adjoint of stride-2 ``conv3d``.

    The kernel is given in conv3d layout (k, k, k, Cin, Cout): with that
    kernel conv3d maps (2h, 2w, 2d, Cin) -> (h, w, d, Cout), and deconv3d
    maps (h, w, d, Cout) -> (2h, 2w, 2d, Cin), satisfying
    <conv3d(x), y> == <x, deconv3d(y)> with zero biases.  ``bias`` has
    length Cin and is added to the upsampled output.
    """
    if y.data.ndim != 4:
        raise ValueError(f"deconv3d: expected (H, W, D, C) input, got shape {y.data.shape}")
    if kernel.data.ndim != 5:
        raise ValueError(f"deconv3d: expected (k, k, k, Cin, Cout) kernel, got shape {kernel.data.shape}")
    k = kernel.data.shape[0]
    cin, cout = kernel.data.shape[3], kernel.data.shape[4]
    if y.data.shape[-1] != cout:
        raise ValueError(f"deconv3d: input has {y.data.shape[-1]} channels, kernel expects {cout}")
    if bias.data.shape != (cin,):
        raise ValueError(f"deconv3d: bias shape {bias.data.shape} != ({cin},)")
    stride = 2
    small = y.data.shape[:3]
    big = tuple(2 * n for n in small)
    geo = _conv_geometry(big, k, stride, "same")
    assert tuple(g[0] for g in geo) == small
    padded_shape = tuple(n + g[1] + g[2] for n, g in zip(big, geo)) + (cin,)
    wmat = kernel.data.reshape(k ** 3 * cin, cout)
    ymat = y.data.reshape(-1, cout)
    out_data = np.ascontiguousarray(_unpad(_col2im(ymat @ wmat.T, padded_shape, k, stride, small), geo))
    out_data += bias.data

    def bwd(g):
        gp = np.pad(g, tuple((gg[1], gg[2]) for gg in geo) + ((0, 0),))
        gcols = _im2col(gp, k, stride, small)
        if y.requires_grad:
            accumulate(y, (gcols @ wmat).reshape(y.data.shape))
        if kernel.requires_grad:
            accumulate(kernel, (gcols.T @ ymat).reshape(kernel.data.shape))
        if bias.requires_grad:
            accumulate(bias, g.sum(axis=(0, 1, 2)))

    return make_op(out_data, (y, kernel, bias), bwd)
