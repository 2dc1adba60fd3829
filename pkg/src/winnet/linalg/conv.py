"""2-D convolution (cross-correlation) with dilation and groups.

The operation computed is the deep-learning convention

    out[o, y, x] = sum_{i, a, b} k[o, i, a, b] * in[i, y + a*d - off_y, x + b*d - off_x]

with zero padding and output spatial size equal to the input size.  The
default offset centres the (dilated) kernel; an explicit ``pad_offset``
selects any other alignment, which is what makes exact adjoints of
even-sized kernels expressible (the adjoint of offset ``a`` is the
flipped, channel-transposed kernel at offset ``k_eff - 1 - a``).

Kernels are usually square but may be rectangular (e.g. (1, k) for 1-D
convolution along the width axis).  Forward and both gradients are
evaluated as matrix products over an im2col layout, so the heavy lifting
stays inside BLAS.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import as_strided

from .tensor import ShapeError, Tensor, _make, as_tensor


def _ksize(kernel_shape):
    return kernel_shape[2], kernel_shape[3]


def _keff(kh: int, kw: int, dilation: int):
    return dilation * (kh - 1) + 1, dilation * (kw - 1) + 1


def _window_view(padded: np.ndarray, kh: int, kw: int, dilation: int,
                 H: int, W: int) -> np.ndarray:
    """(N, C, kh, kw, H, W) view of all kernel-tap neighbourhoods."""
    n, c = padded.shape[:2]
    sn, sc, sh, sw = padded.strides
    return as_strided(
        padded,
        shape=(n, c, kh, kw, H, W),
        strides=(sn, sc, sh * dilation, sw * dilation, sh, sw),
        writeable=False,
    )


def _pad_for(x: np.ndarray, keff_y: int, keff_x: int, offset) -> np.ndarray:
    oy, ox = offset
    if keff_y == 1 and keff_x == 1:
        return x
    return np.pad(x, ((0, 0), (0, 0), (oy, keff_y - 1 - oy), (ox, keff_x - 1 - ox)))


def _cols(x: np.ndarray, kh: int, kw: int, dilation: int, groups: int, offset) -> np.ndarray:
    """im2col layout (N, groups, C/g * kh * kw, H * W); free for 1x1 kernels."""
    n, c, H, W = x.shape
    if kh == 1 and kw == 1:
        return x.reshape(n, groups, c // groups, H * W)
    keff_y, keff_x = _keff(kh, kw, dilation)
    padded = _pad_for(x, keff_y, keff_x, offset)
    view = _window_view(padded, kh, kw, dilation, H, W)
    return np.ascontiguousarray(view).reshape(n, groups, (c // groups) * kh * kw, H * W)


def _conv2d_raw(x: np.ndarray, w: np.ndarray, dilation: int, groups: int, offset) -> np.ndarray:
    """Forward pass on plain arrays; x is (N, Cin, H, W), w is (Cout, Cin/g, kh, kw)."""
    n, cin, H, W = x.shape
    cout, cin_g, kh, kw = w.shape
    cols = _cols(x, kh, kw, dilation, groups, offset)
    wg = w.reshape(groups, cout // groups, cin_g * kh * kw)
    out = np.matmul(wg, cols)  # (N, g, Cout_g, H*W)
    return out.reshape(n, cout, H, W)


def adjoint_kernel(w: np.ndarray, groups: int = 1) -> np.ndarray:
    """Kernel realizing the exact adjoint map: channels swapped per group, taps flipped."""
    cout, cin_g, kh, kw = w.shape
    wg = w.reshape(groups, cout // groups, cin_g, kh, kw)
    adj = wg.transpose(0, 2, 1, 3, 4)[..., ::-1, ::-1]
    return np.ascontiguousarray(adj).reshape(groups * cin_g, cout // groups, kh, kw)


def default_offset(k, dilation: int = 1):
    kh, kw = (k, k) if np.isscalar(k) else k
    keff_y, keff_x = _keff(kh, kw, dilation)
    return ((keff_y - 1) // 2, (keff_x - 1) // 2)


def complement_offset(k, dilation: int, offset):
    kh, kw = (k, k) if np.isscalar(k) else k
    keff_y, keff_x = _keff(kh, kw, dilation)
    return (keff_y - 1 - offset[0], keff_x - 1 - offset[1])


def conv2d(x, kernel, dilation: int = 1, groups: int = 1, pad_offset=None) -> Tensor:
    """Same-size 2-D cross-correlation, differentiable in input and kernel.

    ``x`` may be (Cin, H, W) or batched (N, Cin, H, W); ``kernel`` is
    (Cout, Cin/groups, kh, kw).  Zero padding.
    """
    x = as_tensor(x)
    kernel = as_tensor(kernel)
    if dilation < 1:
        raise ValueError(f"dilation must be >= 1, got {dilation}")
    if kernel.ndim != 4:
        raise ShapeError(f"kernel must be (Cout, Cin/groups, kh, kw), got {kernel.shape}")
    squeeze = x.ndim == 3
    if x.ndim not in (3, 4):
        raise ShapeError(f"input must be (Cin, H, W) or (N, Cin, H, W), got {x.shape}")
    xd = x.data[None] if squeeze else x.data
    cout, cin_g, kh, kw = kernel.shape
    cin = xd.shape[1]
    if groups < 1 or cin % groups or cout % groups or cin_g != cin // groups:
        raise ShapeError(
            f"groups={groups} incompatible with Cin={cin}, Cout={cout}, kernel Cin/g={cin_g}"
        )
    if xd.shape[2] < 1 or xd.shape[3] < 1:
        raise ShapeError("empty spatial extent")
    offset = default_offset((kh, kw), dilation) if pad_offset is None else tuple(pad_offset)
    keff_y, keff_x = _keff(kh, kw, dilation)
    if not (0 <= offset[0] <= keff_y - 1 and 0 <= offset[1] <= keff_x - 1):
        raise ValueError(f"pad_offset {offset} outside kernel footprint ({keff_y}, {keff_x})")

    w = kernel.data.astype(xd.dtype, copy=False)
    out = _conv2d_raw(xd, w, dilation, groups, offset)
    n, _, H, W = xd.shape

    def bwd(g):
        g4 = g[None] if squeeze else g
        gx = gk = None
        # Both gradients read windows of the output gradient at the
        # complementary offset, so materialize them once.
        gcols = _cols(g4.reshape(n, cout, H, W), kh, kw, dilation, groups,
                      complement_offset((kh, kw), dilation, offset))
        if x.requires_grad:
            adj = adjoint_kernel(w, groups).reshape(groups, cin_g, (cout // groups) * kh * kw)
            gx = np.matmul(adj, gcols).reshape(xd.shape)
            if squeeze:
                gx = gx[0]
        if kernel.requires_grad:
            xflat = xd.reshape(n, groups, cin_g, H * W)
            # (N, g, Cout_g*kh*kw, Cin_g), summed over the batch
            gk = np.matmul(gcols, xflat.transpose(0, 1, 3, 2)).sum(axis=0)
            gk = gk.reshape(groups, cout // groups, kh, kw, cin_g)
            gk = gk.transpose(0, 1, 4, 2, 3)[..., ::-1, ::-1]  # taps enter flipped
            gk = np.ascontiguousarray(gk).reshape(cout, cin_g, kh, kw)
        return gx, gk

    return _make(out[0] if squeeze else out, (x, kernel), bwd)


def conv2d_adjoint(x, kernel, dilation: int = 1, groups: int = 1, pad_offset=None) -> Tensor:
    """Apply the exact adjoint of ``conv2d(., kernel, ...)`` to ``x``.

    Useful for tied analysis/synthesis dictionaries and gradient-style
    operators without materializing anything.
    """
    kernel = as_tensor(kernel)
    kh, kw = _ksize(kernel.shape)
    offset = default_offset((kh, kw), dilation) if pad_offset is None else tuple(pad_offset)
    from .tensor import flip, reshape, transpose  # local import avoids cycle at module load

    cout, cin_g, _, _ = kernel.shape
    wg = reshape(kernel, (groups, cout // groups, cin_g, kh, kw))
    adj = reshape(transpose(wg, (0, 2, 1, 3, 4)), (groups * cin_g, cout // groups, kh, kw))
    adj = flip(adj, (-2, -1))
    return conv2d(x, adj, dilation=dilation, groups=groups,
                  pad_offset=complement_offset((kh, kw), dilation, offset))
