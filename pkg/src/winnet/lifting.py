"""One invertible transform scale: redundant frame splitting and merging plus
learnable predict/update networks arranged as lifting steps.

The split operator analyzes a 1-channel image into ``c`` feature channels
with a stride-1 orthonormal filter bank (``c >= p**2`` filters of support
``p x p``); the first ``h`` channels are the coarse part, the rest the
detail part.  Merging applies the transposed, spatially flipped bank and
an exact per-pixel boundary renormalization, making it the left inverse
of the split for every input (zero padding makes the analysis Gram matrix
diagonal, equal to the local tap-count map).

Predict/update networks (PUNets) may be arbitrary; the lifting structure
guarantees that forward followed by inverse is the identity regardless of
their weights.
"""

from __future__ import annotations

import functools
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Union

import numpy as np

from .linalg import (
    LinearOperator, Tensor, as_tensor, complement_offset, concat, conv2d,
    conv2d_adjoint, default_offset, flip, inverse, matmul, mul, narrow,
    reshape, soft_threshold, softplus, spectral_norm, sub, transpose,
)

ScaleLike = Union[float, np.ndarray, Tensor]


@dataclass
class CoarseDetail:
    """A coarse/detail channel pair produced by one transform scale."""
    coarse: Tensor
    detail: Tensor


@dataclass
class FrameKernels:
    split_kernel: Tensor   # (c, 1, p, p)
    merge_kernel: Tensor   # (1, c, p, p)
    p: int
    c: int
    h: int
    source: str            # "dct" or "cayley"
    theta: Optional[Tensor] = None  # Cayley parameter, when learned

    @property
    def detail_channels(self) -> int:
        return self.c - self.h


def dct_matrix(p: int) -> np.ndarray:
    """Orthonormal 2-D DCT-II basis as rows of a (p^2, p^2) matrix."""
    T1 = np.zeros((p, p))
    for k in range(p):
        ck = np.sqrt(1.0 / p) if k == 0 else np.sqrt(2.0 / p)
        for n in range(p):
            T1[k, n] = ck * np.cos(np.pi * (2 * n + 1) * k / (2 * p))
    return np.einsum("ka,lb->klab", T1, T1).reshape(p * p, p * p)


def _frame_from_rows(F: Tensor, p: int, c: int, h: int, source: str,
                     theta: Optional[Tensor] = None) -> FrameKernels:
    split_k = reshape(F, (c, 1, p, p))
    merge_k = mul(reshape(flip(split_k, (-2, -1)), (1, c, p, p)), 1.0 / (p * p))
    return FrameKernels(split_kernel=split_k, merge_kernel=merge_k,
                        p=p, c=c, h=h, source=source, theta=theta)


def dct_frame(p: int, c: Optional[int] = None, h: int = 1,
              dtype=np.float32) -> FrameKernels:
    """Frame whose analysis filters are the 2-D DCT-II basis (requires c == p^2)."""
    if c is None:
        c = p * p
    if c != p * p:
        raise ValueError(f"DCT frame requires c == p^2, got c={c}, p={p}")
    if not 1 <= h < c:
        raise ValueError(f"coarse channel count h={h} out of range for c={c}")
    F = Tensor(dct_matrix(p).astype(dtype))
    return _frame_from_rows(F, p, c, h, "dct")


def cayley_frame(theta: Union[Tensor, np.ndarray], p: int, h: int = 1) -> FrameKernels:
    """Frame from the Cayley map of theta - theta^T.

    K = (I - A)(I + A)^(-1) with A skew-symmetric is orthogonal, and
    I + A is always invertible (its eigenvalues are 1 + i*imag), so the
    construction never degenerates.  The analysis rows are the first p^2
    columns of K; the whole frame is differentiable in theta.
    """
    theta = as_tensor(theta)
    if theta.ndim != 2 or theta.shape[0] != theta.shape[1]:
        raise ValueError(f"theta must be square, got shape {theta.shape}")
    c = theta.shape[0]
    if c < p * p:
        raise ValueError(f"Cayley frame needs c >= p^2, got c={c}, p={p}")
    if not 1 <= h < c:
        raise ValueError(f"coarse channel count h={h} out of range for c={c}")
    K = cayley_matrix(theta)
    F = narrow(K, 1, 0, p * p)  # (c, p^2): row i is filter i
    return _frame_from_rows(F, p, c, h, "cayley", theta=theta)


def cayley_matrix(theta: Union[Tensor, np.ndarray]) -> Tensor:
    """The full orthogonal matrix of the Cayley map (exposed for tests)."""
    theta = as_tensor(theta)
    c = theta.shape[0]
    eye = Tensor(np.eye(c, dtype=theta.dtype))
    A = sub(theta, transpose(theta))
    return matmul(sub(eye, A), inverse(A + eye))


@functools.lru_cache(maxsize=64)
def _count_map(H: int, W: int, p: int, oy: int, ox: int) -> np.ndarray:
    """Per-pixel number of merge taps that land inside the stored maps."""
    def axis_count(N, a):
        n = np.arange(N)
        lo = np.maximum(n - a, 0)
        hi = np.minimum(n - a + p - 1, N - 1)
        return (hi - lo + 1).astype(np.float64)
    return np.outer(axis_count(H, oy), axis_count(W, ox))


def split(y: Union[Tensor, np.ndarray], frame: FrameKernels) -> CoarseDetail:
    """Analyze a (1, H, W) or (N, 1, H, W) image into coarse/detail parts."""
    y = as_tensor(y)
    H, W = y.shape[-2], y.shape[-1]
    if H < frame.p or W < frame.p:
        raise ValueError(f"image {H}x{W} smaller than filter support {frame.p}")
    f = conv2d(y, frame.split_kernel, pad_offset=default_offset(frame.p))
    ax = y.ndim - 3
    coarse = narrow(f, ax, 0, frame.h)
    detail = narrow(f, ax, frame.h, frame.c - frame.h)
    return CoarseDetail(coarse, detail)


def merge(cd: CoarseDetail, frame: FrameKernels) -> Tensor:
    """Exact left inverse of :func:`split`; accepts modified coefficients."""
    ax = cd.coarse.ndim - 3
    if cd.coarse.shape[ax] != frame.h or cd.detail.shape[ax] != frame.c - frame.h:
        raise ValueError(
            f"channel counts ({cd.coarse.shape[ax]}, {cd.detail.shape[ax]}) "
            f"do not match frame (h={frame.h}, c-h={frame.c - frame.h})")
    f = concat([cd.coarse, cd.detail], axis=ax)
    off = complement_offset(frame.p, 1, default_offset(frame.p))
    out = conv2d(f, frame.merge_kernel, pad_offset=off)
    H, W = out.shape[-2], out.shape[-1]
    counts = _count_map(H, W, frame.p, off[0], off[1])
    norm = ((frame.p * frame.p) / counts).astype(out.dtype)
    return mul(out, Tensor(norm))


# ---------------------------------------------------------------------------
# Predict/update networks

@dataclass
class ResidualBlock:
    """SepConv branch (depthwise, pointwise, shrink, depthwise, pointwise) + skip."""
    depthwise1: Tensor
    pointwise1: Tensor
    thresholds: Tensor
    depthwise2: Tensor
    pointwise2: Tensor


@dataclass
class PUNetParams:
    input_conv: Tensor          # (width, in_ch, 3, 3)
    input_thresholds: Tensor    # (width,) raw, mapped through softplus
    blocks: List[ResidualBlock]
    output_conv: Tensor         # (out_ch, width, 3, 3)
    dilation: int = 1
    channels: int = 32
    q: int = 5

    def parameters(self) -> List[Tensor]:
        out = [self.input_conv, self.input_thresholds]
        for b in self.blocks:
            out += [b.depthwise1, b.pointwise1, b.thresholds, b.depthwise2, b.pointwise2]
        out.append(self.output_conv)
        return out


def _effective_lambda(raw: Tensor, scale: ScaleLike) -> Tensor:
    lam = reshape(softplus(raw), (raw.shape[0], 1, 1))
    if isinstance(scale, Tensor) or isinstance(scale, np.ndarray):
        return mul(lam, as_tensor(scale))
    if scale < 0:
        raise ValueError(f"threshold_scale must be >= 0, got {scale}")
    return mul(lam, float(scale))


def _branch(block: ResidualBlock, x: Tensor, dilation: int, scale: Optional[ScaleLike]) -> Tensor:
    width = block.depthwise1.shape[0]
    t = conv2d(x, block.depthwise1, dilation=dilation, groups=width)
    t = conv2d(t, block.pointwise1)
    if scale is not None:
        t = soft_threshold(t, _effective_lambda(block.thresholds, scale))
    t = conv2d(t, block.depthwise2, dilation=dilation, groups=width)
    return conv2d(t, block.pointwise2)


def punet_apply(params: PUNetParams, x: Union[Tensor, np.ndarray],
                threshold_scale: ScaleLike = 1.0) -> Tensor:
    """Input conv and shrink, J residual blocks, output conv.  Bias-free."""
    x = as_tensor(x)
    d = params.dilation
    t = conv2d(x, params.input_conv, dilation=d)
    t = soft_threshold(t, _effective_lambda(params.input_thresholds, threshold_scale))
    for block in params.blocks:
        t = t + _branch(block, t, d, threshold_scale)
    return conv2d(t, params.output_conv, dilation=d)


def block_operator(block: ResidualBlock, plane_size, dilation: int = 1) -> LinearOperator:
    """The block's convolutional branch with thresholds zeroed, as a linear map."""
    width = block.depthwise1.shape[0]
    H, W = plane_size
    shape = (width, H, W)

    def apply(u: Tensor) -> Tensor:
        return _branch(block, u, dilation, None)

    def apply_adjoint(v: Tensor) -> Tensor:
        t = conv2d_adjoint(v, block.pointwise2)
        t = conv2d_adjoint(t, block.depthwise2, dilation=dilation, groups=width)
        t = conv2d_adjoint(t, block.pointwise1)
        return conv2d_adjoint(t, block.depthwise1, dilation=dilation, groups=width)

    return LinearOperator(apply=apply, input_shape=shape, output_shape=shape,
                          apply_adjoint=apply_adjoint,
                          dtype=block.depthwise1.dtype.type)


def block_spectral_norm(block: ResidualBlock, plane_size, dilation: int = 1,
                        iters: int = 50, seed: int = 0,
                        warm_start=None, vector_sink=None) -> Tensor:
    """Spectral norm of the block branch on a plane of the given size."""
    op = block_operator(block, plane_size, dilation)
    return spectral_norm(op, iters=iters, seed=seed, warm_start=warm_start,
                         vector_sink=vector_sink)


# ---------------------------------------------------------------------------
# Lifting steps

@dataclass
class LinnParams:
    """All parameters of one transform scale."""
    frame: FrameKernels
    predict: List[PUNetParams]   # coarse -> detail-shaped corrections
    update: List[PUNetParams]    # detail -> coarse-shaped corrections
    scale_index: int = 1

    def __post_init__(self):
        if len(self.predict) != len(self.update):
            raise ValueError("predict/update network counts must match")

    @property
    def steps(self) -> int:
        return len(self.predict)

    def parameters(self) -> List[Tensor]:
        out = []
        if self.frame.source == "cayley" and self.frame.theta is not None:
            out.append(self.frame.theta)
        for net in list(self.predict) + list(self.update):
            out += net.parameters()
        return out


def linn_forward(cd: CoarseDetail, params: LinnParams,
                 threshold_scale: ScaleLike = 1.0) -> CoarseDetail:
    c, d = cd.coarse, cd.detail
    for P, U in zip(params.predict, params.update):
        d = sub(d, punet_apply(P, c, threshold_scale))
        c = c + punet_apply(U, d, threshold_scale)
    return CoarseDetail(c, d)


def linn_inverse(cd: CoarseDetail, params: LinnParams,
                 threshold_scale: ScaleLike = 1.0) -> CoarseDetail:
    c, d = cd.coarse, cd.detail
    for P, U in zip(reversed(params.predict), reversed(params.update)):
        c = sub(c, punet_apply(U, d, threshold_scale))
        d = d + punet_apply(P, c, threshold_scale)
    return CoarseDetail(c, d)
