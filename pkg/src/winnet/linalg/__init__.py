"""Minimal differentiable numeric core: tensors, convolution, spectra, FFT, Adam."""

from .tensor import (
    ShapeError,
    Tensor,
    add,
    as_tensor,
    backward,
    concat,
    div,
    flip,
    frobenius_sq,
    grad_enabled,
    grad_wrt,
    inverse,
    matmul,
    mul,
    narrow,
    no_grad,
    pad2d,
    relu,
    reshape,
    sigmoid,
    soft_threshold,
    softplus,
    sqrt,
    sub,
    tmean,
    transpose,
    tsum,
)
from .conv import (
    adjoint_kernel,
    complement_offset,
    conv2d,
    conv2d_adjoint,
    default_offset,
)
from .spectral import LinearOperator, spectral_norm, sym_eig_min
from .fourier import fft2, ifft2
from .optim import AdamState, adam_init, adam_step, zero_grads

__all__ = [
    "ShapeError", "Tensor", "add", "as_tensor", "backward", "concat", "div",
    "flip", "frobenius_sq", "grad_enabled", "grad_wrt", "inverse", "matmul",
    "mul", "narrow", "no_grad", "pad2d", "relu", "reshape", "sigmoid",
    "soft_threshold", "softplus", "sqrt", "sub", "tmean", "transpose", "tsum",
    "adjoint_kernel", "complement_offset", "conv2d", "conv2d_adjoint",
    "default_offset", "LinearOperator", "spectral_norm", "sym_eig_min",
    "fft2", "ifft2", "AdamState", "adam_init", "adam_step", "zero_grads",
]
