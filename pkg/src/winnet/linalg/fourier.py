"""2-D discrete Fourier transforms for the closed-form deconvolution step.

Thin wrappers over numpy's FFT: any rectangular extent is supported (no
power-of-two restriction) and transforms run in double precision.  These
operate on plain arrays and are not part of the autodiff graph; they are
only used inside the deblurring solver.
"""

from __future__ import annotations

import numpy as np


def fft2(x: np.ndarray) -> np.ndarray:
    """Forward 2-D DFT of the trailing two axes, in complex128."""
    return np.fft.fft2(np.asarray(x).astype(np.complex128, copy=False))


def ifft2(x: np.ndarray) -> np.ndarray:
    """Inverse 2-D DFT; ifft2(fft2(x)) recovers x to ~1e-15 relative."""
    return np.fft.ifft2(np.asarray(x).astype(np.complex128, copy=False))
