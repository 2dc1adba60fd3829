"""Learnable lifting-scheme image denoising with invertible transforms.

Subpackages/modules:
  linalg   -- differentiable tensors, convolution, spectra, FFT, Adam
  lifting  -- redundant split/merge frames and invertible predict/update scales
  clista   -- convolutional sparse-coding denoiser and its ISTA reference
  nenet    -- patch-covariance noise-level estimation
  model    -- multi-scale assembly, threshold policy, serialization
  data     -- image I/O, noise synthesis, patch datasets, PSNR
  train    -- losses and end-to-end training loops
  deblur   -- plug-and-play deblurring via half-quadratic splitting
  cli      -- command-line entry points
"""

__version__ = "0.1.0"
