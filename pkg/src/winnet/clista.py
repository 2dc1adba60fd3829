"""Sparsity-driven denoising of detail channels.

A small unrolled shrinkage network with tied convolutional analysis and
synthesis dictionaries shared across layers, plus a plain iterative
shrinkage solver used as an equivalence oracle, and the dictionary
orthogonality residual used as a training penalty.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import List, Tuple, Union

import numpy as np

from .linalg import (
    Tensor, as_tensor, conv2d, conv2d_adjoint, flip, frobenius_sq, mul,
    narrow, pad2d, reshape, soft_threshold, softplus, sub, transpose,
)

ScaleLike = Union[float, np.ndarray, Tensor]


@dataclass
class ClistaParams:
    analysis: Tensor     # (N, c-h, r, r)
    synthesis: Tensor    # (c-h, N, r, r)
    thresholds: Tensor   # (T, N) raw parameters, mapped through softplus

    @property
    def layers(self) -> int:
        return self.thresholds.shape[0]

    @property
    def atoms(self) -> int:
        return self.analysis.shape[0]

    def parameters(self) -> List[Tensor]:
        return [self.analysis, self.synthesis, self.thresholds]


def _layer_lambda(params: ClistaParams, t: int, scale: ScaleLike) -> Tensor:
    lam = reshape(softplus(narrow(params.thresholds, 0, t, 1)), (params.atoms, 1, 1))
    if isinstance(scale, (Tensor, np.ndarray)):
        return mul(lam, as_tensor(scale))
    if scale < 0:
        raise ValueError(f"threshold_scale must be >= 0, got {scale}")
    return mul(lam, float(scale))


def clista_denoise(d: Union[Tensor, np.ndarray], params: ClistaParams,
                   threshold_scale: ScaleLike = 1.0) -> Tensor:
    """Unrolled shrinkage on detail channels; returns same-shaped tensor.

    Codes start at analysis(d); each layer adds the analysis of the
    synthesis residual and shrinks with that layer's (scaled) thresholds;
    the last code is mapped back through the synthesis dictionary.
    """
    d = as_tensor(d)
    g = conv2d(d, params.analysis)
    for t in range(params.layers):
        resid = sub(d, conv2d(g, params.synthesis))
        g = soft_threshold(g + conv2d(resid, params.analysis),
                           _layer_lambda(params, t, threshold_scale))
    return conv2d(g, params.synthesis)


def ista_oracle(d: np.ndarray, synthesis: np.ndarray, lam: float, mu: float,
                iters: int, init: str = "analysis") -> Tuple[np.ndarray, List[float]]:
    """Reference iterative shrinkage solver for the synthesis sparse-coding
    objective 0.5*||d - S(g)||^2 + lam*||g||_1.

    ``mu`` must dominate the squared operator norm of the synthesis map for
    the objective trace to be non-increasing.  Uses the exact adjoint of the
    synthesis convolution as the analysis step.  ``init`` selects the
    starting code: "analysis" ((1/mu) S^T d, mirroring the unrolled
    network) or "zero".
    """
    if mu <= 0:
        raise ValueError(f"step parameter mu must be positive, got {mu}")
    if iters < 1:
        raise ValueError(f"iters must be >= 1, got {iters}")
    if init not in ("analysis", "zero"):
        raise ValueError(f"unknown init {init!r}")
    d64 = np.asarray(d, dtype=np.float64)
    syn = Tensor(np.asarray(synthesis, dtype=np.float64))
    n_atoms = synthesis.shape[1]
    if init == "analysis":
        g = conv2d_adjoint(Tensor(d64), syn).data / mu
    else:
        g = np.zeros((n_atoms,) + d64.shape[1:])
    trace = []

    def objective(gv):
        r = d64 - conv2d(Tensor(gv), syn).data
        return 0.5 * float((r * r).sum()) + lam * float(np.abs(gv).sum())

    trace.append(objective(g))
    thr = lam / mu
    for _ in range(iters):
        resid = d64 - conv2d(Tensor(g), syn).data
        step = conv2d_adjoint(Tensor(resid), syn).data
        z = g + step / mu
        g = np.sign(z) * np.maximum(np.abs(z) - thr, 0.0)
        trace.append(objective(g))
    return g, trace


def dictionary_gram(synthesis: Union[Tensor, np.ndarray],
                    analysis: Union[Tensor, np.ndarray]) -> Tensor:
    """Full spatial composition synthesis∘analysis as explicit kernels.

    Output shape (c-h, c-h, 2r-1, 2r-1): entry (i, j) is the kernel of the
    map from input channel j to output channel i when analysis is applied
    and then synthesis.  Identity composition equals the Kronecker delta
    stack with ones at the spatial center.
    """
    synthesis = as_tensor(synthesis)
    analysis = as_tensor(analysis)
    cd, n_atoms, r, _ = synthesis.shape
    if analysis.shape[0] != n_atoms or analysis.shape[1] != cd or analysis.shape[2] != r:
        raise ValueError(
            f"incompatible dictionary shapes {synthesis.shape} / {analysis.shape}")
    # Treat analysis kernels as images indexed (j: batch, m: channel); a full
    # correlation with the flipped synthesis kernels is the composition map.
    imgs = transpose(analysis, (1, 0, 2, 3))       # (j=cd, m=N, r, r)
    pad = r - 1
    imgs = pad2d(imgs, (pad // 2 + (pad % 2), pad // 2, pad // 2 + (pad % 2), pad // 2))
    kernels = flip(synthesis, (-2, -1))            # (i=cd, m=N, r, r)
    out = conv2d(imgs, kernels)                    # (j, i, 2r-1, 2r-1)
    return transpose(out, (1, 0, 2, 3))


def identity_gram(channels: int, r: int, dtype=np.float64) -> np.ndarray:
    """The Kronecker-delta target of :func:`dictionary_gram`."""
    delta = np.zeros((channels, channels, 2 * r - 1, 2 * r - 1), dtype=dtype)
    for i in range(channels):
        delta[i, i, r - 1, r - 1] = 1.0
    return delta


def orthogonal_residual(synthesis: Union[Tensor, np.ndarray],
                        analysis: Union[Tensor, np.ndarray]) -> Tensor:
    """Composition minus identity; its squared Frobenius norm is the penalty."""
    synthesis = as_tensor(synthesis)
    gram = dictionary_gram(synthesis, analysis)
    r = synthesis.shape[2]
    delta = identity_gram(synthesis.shape[0], r, dtype=synthesis.dtype)
    return sub(gram, Tensor(delta))


def orthogonal_loss(synthesis, analysis) -> Tensor:
    return frobenius_sq(orthogonal_residual(synthesis, analysis))
