"""Spectral-norm estimation and smallest-eigenpair extraction.

Power iteration runs on the normal operator A^T A.  When the operator
exposes an analytic adjoint that is used directly; otherwise the adjoint
is evaluated as a vector-Jacobian product through the autodiff graph.
The returned estimate is differentiable through the final application
of the operator (a Rayleigh-quotient evaluation at the converged vector).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .tensor import (
    Tensor, _make, as_tensor, grad_wrt, mul, no_grad, set_grad_enabled, sqrt, tsum,
)

# sym_eig_min factorizes densely; covariances here are at most s^2 x s^2.
MAX_EIG_DIM = 1024


@dataclass
class LinearOperator:
    """A linear, homogeneous map between fixed-shape tensors."""

    apply: Callable[[Tensor], Tensor]
    input_shape: tuple
    output_shape: tuple
    apply_adjoint: Optional[Callable[[Tensor], Tensor]] = None
    dtype: type = np.float64


def _norm(a: np.ndarray) -> float:
    return float(np.sqrt(np.sum(a.astype(np.float64) ** 2)))


def _adjoint_vec(op: LinearOperator, v: np.ndarray) -> np.ndarray:
    if op.apply_adjoint is not None:
        with no_grad():
            return op.apply_adjoint(Tensor(v)).data
    # VJP fallback: grad_u <A u, v> = A^T v.  Gradients must be on even when
    # the caller iterates under no_grad; grad_wrt leaves .grad buffers alone.
    with set_grad_enabled(True):
        u = Tensor(np.zeros(op.input_shape, dtype=v.dtype), requires_grad=True)
        s = tsum(mul(op.apply(u), Tensor(v)))
        (g,) = grad_wrt(s, [u])
    return np.zeros(op.input_shape, dtype=v.dtype) if g is None else g


def spectral_norm(op: LinearOperator, iters: int = 50, seed: int = 0,
                  warm_start: Optional[np.ndarray] = None,
                  vector_sink: Optional[list] = None) -> Tensor:
    """Largest-singular-value estimate of ``op`` by power iteration.

    Deterministic for a given seed; monotone non-decreasing in ``iters``.
    ``warm_start`` (a previous iterate) lets trainers persist the vector
    across steps; passing a list as ``vector_sink`` stores the converged
    iterate in slot 0.  Returns a scalar tensor whose gradient flows into
    any parameters captured by ``op.apply``.
    """
    if iters < 1:
        raise ValueError(f"iters must be >= 1, got {iters}")
    if warm_start is not None:
        u = np.asarray(warm_start, dtype=op.dtype).reshape(op.input_shape).copy()
    else:
        rng = np.random.Generator(np.random.Philox(key=[seed, 0x5EC7]))
        u = rng.standard_normal(op.input_shape).astype(op.dtype)
    nu = _norm(u)
    if nu == 0.0:
        u.flat[0] = 1.0
        nu = 1.0
    u /= nu

    prev = -np.inf
    stall = 0
    with no_grad():
        for _ in range(iters):
            v = op.apply(Tensor(u)).data
            nv = _norm(v)
            if nv == 0.0:
                return Tensor(np.zeros((), dtype=op.dtype))
            w = _adjoint_vec(op, (v / nv).astype(op.dtype))
            nw = _norm(w)
            if nw == 0.0:
                return Tensor(np.zeros((), dtype=op.dtype))
            u = (w / nw).astype(op.dtype)
            # The Rayleigh estimate ||A u|| is monotone, so a long stall
            # means convergence; bail out early on easy spectra.
            if nv - prev <= 1e-15 * max(nv, 1.0):
                stall += 1
                if stall >= 32:
                    break
            else:
                stall = 0
            prev = nv

    if vector_sink is not None:
        vector_sink[:] = [u]
    out = op.apply(Tensor(u))
    return sqrt(tsum(mul(out, out)))


def sym_eig_min(A, jitter: float = 0.0):
    """Smallest eigenvalue and unit eigenvector of a symmetric matrix.

    Returns ``(value, vector)`` where ``value`` is a scalar tensor with
    gradient ``v v^T`` (valid away from eigenvalue degeneracy) and
    ``vector`` is a constant tensor.  ``jitter`` adds ``jitter * I``
    before factorizing (used during training to sidestep degeneracy).
    """
    A = as_tensor(A)
    if A.ndim != 2 or A.shape[0] != A.shape[1]:
        raise ValueError(f"expected a square matrix, got shape {A.shape}")
    n = A.shape[0]
    if n > MAX_EIG_DIM:
        raise ValueError(f"matrix dimension {n} exceeds supported bound {MAX_EIG_DIM}")
    ad = A.data.astype(np.float64)
    scale = max(1.0, float(np.abs(ad).max()))
    tol = 1e-8 if A.dtype == np.float64 else 1e-8 + 16 * np.finfo(A.dtype).eps * scale
    if float(np.abs(ad - ad.T).max()) > tol:
        raise ValueError("matrix is not symmetric within tolerance")
    sym = 0.5 * (ad + ad.T)
    if jitter:
        sym = sym + jitter * np.eye(n)
    evals, evecs = np.linalg.eigh(sym)
    v = evecs[:, 0]
    value = np.asarray(evals[0], dtype=A.dtype)

    def bwd(g):
        return (g * np.outer(v, v).astype(A.dtype),)

    return _make(value, (A,), bwd), Tensor(v.astype(A.dtype))
