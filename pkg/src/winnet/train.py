"""Losses, initialization, and the end-to-end training loops.

All randomness (weight init, shuffling, noise draws) is derived from
counter-based generators keyed by (seed, purpose), so identical configs
reproduce identical parameters bit for bit.
"""

from __future__ import annotations

import os
import zlib
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .clista import orthogonal_loss
from .data import PatchDataset, psnr
from .lifting import block_spectral_norm
from .linalg import (
    Tensor, adam_init, adam_step, backward, frobenius_sq, mul, no_grad, sub,
    tsum, zero_grads,
)
from .model import (
    ModelConfig, WinnetModel, build_model, denoise, denoise_with_scales,
    inverse_softplus, save_model, threshold_scale_policy,
)
from .nenet import SenetParams, estimate_sigma, extract_patches, senet_weights


class TrainingDivergedError(RuntimeError):
    """Loss became non-finite; training aborted."""


@dataclass
class TrainConfig:
    sigma: float = 25.0            # single training noise level (non-blind)
    blind: bool = False
    sigma_low: float = 0.0         # blind-mode noise range
    sigma_high: float = 55.0
    epochs: int = 50
    batch: int = 32
    lr: float = 1e-3
    lr_decay_epoch: int = 30       # learning rate drops at this epoch
    lr_decayed: float = 1e-4
    lambda1: float = 0.1           # spectral-norm penalty weight
    lambda2: float = 10.0          # dictionary-orthogonality penalty weight
    spectral_every: int = 10       # evaluate the spectral penalty each N iterations
    spectral_iters: int = 5        # warm-started power iterations during training
    spectral_plane: Tuple[int, int] = (16, 16)
    seed: int = 0
    threshold_init: float = 0.03   # initial softplus(raw) as a fraction of sigma_ref
    nenet_stride: int = 2          # patch stride while training the noise estimator

    def __post_init__(self):
        for name in ("epochs", "batch", "spectral_every", "spectral_iters"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.lr <= 0 or self.lr_decayed <= 0:
            raise ValueError("learning rates must be positive")
        if self.lambda1 < 0 or self.lambda2 < 0:
            raise ValueError("penalty weights must be >= 0")
        if self.blind and self.sigma_high <= self.sigma_low:
            raise ValueError("blind sigma range is empty")


def _rng(seed: int, tag: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(
        key=[seed & 0xFFFFFFFFFFFFFFFF, tag & 0xFFFFFFFFFFFFFFFF]))


def _name_tag(name: str) -> int:
    return zlib.crc32(name.encode())


def kaiming_uniform(rng: np.random.Generator, shape, a: float = np.sqrt(5.0)) -> np.ndarray:
    """Kaiming-uniform fan-in init (the usual framework default for convs).

    With a = sqrt(5) the per-layer gain stays at or below one, so deep
    predict/update stacks start near the identity map instead of blowing
    up through the residual chain.
    """
    fan_in = int(np.prod(shape[1:])) if len(shape) > 1 else int(shape[0])
    bound = np.sqrt(6.0 / ((1.0 + a * a) * max(fan_in, 1)))
    return rng.uniform(-bound, bound, size=shape).astype(np.float32)


def init_model(config: ModelConfig, seed: int = 0,
               threshold_init: float = 0.03) -> WinnetModel:
    """Kaiming-initialized model; thresholds start small but positive and the
    Cayley parameter (when used) starts at the identity frame."""
    raw_thresh = inverse_softplus(max(config.sigma_ref * threshold_init, 1e-4))

    def initializer(name: str, shape):
        if name.endswith("thresholds"):
            return np.full(shape, raw_thresh, dtype=np.float32)
        if name.endswith("theta"):
            return np.zeros(shape, dtype=np.float32)
        return kaiming_uniform(_rng(seed, _name_tag(name)), shape)

    return build_model(config, initializer=initializer)


# ---------------------------------------------------------------------------
# Losses

def _batch_count(x: Tensor) -> int:
    return x.shape[0] if x.ndim == 4 else 1


def loss_reconstruction(xhat, x) -> Tensor:
    """Half mean-per-sample squared error: (1/2N) sum_i ||x_i - xhat_i||^2."""
    if xhat.shape != x.shape:
        raise ValueError(f"shape mismatch: {xhat.shape} vs {x.shape}")
    n = _batch_count(xhat)
    return mul(frobenius_sq(sub(xhat, x)), 0.5 / n)


def loss_noise(sigma_true, sigma_hat) -> Tensor:
    """(1/2N) sum_i (sigma_i - sigma_hat_i)^2 over batch vectors."""
    if sigma_true.shape != sigma_hat.shape:
        raise ValueError(f"length mismatch: {sigma_true.shape} vs {sigma_hat.shape}")
    n = int(np.prod(sigma_true.shape)) or 1
    return mul(frobenius_sq(sub(sigma_hat, sigma_true)), 0.5 / n)


def loss_orthogonal(model: WinnetModel) -> Tensor:
    """Sum of dictionary-composition residuals over all scales."""
    total = None
    for pair in model.scales:
        term = orthogonal_loss(pair.lista.synthesis, pair.lista.analysis)
        total = term if total is None else total + term
    return total


def loss_spectral(model: WinnetModel, plane: Tuple[int, int] = (16, 16),
                  iters: int = 50, seed: int = 0,
                  warm: Optional[Dict[tuple, list]] = None) -> Tensor:
    """Mean over scales, lifting steps, and blocks of the predict-branch plus
    update-branch spectral norms (thresholds at zero)."""
    terms = []
    for k, pair in enumerate(model.scales, start=1):
        dilation = 2 ** (k - 1)
        for role, nets in (("predict", pair.linn.predict), ("update", pair.linn.update)):
            for m, net in enumerate(nets, start=1):
                for j, block in enumerate(net.blocks, start=1):
                    key = (k, role, m, j)
                    sink = None
                    start = None
                    if warm is not None:
                        sink = warm.setdefault(key, [])
                        start = sink[0] if sink else None
                    terms.append(block_spectral_norm(
                        block, plane, dilation=dilation, iters=iters,
                        seed=seed + _name_tag(f"{key}") % 65536,
                        warm_start=start, vector_sink=sink))
    total = terms[0]
    for t in terms[1:]:
        total = total + t
    # one index = a (predict, update) block pair; terms holds both halves
    return mul(total, 2.0 / len(terms))


# ---------------------------------------------------------------------------
# Training loops

def _per_sample_scales(sigmas: np.ndarray, sigma_ref: float, rule: str):
    ratio = (sigmas / sigma_ref).astype(np.float32).reshape(-1, 1, 1, 1)
    if rule == "symmetric":
        return ratio, ratio
    pu = np.maximum(ratio, 1.0)
    return pu, ratio


def train_winnet(config: TrainConfig, dataset: PatchDataset,
                 model_config: Optional[ModelConfig] = None,
                 val_images: Optional[Sequence[np.ndarray]] = None,
                 checkpoint_dir: Optional[str] = None):
    """Minimize reconstruction + spectral + orthogonality losses with Adam.

    Returns (model, log_lines).  The spectral penalty is evaluated (and its
    gradient applied) once every ``spectral_every`` iterations with
    warm-started power iterations; the last value is reported in between.
    Deterministic for a fixed config and dataset.
    """
    if len(dataset) == 0:
        raise ValueError("dataset is empty")
    if model_config is None:
        sigma_ref = 25.0 if config.blind else config.sigma
        model_config = ModelConfig(blind=config.blind, sigma_ref=sigma_ref)
    model = init_model(model_config, config.seed, config.threshold_init)
    trainable = [t for name, t in model.named_parameters() if not name.startswith("nenet.")]
    state = adam_init(trainable, lr=config.lr)
    warm: Dict[tuple, list] = {}
    log: List[str] = []
    patches = dataset.patches
    n = len(dataset)
    batch = min(config.batch, n)
    step = 0
    held_spectral = 0.0
    for epoch in range(1, config.epochs + 1):
        state.lr = config.lr_decayed if epoch >= config.lr_decay_epoch else config.lr
        order = _rng(config.seed, 0xE0 + epoch).permutation(n)
        epoch_loss = 0.0
        batches = 0
        for lo in range(0, n - batch + 1, batch):
            idx = order[lo:lo + batch]
            clean = patches[idx]
            b = clean.shape[0]
            noise_rng = _rng(config.seed, 0xA000 + step)
            if config.blind:
                sigmas = noise_rng.uniform(config.sigma_low, config.sigma_high, size=b)
            else:
                sigmas = np.full(b, config.sigma)
            noise = noise_rng.standard_normal(clean.shape)
            noisy = (clean + sigmas.reshape(-1, 1, 1, 1) * noise).astype(np.float32)
            if config.blind:
                pu, cl = _per_sample_scales(sigmas, model_config.sigma_ref,
                                            model_config.blind_rescale)
            else:
                pu, cl = 1.0, 1.0

            xhat = denoise_with_scales(Tensor(noisy), model, pu, cl)
            l_r = loss_reconstruction(xhat, Tensor(clean))
            l_o = loss_orthogonal(model)
            total = l_r + mul(l_o, config.lambda2)
            if step % config.spectral_every == 0:
                l_s = loss_spectral(model, plane=config.spectral_plane,
                                    iters=config.spectral_iters,
                                    seed=config.seed, warm=warm)
                held_spectral = float(l_s.data)
                total = total + mul(l_s, config.lambda1)
            value = float(total.data)
            if not np.isfinite(value):
                raise TrainingDivergedError(f"non-finite loss at step {step}: {value}")
            zero_grads(trainable)
            backward(total)
            adam_step(trainable, None, state)
            epoch_loss += float(l_r.data)
            batches += 1
            step += 1
        val_psnr = ""
        if val_images is not None:
            val_psnr = f"{_validation_psnr(model, val_images, config):.4f}"
        log.append(f"epoch={epoch}\titer={step}\tloss_r={epoch_loss / max(batches, 1):.6f}"
                   f"\tloss_s={held_spectral:.6f}\tloss_o={float(loss_orthogonal(model).data):.6f}"
                   f"\tval_psnr={val_psnr}")
        if checkpoint_dir is not None:
            os.makedirs(checkpoint_dir, exist_ok=True)
            save_model(model, os.path.join(checkpoint_dir, f"epoch_{epoch:03d}.wnet"))
    return model, log


def _validation_psnr(model: WinnetModel, val_images, config: TrainConfig) -> float:
    sigma = 0.5 * (config.sigma_low + config.sigma_high) if config.blind else config.sigma
    scores = []
    with no_grad():
        for i, clean in enumerate(val_images):
            clean = np.asarray(clean, dtype=np.float32)
            if clean.ndim == 2:
                clean = clean[None]
            noise = _rng(config.seed, 0xEA70 + i).standard_normal(clean.shape)
            noisy = (clean + sigma * noise).astype(np.float32)
            out = denoise(Tensor(noisy), sigma, model)
            scores.append(psnr(out, clean))
    return float(np.mean(scores))


def train_nenet(config: TrainConfig, dataset: PatchDataset,
                model_config: Optional[ModelConfig] = None):
    """Train the patch-selection network against the MSE noise loss.

    Per-sample noise levels are drawn uniformly from the blind range.
    Returns (SenetParams, log_lines); deterministic per seed.
    """
    if len(dataset) == 0:
        raise ValueError("dataset is empty")
    if model_config is None:
        model_config = ModelConfig()
    probe = init_model(model_config, seed=config.seed)
    senet = SenetParams(convs=probe.nenet.convs, head=probe.nenet.head)
    params = senet.parameters()
    state = adam_init(params, lr=config.lr)
    patches = dataset.patches
    n = len(dataset)
    batch = min(config.batch, n)
    log: List[str] = []
    step = 0
    for epoch in range(1, config.epochs + 1):
        order = _rng(config.seed, 0xBE0 + epoch).permutation(n)
        epoch_loss = 0.0
        batches = 0
        for lo in range(0, n - batch + 1, batch):
            idx = order[lo:lo + batch]
            clean = patches[idx]
            b = clean.shape[0]
            noise_rng = _rng(config.seed, 0xB000 + step)
            sigmas = noise_rng.uniform(config.sigma_low, config.sigma_high, size=b)
            noise = noise_rng.standard_normal(clean.shape)
            noisy = (clean + sigmas.reshape(-1, 1, 1, 1) * noise).astype(np.float32)
            total = None
            for i in range(b):
                P = extract_patches(noisy[i], s=model_config.patch,
                                    stride=config.nenet_stride)
                w = senet_weights(P, senet)
                sig_hat = estimate_sigma(P, w, jitter=1e-8)
                err = sub(sig_hat, float(sigmas[i]))
                term = mul(err * err, 0.5 / b)
                total = term if total is None else total + term
            value = float(total.data)
            if not np.isfinite(value):
                raise TrainingDivergedError(f"non-finite noise loss at step {step}")
            zero_grads(params)
            backward(total)
            adam_step(params, None, state)
            epoch_loss += value
            batches += 1
            step += 1
        log.append(f"epoch={epoch}\titer={step}\tloss_n={epoch_loss / max(batches, 1):.6f}")
    return senet, log


def parameter_hash(model: WinnetModel) -> str:
    import hashlib
    h = hashlib.sha256()
    for name, t in model.named_parameters():
        h.update(name.encode())
        h.update(np.ascontiguousarray(t.data, dtype="<f4").tobytes())
    return h.hexdigest()
