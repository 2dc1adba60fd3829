"""Multi-scale model assembly: denoising entry points, noise-adaptive
threshold policy, atom visualization, and serialization.

Noise levels are plain floats on the [0, 255] intensity scale throughout.
"""

from __future__ import annotations

import io
import json
import math
import struct
from dataclasses import asdict, dataclass, field, fields
from typing import List, Optional, Tuple, Union

import numpy as np

from .clista import ClistaParams, clista_denoise
from .lifting import (
    CoarseDetail, FrameKernels, LinnParams, PUNetParams, ResidualBlock,
    cayley_frame, dct_frame, linn_forward, linn_inverse, merge, split,
)
from .linalg import Tensor, as_tensor, no_grad
from .nenet import SenetParams, estimate_noise_level

MAGIC = b"WNET"
FORMAT_VERSION = 1


class ModelFormatError(ValueError):
    """Corrupt or incompatible model container."""


class ModelVersionError(ModelFormatError):
    """Container written by an unsupported format version."""


def validate_noise_level(sigma: float, name: str = "sigma") -> float:
    sigma = float(sigma)
    if not math.isfinite(sigma) or sigma < 0:
        raise ValueError(f"{name} must be finite and >= 0, got {sigma}")
    return sigma


@dataclass
class ModelConfig:
    """Architecture snapshot; fully determines every parameter shape."""
    K: int = 1
    p: int = 4
    c: int = 16
    h: int = 1
    M: int = 4
    J: int = 4
    width: int = 32
    q: int = 5
    lista_atoms: int = 64
    lista_kernel: int = 3
    lista_layers: int = 3
    frame: str = "dct"
    sigma_ref: float = 25.0
    blind: bool = False
    blind_rescale: str = "symmetric"  # or "asymmetric": PUNet scaling during blind training
    senet_blocks: int = 4
    senet_channels: int = 16
    senet_kernel: int = 3
    patch: int = 4
    patch_stride: int = 1

    def __post_init__(self):
        if self.frame not in ("dct", "cayley"):
            raise ValueError(f"unknown frame source {self.frame!r}")
        if self.frame == "dct" and self.c != self.p * self.p:
            raise ValueError("DCT frame requires c == p^2")
        if self.c < self.p * self.p:
            raise ValueError("frame needs c >= p^2")
        if not 1 <= self.h < self.c:
            raise ValueError("coarse channels h out of range")
        validate_noise_level(self.sigma_ref, "sigma_ref")
        if self.sigma_ref <= 0:
            raise ValueError("sigma_ref must be positive")

    @property
    def detail_channels(self) -> int:
        return self.c - self.h

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ModelFormatError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class ScalePair:
    linn: LinnParams
    lista: ClistaParams


@dataclass
class WinnetModel:
    config: ModelConfig
    scales: List[ScalePair]
    nenet: SenetParams

    @property
    def sigma_ref(self) -> float:
        return self.config.sigma_ref

    def named_parameters(self) -> List[Tuple[str, Tensor]]:
        out = []
        for k, pair in enumerate(self.scales, start=1):
            prefix = f"scale{k}"
            if pair.linn.frame.source == "cayley":
                out.append((f"{prefix}.frame.theta", pair.linn.frame.theta))
            for role, nets in (("predict", pair.linn.predict), ("update", pair.linn.update)):
                for m, net in enumerate(nets, start=1):
                    base = f"{prefix}.{role}{m}"
                    out.append((f"{base}.input_conv", net.input_conv))
                    out.append((f"{base}.input_thresholds", net.input_thresholds))
                    for j, b in enumerate(net.blocks, start=1):
                        bb = f"{base}.block{j}"
                        out.append((f"{bb}.depthwise1", b.depthwise1))
                        out.append((f"{bb}.pointwise1", b.pointwise1))
                        out.append((f"{bb}.thresholds", b.thresholds))
                        out.append((f"{bb}.depthwise2", b.depthwise2))
                        out.append((f"{bb}.pointwise2", b.pointwise2))
                    out.append((f"{base}.output_conv", net.output_conv))
            out.append((f"{prefix}.lista.analysis", pair.lista.analysis))
            out.append((f"{prefix}.lista.synthesis", pair.lista.synthesis))
            out.append((f"{prefix}.lista.thresholds", pair.lista.thresholds))
        for i, w in enumerate(self.nenet.convs, start=1):
            out.append((f"nenet.conv{i}", w))
        out.append(("nenet.head", self.nenet.head))
        return out

    def parameters(self) -> List[Tensor]:
        return [t for _, t in self.named_parameters()]

    def parameter_count(self) -> int:
        return int(sum(t.size for t in self.parameters()))


def _param_shapes(config: ModelConfig) -> List[Tuple[str, tuple]]:
    """Expected (name, shape) records, in serialization order."""
    c, h, w, q = config.c, config.h, config.width, config.q
    det = config.detail_channels
    out = []
    for k in range(1, config.K + 1):
        prefix = f"scale{k}"
        if config.frame == "cayley":
            out.append((f"{prefix}.frame.theta", (c, c)))
        for role, cin, cout in (("predict", h, det), ("update", det, h)):
            for m in range(1, config.M + 1):
                base = f"{prefix}.{role}{m}"
                out.append((f"{base}.input_conv", (w, cin, 3, 3)))
                out.append((f"{base}.input_thresholds", (w,)))
                for j in range(1, config.J + 1):
                    bb = f"{base}.block{j}"
                    out.append((f"{bb}.depthwise1", (w, 1, q, q)))
                    out.append((f"{bb}.pointwise1", (w, w, 1, 1)))
                    out.append((f"{bb}.thresholds", (w,)))
                    out.append((f"{bb}.depthwise2", (w, 1, q, q)))
                    out.append((f"{bb}.pointwise2", (w, w, 1, 1)))
                out.append((f"{base}.output_conv", (cout, w, 3, 3)))
        out.append((f"{prefix}.lista.analysis", (config.lista_atoms, det,
                                                 config.lista_kernel, config.lista_kernel)))
        out.append((f"{prefix}.lista.synthesis", (det, config.lista_atoms,
                                                  config.lista_kernel, config.lista_kernel)))
        out.append((f"{prefix}.lista.thresholds", (config.lista_layers, config.lista_atoms)))
    sk = config.senet_kernel
    chans = config.senet_channels
    for i in range(1, config.senet_blocks + 1):
        cin = 1 if i == 1 else chans
        out.append((f"nenet.conv{i}", (chans, cin, 1, sk)))
    out.append(("nenet.head", (chans,)))
    return out


def build_model(config: ModelConfig, initializer=None) -> WinnetModel:
    """Assemble a model; ``initializer(name, shape) -> np.ndarray`` supplies
    values (zeros by default)."""
    if initializer is None:
        initializer = lambda name, shape: np.zeros(shape, dtype=np.float32)

    def tensor(name, shape):
        arr = np.asarray(initializer(name, shape), dtype=np.float32)
        if arr.shape != tuple(shape):
            raise ValueError(f"initializer returned shape {arr.shape} for {name} {shape}")
        return Tensor(arr, requires_grad=True)

    scales = []
    for k in range(1, config.K + 1):
        prefix = f"scale{k}"
        dilation = 2 ** (k - 1)
        if config.frame == "cayley":
            theta = tensor(f"{prefix}.frame.theta", (config.c, config.c))
            frame = cayley_frame(theta, config.p, h=config.h)
        else:
            frame = dct_frame(config.p, config.c, h=config.h)

        def punet(role, m, cin, cout):
            base = f"{prefix}.{role}{m}"
            blocks = [
                ResidualBlock(
                    depthwise1=tensor(f"{base}.block{j}.depthwise1", (config.width, 1, config.q, config.q)),
                    pointwise1=tensor(f"{base}.block{j}.pointwise1", (config.width, config.width, 1, 1)),
                    thresholds=tensor(f"{base}.block{j}.thresholds", (config.width,)),
                    depthwise2=tensor(f"{base}.block{j}.depthwise2", (config.width, 1, config.q, config.q)),
                    pointwise2=tensor(f"{base}.block{j}.pointwise2", (config.width, config.width, 1, 1)),
                )
                for j in range(1, config.J + 1)
            ]
            return PUNetParams(
                input_conv=tensor(f"{base}.input_conv", (config.width, cin, 3, 3)),
                input_thresholds=tensor(f"{base}.input_thresholds", (config.width,)),
                blocks=blocks,
                output_conv=tensor(f"{base}.output_conv", (cout, config.width, 3, 3)),
                dilation=dilation, channels=config.width, q=config.q,
            )

        det = config.detail_channels
        linn = LinnParams(
            frame=frame,
            predict=[punet("predict", m, config.h, det) for m in range(1, config.M + 1)],
            update=[punet("update", m, det, config.h) for m in range(1, config.M + 1)],
            scale_index=k,
        )
        lista = ClistaParams(
            analysis=tensor(f"{prefix}.lista.analysis",
                            (config.lista_atoms, det, config.lista_kernel, config.lista_kernel)),
            synthesis=tensor(f"{prefix}.lista.synthesis",
                             (det, config.lista_atoms, config.lista_kernel, config.lista_kernel)),
            thresholds=tensor(f"{prefix}.lista.thresholds",
                              (config.lista_layers, config.lista_atoms)),
        )
        scales.append(ScalePair(linn, lista))

    convs = []
    for i in range(1, config.senet_blocks + 1):
        cin = 1 if i == 1 else config.senet_channels
        convs.append(tensor(f"nenet.conv{i}",
                            (config.senet_channels, cin, 1, config.senet_kernel)))
    nenet = SenetParams(convs=convs, head=tensor("nenet.head", (config.senet_channels,)))
    return WinnetModel(config=config, scales=scales, nenet=nenet)


def inverse_softplus(y: float) -> float:
    """Raw parameter whose softplus is y (> 0)."""
    if y <= 0:
        raise ValueError("softplus output must be positive")
    if y > 30:
        return float(y)
    return float(np.log(np.expm1(y)))


def shrinkage_model(sigma_ref: float = 25.0, threshold: float = 0.9,
                    p: int = 4, K: int = 1) -> WinnetModel:
    """An untrained but functional baseline: zero predict/update nets and an
    exact dual-pair dictionary, i.e. frame-domain soft-thresholding.

    ``threshold`` is the shrinkage strength in units of the noise level.
    The dictionary composition equals the identity exactly, so at threshold
    scale zero the denoiser is the identity map.
    """
    config = ModelConfig(K=K, p=p, c=p * p, h=1, M=1, J=1, width=4,
                         lista_atoms=p * p - 1, sigma_ref=sigma_ref)
    model = build_model(config)
    det = config.detail_channels
    r = config.lista_kernel
    ident = np.zeros((det, det, r, r), dtype=np.float32)
    for i in range(det):
        ident[i, i, r // 2, r // 2] = 1.0
    raw = inverse_softplus(threshold * sigma_ref)
    for pair in model.scales:
        pair.lista.analysis.data[:] = ident
        pair.lista.synthesis.data[:] = ident
        pair.lista.thresholds.data[:] = raw
    return model


# ---------------------------------------------------------------------------
# Denoising

def threshold_scale_policy(sigma_t: float, sigma_n: float) -> Tuple[float, float]:
    """Rescaling of learned soft-thresholds for a test noise level.

    At or above the reference level both network and dictionary thresholds
    scale by sigma_t / sigma_n; below it only the dictionary thresholds are
    rescaled (the transform stays contractive as learned).
    """
    sigma_t = validate_noise_level(sigma_t, "sigma_t")
    sigma_n = float(sigma_n)
    if sigma_n <= 0 or not math.isfinite(sigma_n):
        raise ValueError(f"sigma_n must be positive and finite, got {sigma_n}")
    ratio = sigma_t / sigma_n
    if sigma_t >= sigma_n:
        return ratio, ratio
    return 1.0, ratio


def denoise_with_scales(y, model: WinnetModel, punet_scale, clista_scale) -> Tensor:
    """Denoise with explicit threshold scales (scalars or per-sample arrays)."""
    x = as_tensor(y)
    stack = []
    for pair in model.scales:
        cd = linn_forward(split(x, pair.linn.frame), pair.linn, punet_scale)
        dhat = clista_denoise(cd.detail, pair.lista, clista_scale)
        stack.append((cd, dhat))
        x = cd.coarse
    out = stack[-1][0].coarse  # deepest coarse passes through unmodified
    for (cd, dhat), pair in zip(reversed(stack), reversed(model.scales)):
        out = merge(linn_inverse(CoarseDetail(out, dhat), pair.linn, punet_scale),
                    pair.linn.frame)
    return out


def denoise(y, sigma_t: float, model: WinnetModel) -> Tensor:
    """Non-blind denoising of a (1, H, W) or (N, 1, H, W) image."""
    pu, cl = threshold_scale_policy(sigma_t, model.sigma_ref)
    return denoise_with_scales(y, model, pu, cl)


def denoise_blind(y, model: WinnetModel) -> Tuple[Tensor, float]:
    """Estimate the noise level, then denoise at it; returns (image, sigma)."""
    cfg = model.config
    with no_grad():
        sigma_hat = estimate_noise_level(y, model.nenet, s=cfg.patch,
                                         stride=cfg.patch_stride)
    return denoise(y, sigma_hat, model), sigma_hat


def visualize_atom(model: WinnetModel, level: int, channel: int,
                   amplitude: float, size: int = 64) -> Tuple[Tensor, Tensor]:
    """Reconstruction of a single centred coefficient through the inverse path.

    Returns (raw, normalized); the normalized copy is scaled to unit peak
    magnitude (zero stays zero).
    """
    cfg = model.config
    if not 1 <= level <= cfg.K:
        raise ValueError(f"level must be in [1, {cfg.K}], got {level}")
    if not 0 <= channel < cfg.c:
        raise ValueError(f"channel must be in [0, {cfg.c - 1}], got {channel}")
    coarse = np.zeros((cfg.h, size, size), dtype=np.float32)
    detail = np.zeros((cfg.detail_channels, size, size), dtype=np.float32)
    if channel < cfg.h:
        coarse[channel, size // 2, size // 2] = amplitude
    else:
        detail[channel - cfg.h, size // 2, size // 2] = amplitude
    with no_grad():
        out = None
        for k in range(level, 0, -1):
            pair = model.scales[k - 1]
            if out is None:
                cd = CoarseDetail(Tensor(coarse), Tensor(detail))
            else:
                cd = CoarseDetail(out, Tensor(np.zeros_like(detail)))
            out = merge(linn_inverse(cd, pair.linn, 1.0), pair.linn.frame)
    peak = float(np.abs(out.data).max())
    normalized = Tensor(out.data / peak) if peak > 0 else Tensor(out.data.copy())
    return out, normalized


# ---------------------------------------------------------------------------
# Serialization: magic, version, JSON config block, tensor records
# (name, dims, little-endian float32 payload), in a fixed order.

def _write_tensor(buf, name: str, arr: np.ndarray):
    nb = name.encode("utf-8")
    buf.write(struct.pack("<H", len(nb)))
    buf.write(nb)
    buf.write(struct.pack("<B", arr.ndim))
    for d in arr.shape:
        buf.write(struct.pack("<I", d))
    buf.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def save_model(model: WinnetModel, path) -> None:
    params = model.named_parameters()
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<I", FORMAT_VERSION))
    cfg = json.dumps(model.config.to_dict(), sort_keys=True).encode("utf-8")
    buf.write(struct.pack("<I", len(cfg)))
    buf.write(cfg)
    buf.write(struct.pack("<I", len(params)))
    for name, t in params:
        _write_tensor(buf, name, t.data)
    with open(path, "wb") as fh:
        fh.write(buf.getvalue())


def _read_exact(fh, n: int, what: str) -> bytes:
    b = fh.read(n)
    if len(b) != n:
        raise ModelFormatError(f"truncated container while reading {what}")
    return b


def load_model(path) -> WinnetModel:
    with open(path, "rb") as fh:
        if _read_exact(fh, 4, "magic") != MAGIC:
            raise ModelVersionError("not a model container (bad magic)")
        (version,) = struct.unpack("<I", _read_exact(fh, 4, "version"))
        if version != FORMAT_VERSION:
            raise ModelVersionError(
                f"unsupported container version {version} (expected {FORMAT_VERSION})")
        (clen,) = struct.unpack("<I", _read_exact(fh, 4, "config length"))
        try:
            config = ModelConfig.from_dict(json.loads(_read_exact(fh, clen, "config")))
        except (ValueError, TypeError) as e:
            if isinstance(e, ModelFormatError):
                raise
            raise ModelFormatError(f"bad config block: {e}") from e
        (count,) = struct.unpack("<I", _read_exact(fh, 4, "tensor count"))
        records = {}
        for _ in range(count):
            (nlen,) = struct.unpack("<H", _read_exact(fh, 2, "record name length"))
            name = _read_exact(fh, nlen, "record name").decode("utf-8")
            (ndim,) = struct.unpack("<B", _read_exact(fh, 1, f"{name} ndim"))
            shape = tuple(
                struct.unpack("<I", _read_exact(fh, 4, f"{name} dims"))[0]
                for _ in range(ndim)
            )
            n = int(np.prod(shape)) if shape else 1
            data = np.frombuffer(_read_exact(fh, 4 * n, f"{name} payload"), dtype="<f4")
            records[name] = data.reshape(shape)

    expected = _param_shapes(config)
    expected_names = {name for name, _ in expected}
    extra = set(records) - expected_names
    if extra:
        raise ModelFormatError(f"unexpected tensor records: {sorted(extra)}")
    for name, shape in expected:
        if name not in records:
            raise ModelFormatError(f"missing tensor record: {name}")
        if records[name].shape != shape:
            raise ModelFormatError(
                f"tensor {name} has shape {records[name].shape}, expected {shape}")

    return build_model(config, initializer=lambda name, shape: records[name])
