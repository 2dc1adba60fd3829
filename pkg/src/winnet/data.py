"""Grayscale image I/O, noise synthesis, patch datasets, and PSNR.

Images travel as (1, H, W) float32 arrays on the [0, 255] intensity
scale.  Gaussian noise comes from a counter-based generator (Philox), so
a (seed, tag) pair reproduces the same field on any platform.
"""

from __future__ import annotations

import hashlib
import os
from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np
from PIL import Image, UnidentifiedImageError

from .linalg import Tensor, as_tensor

IMAGE_EXTENSIONS = (".png", ".pgm")
PSNR_CAP_DB = 99.0


class ImageReadError(ValueError):
    """File missing, unreadable, or not a supported raster format."""


class NotGrayscaleError(ImageReadError):
    """Image is not 8-bit single-channel."""


def load_image(path) -> Tensor:
    """Read an 8-bit grayscale PNG or portable graymap as (1, H, W) floats."""
    try:
        with Image.open(path) as im:
            if im.mode != "L":
                raise NotGrayscaleError(
                    f"{path}: expected 8-bit grayscale, got mode {im.mode!r}")
            arr = np.asarray(im, dtype=np.float32)
    except FileNotFoundError as e:
        raise ImageReadError(f"{path}: {e.strerror}") from e
    except UnidentifiedImageError as e:
        raise ImageReadError(f"{path}: not a recognized image file") from e
    return Tensor(arr[None, :, :])


def save_image(image: Union[Tensor, np.ndarray], path) -> None:
    """Clamp to [0, 255], round half-to-even, write 8-bit grayscale."""
    arr = image.data if isinstance(image, Tensor) else np.asarray(image)
    if arr.ndim == 3:
        if arr.shape[0] != 1:
            raise ValueError(f"expected single-channel image, got {arr.shape}")
        arr = arr[0]
    if arr.ndim != 2:
        raise ValueError(f"expected (1, H, W) or (H, W), got {arr.shape}")
    quantized = np.rint(np.clip(arr, 0.0, 255.0)).astype(np.uint8)
    Image.fromarray(quantized, mode="L").save(path)


def awgn(x: Union[Tensor, np.ndarray], sigma: float, seed: int, tag: int = 0) -> Tensor:
    """Additive white Gaussian noise, unclamped, reproducible per (seed, tag)."""
    if sigma < 0:
        raise ValueError(f"sigma must be >= 0, got {sigma}")
    x = as_tensor(x)
    if sigma == 0:
        return Tensor(x.data.copy())
    rng = np.random.Generator(np.random.Philox(key=[seed & 0xFFFFFFFFFFFFFFFF,
                                                    tag & 0xFFFFFFFFFFFFFFFF]))
    noise = rng.standard_normal(x.shape) * sigma
    return Tensor(x.data + noise.astype(x.dtype))


def psnr(a: Union[Tensor, np.ndarray], b: Union[Tensor, np.ndarray]) -> float:
    """Peak signal-to-noise ratio in dB on the [0, 255] scale, capped at 99."""
    ad = a.data if isinstance(a, Tensor) else np.asarray(a)
    bd = b.data if isinstance(b, Tensor) else np.asarray(b)
    if ad.shape != bd.shape:
        raise ValueError(f"shape mismatch: {ad.shape} vs {bd.shape}")
    mse = float(np.mean((ad.astype(np.float64) - bd.astype(np.float64)) ** 2))
    if mse == 0.0:
        return PSNR_CAP_DB
    return min(10.0 * np.log10(255.0 ** 2 / mse), PSNR_CAP_DB)


@dataclass
class PatchDataset:
    """Training patches plus the (file, row, col) provenance of each."""
    patches: np.ndarray                    # (Np, 1, patch, patch) float32
    manifest: List[Tuple[str, int, int]]
    seed: int
    patch: int

    def __len__(self) -> int:
        return self.patches.shape[0]

    def manifest_lines(self) -> List[str]:
        return [f"{path}\t{y}\t{x}" for path, y, x in self.manifest]

    def content_hash(self) -> str:
        h = hashlib.sha256()
        h.update(np.ascontiguousarray(self.patches, dtype="<f4").tobytes())
        h.update("\n".join(self.manifest_lines()).encode())
        return h.hexdigest()


def list_images(directory) -> List[str]:
    names = sorted(
        n for n in os.listdir(directory)
        if n.lower().endswith(IMAGE_EXTENSIONS)
    )
    return [os.path.join(directory, n) for n in names]


def build_patch_dataset(directory, patch: int = 40, stride: int = 20,
                        count: Optional[int] = None, seed: int = 0,
                        augment: bool = False) -> PatchDataset:
    """Extract patches from every image in a directory, lexicographic order.

    Extraction is raster order per image; ``count`` keeps a seeded random
    subset.  ``augment`` adds the flipped copy of each patch (off by
    default).
    """
    paths = list_images(directory)
    if not paths:
        raise ValueError(f"no .png/.pgm images found in {directory}")
    chunks = []
    manifest: List[Tuple[str, int, int]] = []
    for path in paths:
        img = load_image(path).data[0]
        H, W = img.shape
        for y in range(0, H - patch + 1, stride):
            for x in range(0, W - patch + 1, stride):
                chunks.append(img[y:y + patch, x:x + patch])
                manifest.append((os.path.basename(path), y, x))
                if augment:
                    chunks.append(img[y:y + patch, x:x + patch][:, ::-1])
                    manifest.append((os.path.basename(path), y, -x - 1))
    if not chunks:
        raise ValueError(f"images in {directory} are smaller than {patch}x{patch}")
    patches = np.stack(chunks)[:, None, :, :].astype(np.float32)
    if count is not None:
        if count < 1:
            raise ValueError(f"count must be >= 1, got {count}")
        rng = np.random.Generator(np.random.Philox(key=[seed & 0xFFFFFFFFFFFFFFFF, 0xDA7A]))
        keep = rng.permutation(len(chunks))[:count]
        keep.sort()
        patches = patches[keep]
        manifest = [manifest[i] for i in keep]
    return PatchDataset(patches=patches, manifest=manifest, seed=seed, patch=patch)
