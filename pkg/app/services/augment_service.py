"""
Augmentation service.

Square random-resized crop, horizontal flip, additive brightness and
multiplicative contrast. Geometric operations are shared between an image
and its mask; photometric operations touch the image only. Every chain
application draws the same number of random values, so generator state
advances identically regardless of which operations fire.
"""

from dataclasses import dataclass
from typing import Tuple

import numpy as np
import torch
import torch.nn.functional as F

from app.core.exceptions import ArgumentError
from app.models.schemas import AugmentConfig


@dataclass(frozen=True)
class CropGeometry:
    """Square crop window and flip decision."""

    top: int
    left: int
    side: int
    flip: bool


@dataclass(frozen=True)
class Photometric:
    brightness: float
    contrast: float


@dataclass(frozen=True)
class ViewPair:
    """Two augmented views of one source slice."""

    view1: np.ndarray
    view2: np.ndarray


def sample_geometry(shape: Tuple[int, int], cfg: AugmentConfig, rng: np.random.Generator) -> CropGeometry:
    """Draw crop scale, position and flip; the crop never exceeds the image."""
    height, width = shape
    short = min(height, width)
    scale = rng.uniform(*cfg.crop_scale_range)
    side = int(np.clip(round(np.sqrt(scale) * short), 1, short))
    top = int(rng.integers(0, height - side + 1))
    left = int(rng.integers(0, width - side + 1))
    flip = bool(rng.random() < cfg.hflip_prob)
    return CropGeometry(top=top, left=left, side=side, flip=flip)


def sample_photometric(cfg: AugmentConfig, rng: np.random.Generator) -> Photometric:
    brightness = rng.uniform(-cfg.brightness_delta_max, cfg.brightness_delta_max)
    contrast = rng.uniform(*cfg.contrast_factor_range)
    return Photometric(brightness=float(brightness), contrast=float(contrast))


def _resize(array: np.ndarray, size: int, mode: str) -> np.ndarray:
    if array.shape == (size, size):
        return array
    tensor = torch.from_numpy(np.ascontiguousarray(array)).float()[None, None]
    if mode == "bilinear":
        out = F.interpolate(tensor, size=(size, size), mode="bilinear", align_corners=False)
    else:
        out = F.interpolate(tensor, size=(size, size), mode="nearest")
    return out[0, 0].numpy()


def apply_geometry(array: np.ndarray, geometry: CropGeometry, size: int, mode: str) -> np.ndarray:
    """Crop, resize to ``size`` and optionally mirror horizontally."""
    crop = array[geometry.top:geometry.top + geometry.side, geometry.left:geometry.left + geometry.side]
    out = _resize(crop, size, mode)
    if geometry.flip:
        out = out[:, ::-1]
    return np.ascontiguousarray(out)


def apply_photometric(image: np.ndarray, photometric: Photometric) -> np.ndarray:
    """Contrast around the image mean, then brightness shift, clamped to [0, 1]."""
    out = image
    if photometric.contrast != 1.0:
        mean = out.mean()
        out = (out - mean) * photometric.contrast + mean
    out = out + photometric.brightness
    return np.clip(out, 0.0, 1.0).astype(np.float32)


def _augment_image(image: np.ndarray, cfg: AugmentConfig, rng: np.random.Generator) -> np.ndarray:
    geometry = sample_geometry(image.shape, cfg, rng)
    photometric = sample_photometric(cfg, rng)
    view = apply_geometry(image.astype(np.float32), geometry, cfg.output_size, "bilinear")
    return apply_photometric(view, photometric)


def make_view_pair(image: np.ndarray, cfg: AugmentConfig, rng: np.random.Generator) -> ViewPair:
    """
    Two independent draws of the augmentation chain on the same slice.

    Raises:
        ArgumentError: If the image is empty or not 2D.
    """
    if image.ndim != 2 or image.size == 0:
        raise ArgumentError("make_view_pair expects a non-empty 2D image")
    return ViewPair(view1=_augment_image(image, cfg, rng), view2=_augment_image(image, cfg, rng))


def augment_labeled_pair(
    image: np.ndarray,
    mask: np.ndarray,
    cfg: AugmentConfig,
    rng: np.random.Generator,
) -> Tuple[np.ndarray, np.ndarray]:
    """
    One draw of the chain applied jointly: shared crop/flip, bilinear image
    and nearest-neighbour mask resampling, photometric ops on the image only.

    Raises:
        ArgumentError: If image and mask shapes differ.
    """
    if image.shape != mask.shape:
        raise ArgumentError(f"image shape {image.shape} != mask shape {mask.shape}")
    geometry = sample_geometry(image.shape, cfg, rng)
    photometric = sample_photometric(cfg, rng)
    image_out = apply_photometric(
        apply_geometry(image.astype(np.float32), geometry, cfg.output_size, "bilinear"),
        photometric,
    )
    mask_out = apply_geometry(mask.astype(np.float32), geometry, cfg.output_size, "nearest")
    return image_out, mask_out.astype(np.int64)


def resize_for_eval(image: np.ndarray, mask: np.ndarray, size: int) -> Tuple[np.ndarray, np.ndarray]:
    """Deterministic full-frame resize used for evaluation splits."""
    image_out = np.clip(_resize(image.astype(np.float32), size, "bilinear"), 0.0, 1.0)
    mask_out = _resize(mask.astype(np.float32), size, "nearest").astype(np.int64)
    return image_out.astype(np.float32), mask_out
