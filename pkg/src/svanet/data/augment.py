"""Training-time augmentation applied jointly to an image and its index mask."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from ..core import Rng


@dataclass
class AugmentConfig:
    crop: int = 512
    flip_p: float = 0.5
    rotate_p: float = 0.5
    rotate_deg: float = 30.0
    distort_p: float = 0.5
    distort_amplitude: float = 4.0
    distort_smoothing: float = 8.0
    blur_p: float = 0.5
    blur_sigma: tuple[float, float] = (0.1, 1.5)

    @classmethod
    def off(cls, crop: int = 512) -> "AugmentConfig":
        return cls(crop=crop, flip_p=0.0, rotate_p=0.0, distort_p=0.0, blur_p=0.0)


def hflip(image: np.ndarray, mask: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    return image[:, :, ::-1].copy(), mask[:, ::-1].copy()


def rotate(image: np.ndarray, mask: np.ndarray, degrees: float) -> tuple[np.ndarray, np.ndarray]:
    img = ndimage.rotate(image, degrees, axes=(2, 1), reshape=False, order=1, mode="reflect")
    msk = ndimage.rotate(mask, degrees, axes=(1, 0), reshape=False, order=0, mode="reflect")
    return img, msk


def displacement_field(shape: tuple[int, int], rng: Rng, amplitude: float, smoothing: float) -> np.ndarray:
    """Smooth random (dy, dx) field whose largest magnitude is ``amplitude`` pixels."""
    field = rng.normal(size=(2, *shape))
    field = np.stack([ndimage.gaussian_filter(f, smoothing, mode="reflect") for f in field])
    peak = np.abs(field).max()
    return field * (amplitude / peak) if peak > 0 else field


def distort(image: np.ndarray, mask: np.ndarray, field: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    h, w = mask.shape
    yy, xx = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    coords = np.stack([yy + field[0], xx + field[1]])
    img = np.stack([ndimage.map_coordinates(c, coords, order=1, mode="reflect") for c in image])
    msk = ndimage.map_coordinates(mask, coords, order=0, mode="reflect")
    return img, msk


def blur(image: np.ndarray, sigma: float) -> np.ndarray:
    return np.stack([ndimage.gaussian_filter(c, sigma, mode="reflect") for c in image])


def _reflect_pad(a: np.ndarray, ph: int, pw: int) -> np.ndarray:
    # reflect needs pad < size; repeat for large deficits
    while ph > 0 or pw > 0:
        h, w = a.shape[-2:]
        sh, sw = min(ph, h - 1), min(pw, w - 1)
        if sh <= 0 and sw <= 0:
            sh, sw = min(ph, h), min(pw, w)
            mode = "symmetric"
        else:
            mode = "reflect"
        pad = [(0, 0)] * (a.ndim - 2) + [(0, sh), (0, sw)]
        a = np.pad(a, pad, mode=mode)
        ph, pw = ph - sh, pw - sw
    return a


def crop(image: np.ndarray, mask: np.ndarray, size: int, rng: Rng | None) -> tuple[np.ndarray, np.ndarray]:
    """Random ``size`` x ``size`` window; reflect-pads sides that are too short.

    Without an rng the window is centered.
    """
    h, w = mask.shape
    image = _reflect_pad(image, max(0, size - h), max(0, size - w))
    mask = _reflect_pad(mask, max(0, size - h), max(0, size - w))
    h, w = mask.shape
    if rng is None:
        top, left = (h - size) // 2, (w - size) // 2
    else:
        top = int(rng.integers(0, h - size + 1))
        left = int(rng.integers(0, w - size + 1))
    return image[:, top:top + size, left:left + size], mask[top:top + size, left:left + size]


def augment(image: np.ndarray, mask: np.ndarray, rng: Rng, cfg: AugmentConfig) -> tuple[np.ndarray, np.ndarray]:
    """Flip, rotate, distort, blur (image only), then crop. Labels stay integral."""
    dtype = image.dtype
    image = image.astype(np.float64)
    mask = np.asarray(mask)
    if rng.random() < cfg.flip_p:
        image, mask = hflip(image, mask)
    if rng.random() < cfg.rotate_p:
        image, mask = rotate(image, mask, rng.uniform(-cfg.rotate_deg, cfg.rotate_deg))
    if rng.random() < cfg.distort_p:
        image, mask = distort(image, mask, displacement_field(mask.shape, rng, cfg.distort_amplitude,
                                                              cfg.distort_smoothing))
    if rng.random() < cfg.blur_p:
        image = blur(image, rng.uniform(*cfg.blur_sigma))
    image, mask = crop(image, mask, cfg.crop, rng)
    return np.clip(image, 0.0, 1.0).astype(dtype), mask.astype(np.int64)
