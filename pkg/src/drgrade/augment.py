"""Class-conditional image augmentation on decoded RGB buffers.

Geometry (rotation + affine) resamples through Pillow with black fill; flips,
color jitter and random erasing operate directly on the uint8 array. Every
draw comes from one seeded generator, so a (seed, config, image) triple fully
determines the output.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import GradingError
from .manifest import MINORITY_GRADES


@dataclass
class RgbImage:
    pixels: np.ndarray  # (H, W, 3) uint8

    def __post_init__(self):
        self.pixels = np.asarray(self.pixels)
        if self.pixels.ndim != 3 or self.pixels.shape[2] != 3 or self.pixels.dtype != np.uint8:
            raise GradingError(f"RgbImage needs an (H, W, 3) uint8 buffer, "
                               f"got {self.pixels.shape} {self.pixels.dtype}")
        if self.pixels.shape[0] == 0 or self.pixels.shape[1] == 0:
            raise GradingError("zero-sized image")

    @property
    def height(self):
        return self.pixels.shape[0]

    @property
    def width(self):
        return self.pixels.shape[1]


def load_rgb_image(path):
    """Decode adapter: PNG/JPEG (anything Pillow reads) to an RGB buffer."""
    with Image.open(path) as im:
        return RgbImage(np.asarray(im.convert("RGB"), dtype=np.uint8))


def save_rgb_image(path, image):
    Image.fromarray(image.pixels, mode="RGB").save(path)
    return Path(path)


@dataclass
class AugmentationParams:
    flip_prob: float = 0.5
    rotation_max_deg: float = 30.0
    brightness: float = 0.2
    contrast: float = 0.2
    saturation: float = 0.2
    hue: float = 0.0              # fraction of the hue circle
    translate_frac: float = 0.05
    scale_delta: float = 0.05
    erase_prob: float = 0.0
    erase_area: tuple = (0.02, 0.20)
    erase_aspect: tuple = (0.3, 3.3)

    def __post_init__(self):
        for p in (self.flip_prob, self.erase_prob):
            if not 0.0 <= p <= 1.0:
                raise ValueError(f"probabilities must lie in [0, 1], got {p}")
        if not 0.0 <= self.rotation_max_deg <= 180.0:
            raise ValueError(f"rotation must lie in [0, 180] degrees, got {self.rotation_max_deg}")

    @classmethod
    def identity(cls):
        return cls(flip_prob=0.0, rotation_max_deg=0.0, brightness=0.0, contrast=0.0,
                   saturation=0.0, hue=0.0, translate_frac=0.0, scale_delta=0.0,
                   erase_prob=0.0)


@dataclass
class AugmentationConfig:
    base: AugmentationParams = field(default_factory=AugmentationParams)
    minority: AugmentationParams = field(default_factory=lambda: AugmentationParams(
        flip_prob=0.6, rotation_max_deg=35.0, brightness=0.3, contrast=0.3,
        saturation=0.3, hue=0.05, erase_prob=0.4))
    minority_grades: tuple = MINORITY_GRADES

    def for_grade(self, grade):
        return self.minority if grade in self.minority_grades else self.base

    @classmethod
    def identity(cls):
        return cls(base=AugmentationParams.identity(),
                   minority=AugmentationParams.identity())


def _affine(pixels, angle_deg, tx, ty, scale):
    h, w = pixels.shape[:2]
    cx, cy = (w - 1) / 2.0, (h - 1) / 2.0
    theta = math.radians(angle_deg)
    cos_t, sin_t = math.cos(theta), math.sin(theta)
    inv = 1.0 / scale
    # Pillow's AFFINE takes the output->input map
    a, b = inv * cos_t, inv * sin_t
    d, e = -inv * sin_t, inv * cos_t
    c = cx - a * (cx + tx) - b * (cy + ty)
    f = cy - d * (cx + tx) - e * (cy + ty)
    im = Image.fromarray(pixels, mode="RGB")
    out = im.transform((w, h), Image.AFFINE, (a, b, c, d, e, f),
                       resample=Image.BILINEAR, fillcolor=(0, 0, 0))
    return np.asarray(out, dtype=np.uint8)


def _jitter(pixels, rng, p):
    x = pixels.astype(np.float64)
    if p.brightness > 0:
        x *= 1.0 + rng.uniform(-p.brightness, p.brightness)
    if p.contrast > 0:
        factor = 1.0 + rng.uniform(-p.contrast, p.contrast)
        gray_mean = (0.299 * x[..., 0] + 0.587 * x[..., 1] + 0.114 * x[..., 2]).mean()
        x = gray_mean + (x - gray_mean) * factor
    if p.saturation > 0:
        factor = 1.0 + rng.uniform(-p.saturation, p.saturation)
        gray = 0.299 * x[..., 0] + 0.587 * x[..., 1] + 0.114 * x[..., 2]
        x = gray[..., None] + (x - gray[..., None]) * factor
    x = np.clip(np.rint(x), 0, 255).astype(np.uint8)
    if p.hue > 0:
        shift = rng.uniform(-p.hue, p.hue)
        hsv = np.asarray(Image.fromarray(x, "RGB").convert("HSV"), dtype=np.uint8).copy()
        hsv[..., 0] = (hsv[..., 0].astype(np.int16) + int(round(shift * 255))) % 256
        x = np.asarray(Image.fromarray(hsv, "HSV").convert("RGB"), dtype=np.uint8)
    return x


def _erase(pixels, rng, p):
    h, w = pixels.shape[:2]
    area = h * w * rng.uniform(*p.erase_area)
    log_lo, log_hi = math.log(p.erase_aspect[0]), math.log(p.erase_aspect[1])
    aspect = math.exp(rng.uniform(log_lo, log_hi))
    eh = min(h, max(1, int(round(math.sqrt(area * aspect)))))
    ew = min(w, max(1, int(round(math.sqrt(area / aspect)))))
    top = int(rng.integers(0, h - eh + 1))
    left = int(rng.integers(0, w - ew + 1))
    out = pixels.copy()
    out[top:top + eh, left:left + ew] = rng.integers(0, 256, size=(eh, ew, 3), dtype=np.uint8)
    return out


def augment(image, grade, config, rng_seed):
    """Augment one image with the settings for its grade; pure given the seed."""
    rng = np.random.default_rng(rng_seed)
    p = config.for_grade(grade)
    pixels = image.pixels

    if p.flip_prob > 0:
        if rng.random() < p.flip_prob:
            pixels = pixels[:, ::-1]
        if rng.random() < p.flip_prob:
            pixels = pixels[::-1, :]

    angle = rng.uniform(-p.rotation_max_deg, p.rotation_max_deg) if p.rotation_max_deg > 0 else 0.0
    tx = rng.uniform(-p.translate_frac, p.translate_frac) * image.width if p.translate_frac > 0 else 0.0
    ty = rng.uniform(-p.translate_frac, p.translate_frac) * image.height if p.translate_frac > 0 else 0.0
    scale = 1.0 + (rng.uniform(-p.scale_delta, p.scale_delta) if p.scale_delta > 0 else 0.0)
    if angle != 0.0 or tx != 0.0 or ty != 0.0 or scale != 1.0:
        pixels = _affine(np.ascontiguousarray(pixels), angle, tx, ty, scale)

    pixels = _jitter(np.ascontiguousarray(pixels), rng, p)

    if p.erase_prob > 0 and rng.random() < p.erase_prob:
        pixels = _erase(pixels, rng, p)

    return RgbImage(np.ascontiguousarray(pixels))
