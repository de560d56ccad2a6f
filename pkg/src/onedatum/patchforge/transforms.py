"""Image transforms used by the patch pipeline.

Every function takes an explicit ``numpy.random.Generator`` so the caller
controls the random stream. Images are ``H x W x 3`` arrays; uint8 on the
way in, float32 in ``[0, 1]`` where noted.
"""
from __future__ import annotations

import math

import numpy as np
from PIL import Image
from scipy import ndimage
from skimage.color import hsv2rgb, rgb2hsv

_GRAY_WEIGHTS = np.array([0.299, 0.587, 0.114], dtype=np.float32)


def random_crop(img: np.ndarray, size: int, rng: np.random.Generator) -> np.ndarray:
    h, w = img.shape[:2]
    if size > h or size > w:
        raise ValueError(f"crop {size} larger than image {h}x{w}")
    top = int(rng.integers(0, h - size + 1))
    left = int(rng.integers(0, w - size + 1))
    return img[top:top + size, left:left + size]


def resized_crop_box(height: int, width: int, scale: tuple[float, float],
                     rng: np.random.Generator,
                     ratio: tuple[float, float] = (3 / 4, 4 / 3)) -> tuple[int, int, int, int]:
    """Sample a (top, left, h, w) box covering a random area fraction and aspect ratio.

    Ten rejection attempts, then a center crop clamped to the allowed ratio.
    """
    area = height * width
    log_ratio = (math.log(ratio[0]), math.log(ratio[1]))
    for _ in range(10):
        target_area = area * rng.uniform(scale[0], scale[1])
        aspect = math.exp(rng.uniform(*log_ratio))
        w = int(round(math.sqrt(target_area * aspect)))
        h = int(round(math.sqrt(target_area / aspect)))
        if 0 < w <= width and 0 < h <= height:
            top = int(rng.integers(0, height - h + 1))
            left = int(rng.integers(0, width - w + 1))
            return top, left, h, w
    in_ratio = width / height
    if in_ratio < ratio[0]:
        w = width
        h = int(round(w / ratio[0]))
    elif in_ratio > ratio[1]:
        h = height
        w = int(round(h * ratio[1]))
    else:
        w, h = width, height
    return (height - h) // 2, (width - w) // 2, h, w


def random_resized_crop(img: np.ndarray, size: int, scale: tuple[float, float],
                        rng: np.random.Generator) -> np.ndarray:
    """Crop a random box and resize it to ``size x size`` (antialiased bilinear)."""
    top, left, h, w = resized_crop_box(img.shape[0], img.shape[1], scale, rng)
    crop = np.ascontiguousarray(img[top:top + h, left:left + w])
    resized = Image.fromarray(crop).resize((size, size), Image.BILINEAR)
    return np.asarray(resized)


def affine_matrix(angle: float, shear: float) -> np.ndarray:
    """Forward 2x2 map (row, col) for a rotation by ``angle`` and x-shear by ``shear`` degrees."""
    a = math.radians(angle)
    s = math.radians(shear)
    rot = np.array([[math.cos(a), -math.sin(a)], [math.sin(a), math.cos(a)]])
    # shear along the column (x) axis: col' = col + tan(s) * row
    sh = np.array([[1.0, 0.0], [math.tan(s), 1.0]])
    return rot @ sh


def random_affine(img: np.ndarray, degrees: float, shear: float,
                  rng: np.random.Generator) -> np.ndarray:
    """Rotate and shear about the image center; bilinear, reflection padding.

    Returns float32 in the input's intensity scale.
    """
    angle = rng.uniform(-degrees, degrees)
    shear_x = rng.uniform(-shear, shear)
    fwd = affine_matrix(angle, shear_x)
    inv = np.linalg.inv(fwd)
    h, w = img.shape[:2]
    center = np.array([(h - 1) / 2.0, (w - 1) / 2.0])
    offset = center - inv @ center
    matrix = np.eye(3)
    matrix[:2, :2] = inv
    full_offset = np.array([offset[0], offset[1], 0.0])
    return ndimage.affine_transform(img.astype(np.float32), matrix, offset=full_offset,
                                    order=1, mode="mirror", prefilter=False)


def center_crop(img: np.ndarray, size: int) -> np.ndarray:
    h, w = img.shape[:2]
    top = int(round((h - size) / 2.0))
    left = int(round((w - size) / 2.0))
    return img[top:top + size, left:left + size]


def _blend(a: np.ndarray, b, factor: float) -> np.ndarray:
    return np.clip(factor * a + (1.0 - factor) * b, 0.0, 1.0)


def grayscale(img: np.ndarray) -> np.ndarray:
    return img @ _GRAY_WEIGHTS


def adjust_brightness(img: np.ndarray, factor: float) -> np.ndarray:
    return _blend(img, 0.0, factor)


def adjust_contrast(img: np.ndarray, factor: float) -> np.ndarray:
    return _blend(img, float(grayscale(img).mean()), factor)


def adjust_saturation(img: np.ndarray, factor: float) -> np.ndarray:
    return _blend(img, grayscale(img)[..., None], factor)


def adjust_hue(img: np.ndarray, shift: float) -> np.ndarray:
    """Rotate hue by ``shift`` turns of the hue circle, ``shift`` in [-0.5, 0.5]."""
    hsv = rgb2hsv(img)
    hsv[..., 0] = np.mod(hsv[..., 0] + shift, 1.0)
    return np.clip(hsv2rgb(hsv), 0.0, 1.0).astype(np.float32)


def color_jitter(img: np.ndarray, strengths: tuple[float, float, float, float],
                 rng: np.random.Generator) -> np.ndarray:
    """Brightness, contrast, saturation and hue jitter in a random order.

    ``img`` is float in [0, 1]. Multiplicative factors are drawn from
    ``[max(0, 1 - s), 1 + s]`` and the hue shift from ``[-h, h]``. Results
    are clamped, never wrapped.
    """
    b, c, s, h = strengths
    order = rng.permutation(4)
    fb = rng.uniform(max(0.0, 1 - b), 1 + b)
    fc = rng.uniform(max(0.0, 1 - c), 1 + c)
    fs = rng.uniform(max(0.0, 1 - s), 1 + s)
    fh = rng.uniform(-h, h)
    out = img
    for op in order:
        if op == 0:
            out = adjust_brightness(out, fb)
        elif op == 1:
            out = adjust_contrast(out, fc)
        elif op == 2:
            out = adjust_saturation(out, fs)
        else:
            out = adjust_hue(out, fh)
    return out.astype(np.float32)
