"""Weak (geometric) and strong (photometric + CutMix) perturbations.

Images are H x W x 3 float arrays, label-like maps are H x W.  The strong
pipeline is applied on top of the weak view and never moves pixels except
through CutMix, so a target computed on the weak view stays aligned with the
strong view pixel for pixel.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F
from scipy import ndimage

from .errors import ContractError

GAIN_RANGE = (-0.5, 0.5)  # channel scale = 1 + gain, i.e. [0.5, 1.5]
SHIFT_RANGE = (-0.2, 0.2)
BLUR_RANGE = (0.0, 1.5)
_LUMA = np.array([0.299, 0.587, 0.114])


@dataclass(frozen=True)
class WeakParams:
    flip: bool
    crop_box: tuple[int, int, int, int]  # top, left, h, w
    output_size: tuple[int, int]

    @classmethod
    def identity(cls, shape):
        h, w = shape[:2]
        return cls(False, (0, 0, h, w), (h, w))


@dataclass(frozen=True)
class StrongParams:
    gain: tuple[float, float, float] = (0.0, 0.0, 0.0)
    shift: tuple[float, float, float] = (0.0, 0.0, 0.0)
    grayscale: bool = False
    blur_sigma: float = 0.0
    cutmix_box: tuple[int, int, int, int] | None = None
    cutmix_partner: int | None = None


def _check_box(box, h, w, what):
    top, left, bh, bw = box
    if bh <= 0 or bw <= 0 or top < 0 or left < 0 or top + bh > h or left + bw > w:
        raise ContractError(f"{what} {box} outside image bounds {(h, w)}")


def _nearest_index(n_out, n_in):
    return np.minimum(((np.arange(n_out) + 0.5) * n_in / n_out).astype(np.int64), n_in - 1)


def resize_nearest(arr, size):
    h, w = arr.shape[:2]
    if (h, w) == tuple(size):
        return arr
    rows = _nearest_index(size[0], h)
    cols = _nearest_index(size[1], w)
    return arr[rows[:, None], cols[None, :]]


def resize_bilinear(image, size):
    h, w = image.shape[:2]
    if (h, w) == tuple(size):
        return image
    t = torch.from_numpy(np.ascontiguousarray(image)).permute(2, 0, 1)[None]
    out = F.interpolate(t, size=tuple(size), mode="bilinear", align_corners=False)
    return out[0].permute(1, 2, 0).numpy().astype(image.dtype)


def weak_apply_map(arr, params: WeakParams):
    """Apply the weak geometry to a per-pixel map with nearest resampling."""
    h, w = arr.shape[:2]
    _check_box(params.crop_box, h, w, "crop box")
    top, left, bh, bw = params.crop_box
    out = resize_nearest(arr[top:top + bh, left:left + bw], params.output_size)
    if params.flip:
        out = out[:, ::-1]
    return np.ascontiguousarray(out)


def weak_apply(image, label=None, params: WeakParams | None = None):
    """Crop, resize and optionally flip ``image`` and ``label`` identically."""
    if params is None:
        params = WeakParams.identity(image.shape)
    h, w = image.shape[:2]
    _check_box(params.crop_box, h, w, "crop box")
    top, left, bh, bw = params.crop_box
    img = resize_bilinear(image[top:top + bh, left:left + bw], params.output_size)
    if params.flip:
        img = img[:, ::-1]
    img = np.ascontiguousarray(img)
    if label is None:
        return img, None
    return img, weak_apply_map(label, params)


def sample_weak(rng: np.random.Generator, shape, crop_size, scale_range=(0.5, 1.0)) -> WeakParams:
    """Random square crop covering ``scale_range`` of the short side, resized to ``crop_size``."""
    h, w = shape[:2]
    side = int(round(min(h, w) * rng.uniform(*scale_range)))
    side = max(1, min(side, h, w))
    top = int(rng.integers(0, h - side + 1))
    left = int(rng.integers(0, w - side + 1))
    flip = bool(rng.random() < 0.5)
    return WeakParams(flip, (top, left, side, side), (crop_size, crop_size))


def photometric(image, params: StrongParams):
    """Colour jitter, then grayscale, then Gaussian blur."""
    out = image * (1.0 + np.asarray(params.gain, dtype=image.dtype)) + np.asarray(params.shift, dtype=image.dtype)
    out = np.clip(out, 0.0, 1.0)
    if params.grayscale:
        gray = out @ _LUMA.astype(out.dtype)
        out = np.repeat(gray[..., None], 3, axis=2)
    if params.blur_sigma > 0:
        out = ndimage.gaussian_filter(out, sigma=(params.blur_sigma, params.blur_sigma, 0), mode="reflect")
    return out.astype(image.dtype)


def strong_apply(image, params: StrongParams, partner_image=None):
    """Photometric perturbation followed by CutMix with ``partner_image``.

    Returns the perturbed image and a boolean mask of partner-owned pixels.
    The partner is pasted as given; callers pass the partner's own
    photometrically perturbed view.
    """
    h, w = image.shape[:2]
    if (params.cutmix_box is None) != (params.cutmix_partner is None):
        raise ContractError("cutmix_box and cutmix_partner must be given together")
    out = photometric(image, params)
    mask = np.zeros((h, w), dtype=bool)
    if params.cutmix_box is not None:
        if partner_image is None or partner_image.shape != image.shape:
            raise ContractError("CutMix needs a partner image of the same shape")
        _check_box(params.cutmix_box, h, w, "cutmix box")
        top, left, bh, bw = params.cutmix_box
        mask[top:top + bh, left:left + bw] = True
        out = out.copy()
        out[mask] = partner_image[mask]
    return out, mask


def sample_strong(rng: np.random.Generator, shape, partner=None, p_jitter=0.8, p_gray=0.2,
                  p_blur=0.5, p_cutmix=0.5, area_range=(0.02, 0.4)) -> StrongParams:
    h, w = shape[:2]
    gain = shift = (0.0, 0.0, 0.0)
    if rng.random() < p_jitter:
        gain = tuple(float(v) for v in rng.uniform(*GAIN_RANGE, size=3))
        shift = tuple(float(v) for v in rng.uniform(*SHIFT_RANGE, size=3))
    grayscale = bool(rng.random() < p_gray)
    blur = float(rng.uniform(*BLUR_RANGE)) if rng.random() < p_blur else 0.0
    box = None
    if partner is not None and rng.random() < p_cutmix:
        area = rng.uniform(*area_range) * h * w
        ratio = rng.uniform(0.3, 1 / 0.3)
        bh = int(np.clip(round(np.sqrt(area * ratio)), 1, h))
        bw = int(np.clip(round(np.sqrt(area / ratio)), 1, w))
        box = (int(rng.integers(0, h - bh + 1)), int(rng.integers(0, w - bw + 1)), bh, bw)
    return StrongParams(gain, shift, grayscale, blur, box, partner if box is not None else None)


def mix_targets(target_a, target_b, cutmix_mask):
    """Select ``target_b`` inside the CutMix mask and ``target_a`` elsewhere.

    Each target is a ``(label, confidence)`` pair of H x W arrays.
    """
    label_a, conf_a = target_a
    label_b, conf_b = target_b
    mask = np.asarray(cutmix_mask, dtype=bool)
    shapes = {np.shape(label_a), np.shape(conf_a), np.shape(label_b), np.shape(conf_b), mask.shape}
    if len(shapes) != 1:
        raise ContractError(f"mix_targets shape mismatch: {sorted(shapes)}")
    return np.where(mask, label_b, label_a), np.where(mask, conf_b, conf_a)
