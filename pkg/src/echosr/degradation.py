"""Bicubic resampling and LR/HR pair construction.

Resampling uses the Catmull-Rom cubic (a = -0.5) in convolution form.
When shrinking, the kernel support is stretched by the scale factor so
the filter also acts as an anti-aliasing low-pass. Taps that fall outside
the image are dropped and the remaining weights renormalized, so constant
images map to the same constant.
"""

from dataclasses import dataclass
from functools import lru_cache

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin

from ._validation import ValidationError, check_image, check_scale

CUBIC_A = -0.5


def cubic_kernel(x, a=CUBIC_A):
    x = np.abs(np.asarray(x, dtype=np.float64))
    out = np.zeros_like(x)
    near = x <= 1.0
    far = (x > 1.0) & (x < 2.0)
    xn = x[near]
    xf = x[far]
    out[near] = (a + 2.0) * xn**3 - (a + 3.0) * xn**2 + 1.0
    out[far] = a * xf**3 - 5.0 * a * xf**2 + 8.0 * a * xf - 4.0 * a
    return out


@lru_cache(maxsize=64)
def _resample_matrix(n_in, n_out):
    """Dense (n_out, n_in) weight matrix mapping a 1D signal to ``n_out`` samples."""
    scale = n_in / n_out
    stretch = max(scale, 1.0)
    support = 2.0 * stretch
    mat = np.zeros((n_out, n_in))
    for i in range(n_out):
        center = (i + 0.5) * scale
        lo = max(int(center - support + 0.5), 0)
        hi = min(int(center + support + 0.5), n_in)
        taps = np.arange(lo, hi)
        w = cubic_kernel((taps + 0.5 - center) / stretch)
        mat[i, lo:hi] = w / w.sum()
    mat.setflags(write=False)
    return mat


def resize(img, out_shape):
    """Catmull-Rom resize of a 2D array to ``out_shape`` (no clamping)."""
    img = np.asarray(img, dtype=np.float64)
    rows = _resample_matrix(img.shape[0], out_shape[0])
    cols = _resample_matrix(img.shape[1], out_shape[1])
    return rows @ img @ cols.T


def center_crop_to_multiple(img, r):
    h, w = img.shape
    hc, wc = (h // r) * r, (w // r) * r
    top, left = (h - hc) // 2, (w - wc) // 2
    return img[top : top + hc, left : left + wc]


def bicubic_downsample(img, r):
    """Center-crop to a multiple of ``r`` and shrink by ``r`` with an anti-aliased bicubic."""
    r = check_scale(r)
    img = check_image(img)
    if img.shape[0] < r or img.shape[1] < r:
        raise ValidationError(f"image {img.shape} is smaller than the scale factor {r}")
    cropped = center_crop_to_multiple(img, r)
    out = resize(cropped, (cropped.shape[0] // r, cropped.shape[1] // r))
    return np.clip(out, 0.0, 1.0)


def bicubic_upsample(img, r):
    r = check_scale(r)
    img = check_image(img)
    out = resize(img, (img.shape[0] * r, img.shape[1] * r))
    return np.clip(out, 0.0, 1.0)


@dataclass(frozen=True)
class SRPair:
    lr: np.ndarray
    hr: np.ndarray
    scale: int

    def __post_init__(self):
        if self.hr.shape != (self.lr.shape[0] * self.scale, self.lr.shape[1] * self.scale):
            raise ValidationError(
                f"hr shape {self.hr.shape} is not {self.scale}x lr shape {self.lr.shape}"
            )
        for name, arr in (("lr", self.lr), ("hr", self.hr)):
            if arr.min() < 0.0 or arr.max() > 1.0:
                raise ValidationError(f"{name} values must lie in [0, 1]")


def make_pair(img, r):
    r = check_scale(r)
    img = check_image(img, unit_range=True)
    hr = center_crop_to_multiple(img, r).copy()
    return SRPair(lr=bicubic_downsample(hr, r), hr=hr, scale=r)


def make_sr_pairs(subset, r=4):
    """One (LR, HR) pair per frame of ``subset``, an EchoDataset or iterable of images."""
    frames = getattr(subset, "frames", subset)
    images = [getattr(f, "image", f) for f in frames]
    if not images:
        raise ValidationError("cannot build SR pairs from an empty subset")
    return [make_pair(img, r) for img in images]


def save_pairs(pairs, path):
    arrays = {"scale": np.array(pairs[0].scale)}
    for i, p in enumerate(pairs):
        arrays[f"lr_{i:05d}"] = p.lr
        arrays[f"hr_{i:05d}"] = p.hr
    np.savez_compressed(path, **arrays)


def load_pairs(path):
    with np.load(path) as data:
        scale = int(data["scale"])
        n = sum(1 for k in data.files if k.startswith("lr_"))
        return [SRPair(lr=data[f"lr_{i:05d}"], hr=data[f"hr_{i:05d}"], scale=scale) for i in range(n)]


def save_golden(pair, prefix):
    """Write a pair as two 16-bit grayscale PNGs (``<prefix>_lr.png``, ``<prefix>_hr.png``)."""
    from PIL import Image

    for name, arr in (("lr", pair.lr), ("hr", pair.hr)):
        q = np.round(arr * 65535.0).astype(np.uint16)
        Image.fromarray(q).save(f"{prefix}_{name}.png")


class BicubicDownsampler(TransformerMixin, BaseEstimator):
    """Stateless transformer producing the LR side of the degradation.

    Parameters
    ----------
    scale : int, default=4
        Integer shrink factor.
    """

    def __init__(self, scale=4):
        self.scale = scale

    def fit(self, X, y=None):
        check_scale(self.scale)
        return self

    def transform(self, X):
        return [bicubic_downsample(x, self.scale) for x in X]


class BicubicUpsampler(TransformerMixin, BaseEstimator):
    """No-learning SR baseline with the same API as the learned upscalers."""

    def __init__(self, scale=4):
        self.scale = scale

    def fit(self, X=None, y=None):
        check_scale(self.scale)
        return self

    def predict(self, X):
        return [bicubic_upsample(x, self.scale) for x in X]

    transform = predict
