"""Image fidelity and classification metrics.

All image metrics operate on 2D float arrays. The internal intensity
contract is [0, 1], so ``data_range`` defaults to 1.0; pass 255 when
comparing 8-bit-scale arrays.
"""

import math
from dataclasses import dataclass

import numpy as np

from ._validation import ValidationError, check_image, check_same_shape

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03


@dataclass(frozen=True)
class MetricReport:
    psnr_db: float
    ssim: float
    context: str = ""

    def __post_init__(self):
        if not -1.0 <= self.ssim <= 1.0:
            raise ValidationError(f"ssim out of range: {self.ssim}")
        if not (self.psnr_db > 0 or math.isinf(self.psnr_db)):
            raise ValidationError(f"psnr must be positive or +inf, got {self.psnr_db}")


def psnr(a, b, data_range=1.0):
    """Peak signal-to-noise ratio in dB; ``math.inf`` when the images are equal."""
    a = check_image(a, "a")
    b = check_image(b, "b")
    check_same_shape(a, b)
    if data_range <= 0:
        raise ValidationError("data_range must be positive")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(data_range**2 / mse)


def _gaussian_window(size=SSIM_WINDOW, sigma=SSIM_SIGMA):
    ax = np.arange(size, dtype=np.float64) - (size - 1) / 2.0
    g = np.exp(-(ax**2) / (2.0 * sigma**2))
    g /= g.sum()
    return g


def _filter_valid(img, g):
    # separable 'valid' correlation
    win = np.lib.stride_tricks.sliding_window_view(img, len(g), axis=0)
    rows = win @ g
    win = np.lib.stride_tricks.sliding_window_view(rows, len(g), axis=1)
    return win @ g


def ssim_map(a, b, data_range=1.0):
    """Local SSIM values over every fully-covered 11x11 window position."""
    a = check_image(a, "a")
    b = check_image(b, "b")
    check_same_shape(a, b)
    if a.shape[0] < SSIM_WINDOW or a.shape[1] < SSIM_WINDOW:
        raise ValidationError(
            f"ssim needs images of at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {a.shape}"
        )
    if data_range <= 0:
        raise ValidationError("data_range must be positive")
    g = _gaussian_window()
    c1 = (SSIM_K1 * data_range) ** 2
    c2 = (SSIM_K2 * data_range) ** 2

    mu_a = _filter_valid(a, g)
    mu_b = _filter_valid(b, g)
    var_a = _filter_valid(a * a, g) - mu_a**2
    var_b = _filter_valid(b * b, g) - mu_b**2
    cov = _filter_valid(a * b, g) - mu_a * mu_b

    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a**2 + mu_b**2 + c1) * (var_a + var_b + c2)
    return num / den


def ssim(a, b, data_range=1.0):
    """Mean structural similarity with a Gaussian window (11x11, sigma 1.5)."""
    value = float(np.mean(ssim_map(a, b, data_range)))
    # round-off can push identical inputs a hair above 1
    return min(1.0, max(-1.0, value))


def accuracy(preds, labels):
    preds = list(preds)
    labels = list(labels)
    if len(preds) != len(labels):
        raise ValidationError(f"length mismatch: {len(preds)} predictions vs {len(labels)} labels")
    if not preds:
        raise ValidationError("accuracy of an empty prediction set is undefined")
    hits = sum(1 for p, t in zip(preds, labels) if p == t)
    return hits / len(preds)


def relative_improvement(baseline_acc, enhanced_acc):
    """Percent change of ``enhanced_acc`` relative to ``baseline_acc``."""
    if baseline_acc <= 0:
        raise ValidationError("baseline accuracy must be positive for a relative improvement")
    return 100.0 * (enhanced_acc - baseline_acc) / baseline_acc


def absolute_improvement(baseline_acc, enhanced_acc):
    """Accuracy change in percentage points."""
    return 100.0 * (enhanced_acc - baseline_acc)


def image_report(sr, reference, context="", data_range=1.0):
    return MetricReport(
        psnr_db=psnr(sr, reference, data_range),
        ssim=ssim(sr, reference, data_range),
        context=context,
    )
