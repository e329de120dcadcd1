"""Input validation helpers shared by the estimators and functional API."""

import numpy as np


class ValidationError(ValueError):
    """Raised when inputs violate a documented precondition."""


def check_image(img, name="img", min_size=1, unit_range=False):
    """Return ``img`` as a finite 2D float64 array.

    Parameters
    ----------
    img : array-like
        Candidate image.
    name : str
        Used in error messages.
    min_size : int
        Minimum edge length along both axes.
    unit_range : bool
        If True, also require all values to lie in [0, 1].
    """
    arr = np.asarray(img, dtype=np.float64)
    if arr.ndim != 2:
        raise ValidationError(f"{name} must be 2D, got shape {arr.shape}")
    if arr.shape[0] < min_size or arr.shape[1] < min_size:
        raise ValidationError(
            f"{name} must be at least {min_size}x{min_size}, got {arr.shape[0]}x{arr.shape[1]}"
        )
    if not np.all(np.isfinite(arr)):
        raise ValidationError(f"{name} contains non-finite values")
    if unit_range and (arr.min() < 0.0 or arr.max() > 1.0):
        raise ValidationError(f"{name} values must lie in [0, 1]")
    return arr


def check_same_shape(a, b):
    if a.shape != b.shape:
        raise ValidationError(f"shape mismatch: {a.shape} vs {b.shape}")


def check_scale(r, allowed=None):
    if int(r) != r or r < 2:
        raise ValidationError(f"scale factor must be an integer >= 2, got {r}")
    if allowed is not None and r not in allowed:
        raise ValidationError(f"scale factor must be one of {sorted(allowed)}, got {r}")
    return int(r)


def check_image_stack(X, name="X"):
    """Accept a single image, a 3D stack, or a sequence of same-shaped images."""
    if isinstance(X, np.ndarray) and X.ndim == 2:
        return X[None].astype(np.float64)
    arr = np.asarray(X, dtype=np.float64) if not isinstance(X, list) else None
    if arr is None:
        arr = np.stack([np.asarray(x, dtype=np.float64) for x in X])
    if arr.ndim != 3:
        raise ValidationError(f"{name} must be a stack of 2D images, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValidationError(f"{name} contains non-finite values")
    return arr
