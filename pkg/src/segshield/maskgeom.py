"""Contour-band and interior maps derived from a ground-truth ROI mask.

The contour band is the morphological gradient of the mask under a
square structuring element: ``dilate(mask) - erode(mask)``. It straddles
the ROI boundary symmetrically. The interior map is the rest of the ROI,
``(1 - band) * mask``. Together they partition the ROI pixels that the
two perturbators are allowed to touch.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.ndimage import maximum_filter, minimum_filter

from .core import validate_mask
from .errors import ConfigurationError, DimensionError


@dataclass(frozen=True)
class ContourBandSpec:
    """Half-width of the band; the structuring element is a (2w+1) square."""

    band_width: int = 1

    def __post_init__(self):
        if self.band_width < 1:
            raise ConfigurationError(f"band_width must be >= 1, got {self.band_width}")


def extract_contour_band(mask: np.ndarray, spec: ContourBandSpec = ContourBandSpec()) -> np.ndarray:
    """Binary map of the band straddling the ROI boundary.

    Uses replicate border padding, so an all-zero or all-one mask yields
    an empty band (no phantom boundary at the image edge).
    """
    mask = validate_mask(mask)
    h, w = mask.shape
    if spec.band_width >= min(h, w) / 2:
        raise ConfigurationError(
            f"band_width {spec.band_width} degenerate for a {h}x{w} mask"
        )
    size = 2 * spec.band_width + 1
    # mode="nearest" is replicate padding
    dil = maximum_filter(mask, size=size, mode="nearest")
    ero = minimum_filter(mask, size=size, mode="nearest")
    return (dil - ero).astype(np.uint8)


def interior_map(mask: np.ndarray, contour: np.ndarray) -> np.ndarray:
    """ROI pixels excluding the contour band: ``(1 - contour) * mask``."""
    mask = validate_mask(mask)
    contour = validate_mask(contour, "contour")
    if mask.shape != contour.shape:
        raise DimensionError(
            f"mask shape {mask.shape} != contour shape {contour.shape}"
        )
    return ((1 - contour) * mask).astype(np.uint8)
