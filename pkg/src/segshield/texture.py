"""Local binary patterns and the per-pixel texture-intensity map.

The intensity map scales the texture perturbation budget: busy regions
get the full budget, flat regions get a floor fraction of it. Texture is
measured with the non-uniformity of the 8-neighbor LBP code (number of
0/1 transitions around the ring), which is invariant to any strictly
increasing intensity transform.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
from scipy.ndimage import uniform_filter

from .core import to_single_channel, validate_mask
from .errors import ConfigurationError, DimensionError

# ring offsets (drow, dcol), clockwise starting at the east neighbor
_RING = [(0, 1), (1, 1), (1, 0), (1, -1), (0, -1), (-1, -1), (-1, 0), (-1, 1)]


@dataclass(frozen=True)
class LbpConfig:
    """8 neighbors on the unit ring; a neighbor >= center sets its bit."""

    neighbors: int = 8
    radius: int = 1

    def __post_init__(self):
        if (self.neighbors, self.radius) != (8, 1):
            raise ConfigurationError("only the 8-neighbor, radius-1 ring is supported")


def lbp_codes(gray: np.ndarray, cfg: LbpConfig = LbpConfig()) -> np.ndarray:
    """Per-pixel LBP code in [0, 255] with replicate border padding.

    Bit k is set when the k-th ring neighbor (clockwise from east) is
    >= the center pixel. Comparisons run in float64 so that strictly
    increasing transforms of the input cannot flip a bit.
    """
    if gray.ndim == 3:
        gray = to_single_channel(gray)
    if gray.ndim != 2:
        raise DimensionError(f"lbp_codes expects (H, W), got shape {gray.shape}")
    g = np.pad(gray.astype(np.float64), 1, mode="edge")
    center = g[1:-1, 1:-1]
    codes = np.zeros(center.shape, dtype=np.uint8)
    for k, (dr, dc) in enumerate(_RING):
        nb = g[1 + dr : g.shape[0] - 1 + dr, 1 + dc : g.shape[1] - 1 + dc]
        codes |= ((nb >= center).astype(np.uint8)) << k
    return codes


def transition_counts(codes: np.ndarray) -> np.ndarray:
    """Number of 0<->1 transitions in each code's circular bit sequence."""
    bits = ((codes[..., None] >> np.arange(8)) & 1).astype(np.uint8)
    return (bits != np.roll(bits, -1, axis=-1)).sum(axis=-1).astype(np.uint8)


def texture_intensity_map(
    image: np.ndarray,
    interior: np.ndarray,
    cfg: LbpConfig = LbpConfig(),
    floor: float = 0.1,
) -> np.ndarray:
    """Per-pixel texture intensity in [0, 1], zero outside ``interior``.

    Raw intensity is the LBP transition count over the ring size,
    smoothed with a 3x3 mean filter, then affinely rescaled over the
    interior so its max maps to 1 and its min to ``floor``. A constant
    (or empty) interior maps to ``floor`` (or all zeros, with a warning).
    """
    if not 0.0 <= floor < 1.0:
        raise ConfigurationError(f"floor must be in [0, 1), got {floor}")
    interior = validate_mask(interior, "interior")
    if image.shape[:2] != interior.shape:
        raise DimensionError(
            f"image spatial shape {image.shape[:2]} != interior shape {interior.shape}"
        )
    if not interior.any():
        warnings.warn("texture_intensity_map: empty interior, returning zeros")
        return np.zeros(interior.shape, dtype=np.float64)

    raw = transition_counts(lbp_codes(image, cfg)) / float(cfg.neighbors)
    smooth = uniform_filter(raw.astype(np.float64), size=3, mode="nearest")

    inside = interior.astype(bool)
    lo, hi = smooth[inside].min(), smooth[inside].max()
    out = np.zeros(interior.shape, dtype=np.float64)
    if hi > lo:
        # ratio before product so the interior max lands on exactly 1.0
        ratio = (smooth[inside] - lo) / (hi - lo)
        out[inside] = floor + (1.0 - floor) * ratio
    else:
        out[inside] = floor
    return out
