"""Foundational value types, clipping and masked arithmetic.

Images are float arrays of shape (H, W, C) with values in [0, 1],
C in {1, 3}. Binary maps are (H, W) uint8 arrays with values in {0, 1}.
Everything downstream builds on these two conventions plus the clip and
Hadamard-mask primitives below.

All randomness in the toolkit flows through generators derived from an
explicit :class:`RngSeed`; there is no global random state.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DimensionError

FLOAT_DTYPE = np.float32


@dataclass(frozen=True)
class RngSeed:
    """64-bit seed; identical seeds give identical sequences."""

    seed: int

    def __post_init__(self):
        if not 0 <= int(self.seed) < 2**64:
            raise ValueError(f"seed must fit in 64 bits, got {self.seed}")

    def rng(self) -> np.random.Generator:
        return np.random.default_rng(self.seed)

    def spawn(self, *tags: str) -> "RngSeed":
        """Derive an independent child seed from string tags.

        Deterministic: the same parent seed and tags always yield the
        same child. Used to hand distinct streams to dataset synthesis,
        parameter init, batch shuffling, etc.
        """
        ss = np.random.SeedSequence([self.seed] + [_tag_to_int(t) for t in tags])
        return RngSeed(int(ss.generate_state(1, dtype=np.uint64)[0]))


def _tag_to_int(tag: str) -> int:
    h = 2166136261
    for ch in tag.encode("utf-8"):
        h = ((h ^ ch) * 16777619) & 0xFFFFFFFF
    return h


@dataclass
class Sample:
    """One dataset item: an image, its binary ROI mask and a stable id."""

    image: np.ndarray
    mask: np.ndarray
    sample_id: str


@dataclass
class Perturbation:
    """Signed per-pixel field with a per-pixel magnitude budget.

    ``values`` has shape (H, W, C); ``budget`` has shape (H, W) and is
    shared across channels. The invariant |values[p, c]| <= budget[p]
    is established by construction (clipping) and can be re-checked
    with :meth:`check_budget`.
    """

    values: np.ndarray
    budget: np.ndarray

    def check_budget(self) -> float:
        """Return max over pixels of |value| - budget (<= 0 when valid)."""
        mag = np.abs(self.values).max(axis=-1)
        return float((mag - self.budget).max())


def validate_image(image: np.ndarray, name: str = "image") -> np.ndarray:
    """Check the (H, W, C) [0,1] contract and return a float view."""
    if image.ndim != 3:
        raise DimensionError(f"{name} must be (H, W, C), got shape {image.shape}")
    if image.shape[2] not in (1, 3):
        raise DimensionError(f"{name} must have 1 or 3 channels, got {image.shape[2]}")
    if image.dtype.kind != "f":
        raise DimensionError(f"{name} must be floating point, got {image.dtype}")
    lo, hi = float(image.min(initial=0.0)), float(image.max(initial=0.0))
    if lo < 0.0 or hi > 1.0:
        raise ValueError(f"{name} values outside [0, 1]: min={lo}, max={hi}")
    return image


def validate_mask(mask: np.ndarray, name: str = "mask") -> np.ndarray:
    """Check the (H, W) {0,1} contract and return a uint8 view."""
    if mask.ndim != 2:
        raise DimensionError(f"{name} must be (H, W), got shape {mask.shape}")
    vals = np.unique(mask)
    if not np.all(np.isin(vals, (0, 1))):
        raise ValueError(f"{name} must be binary, found values {vals[:8]}")
    return mask.astype(np.uint8, copy=False)


def clip_interval(values, lo, hi):
    """Elementwise clip of ``values`` into [lo, hi].

    ``lo``/``hi`` may be scalars or fields broadcastable to ``values``
    (a (H, W) bound map broadcasts across a trailing channel axis).
    """
    values = np.asarray(values)
    lo = _broadcast_bound(lo, values, "lo")
    hi = _broadcast_bound(hi, values, "hi")
    if np.any(np.asarray(lo) > np.asarray(hi)):
        raise ValueError("clip_interval requires lo <= hi elementwise")
    return np.clip(values, lo, hi)


def _broadcast_bound(bound, values, name):
    if np.isscalar(bound):
        return bound
    bound = np.asarray(bound)
    if bound.shape == values.shape:
        return bound
    # (H, W) bound against (H, W, C) values: share across channels
    if values.ndim == bound.ndim + 1 and bound.shape == values.shape[:-1]:
        return bound[..., None]
    raise DimensionError(
        f"{name} bound shape {bound.shape} does not match values shape {values.shape}"
    )


def masked_mul(field: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Hadamard product of a field with a binary map.

    The mask is (H, W) and broadcasts across a trailing channel axis of
    ``field``. Output is zero wherever the mask is zero.
    """
    field = np.asarray(field)
    mask = np.asarray(mask)
    if mask.ndim != 2:
        raise DimensionError(f"mask must be (H, W), got shape {mask.shape}")
    if field.shape[:2] != mask.shape:
        raise DimensionError(
            f"field spatial shape {field.shape[:2]} != mask shape {mask.shape}"
        )
    m = mask.astype(field.dtype, copy=False)
    if field.ndim == 3:
        m = m[..., None]
    return field * m


def to_single_channel(image: np.ndarray) -> np.ndarray:
    """Reduce (H, W, C) to (H, W). 3-channel input uses BT.601 luminance."""
    if image.ndim == 2:
        return image
    if image.shape[2] == 1:
        return image[..., 0]
    if image.shape[2] == 3:
        r, g, b = image[..., 0], image[..., 1], image[..., 2]
        return 0.299 * r + 0.587 * g + 0.114 * b
    raise DimensionError(f"cannot reduce {image.shape[2]} channels to luminance")
