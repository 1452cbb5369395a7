"""Dataset ingestion, synthetic data generation and protected output.

On-disk layout::

    root/{train,test}/images/*.png   # 8- or 16-bit PNG
    root/{train,test}/masks/*.png    # 8-bit PNG, 0/255
    root/train/deltas/<id>.f32       # optional raw perturbation sidecars
    root/manifest.json

Protected images default to 16-bit PNG: the adaptive texture budget can
drop below one 8-bit step, so 8-bit storage would silently erase it.
Sidecars are header-free little-endian float32, row-major, with shapes
recorded in the manifest.
"""

from __future__ import annotations

import json
import math
import warnings
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path

import cv2
import numpy as np

from .core import RngSeed, Sample
from .errors import ConfigurationError, DimensionError, IngestionError
from .perturb import ProtectedSample, ProtectorState

MASK_THRESHOLD = 127  # 8-bit mask values above this are foreground


def parse_budget(text) -> float:
    """Parse a perturbation budget given as a float or rational string."""
    if isinstance(text, (int, float)):
        return float(text)
    return float(Fraction(text))


def format_budget(value: float) -> str:
    """Render a budget as 'k/255' when it is one, else as a plain float."""
    k = value * 255.0
    if abs(k - round(k)) < 1e-9 and round(k) != 0:
        return f"{round(k)}/255"
    return repr(value)


# ---------------------------------------------------------------- loading


@dataclass(frozen=True)
class DatasetManifest:
    """Explicit file pairing for one split of a dataset on disk."""

    root: str
    pairs: tuple  # of (image_file, mask_file, sample_id)
    split: str = "train"
    channels: int | None = None
    image_size: int | None = None


def _read_image(path: Path) -> np.ndarray:
    arr = cv2.imread(str(path), cv2.IMREAD_UNCHANGED)
    if arr is None:
        raise IngestionError(f"cannot read image {path}")
    if arr.dtype == np.uint8:
        out = arr.astype(np.float32) / 255.0
    elif arr.dtype == np.uint16:
        out = arr.astype(np.float32) / 65535.0
    else:
        raise IngestionError(f"unsupported image dtype {arr.dtype} in {path}")
    if out.ndim == 3:
        if out.shape[2] == 4:
            out = out[..., :3]
        out = out[..., ::-1]  # BGR -> RGB
    else:
        out = out[..., None]
    return np.ascontiguousarray(out)


def _read_mask(path: Path) -> np.ndarray:
    arr = cv2.imread(str(path), cv2.IMREAD_UNCHANGED)
    if arr is None:
        raise IngestionError(f"cannot read mask {path}")
    if arr.ndim != 2:
        raise IngestionError(f"mask must be single-channel: {path}")
    if arr.dtype == np.uint16:
        arr = (arr // 257).astype(np.uint8)
    return (arr > MASK_THRESHOLD).astype(np.uint8)


def load_dataset(manifest: DatasetManifest) -> list[Sample]:
    """Load and normalize one split according to its manifest."""
    root = Path(manifest.root)
    samples = []
    for image_file, mask_file, sample_id in manifest.pairs:
        img_path = root / image_file
        mask_path = root / mask_file
        if not img_path.exists():
            raise IngestionError(f"missing image file {img_path}")
        if not mask_path.exists():
            raise IngestionError(f"missing mask file {mask_path}")
        image = _read_image(img_path)
        mask = _read_mask(mask_path)
        size = manifest.image_size
        if size is not None and (image.shape[0] != size or image.shape[1] != size):
            chans = image.shape[2]
            image = cv2.resize(image, (size, size), interpolation=cv2.INTER_LINEAR)
            image = np.clip(image.reshape(size, size, chans), 0.0, 1.0)
            mask = cv2.resize(mask, (size, size), interpolation=cv2.INTER_NEAREST)
        if image.shape[:2] != mask.shape:
            raise IngestionError(
                f"image/mask size mismatch for {sample_id}: "
                f"{image.shape[:2]} vs {mask.shape}"
            )
        if manifest.channels is not None and image.shape[2] != manifest.channels:
            raise IngestionError(
                f"{sample_id}: expected {manifest.channels} channels, got {image.shape[2]}"
            )
        samples.append(Sample(image.astype(np.float32), mask, sample_id))
    return samples


def manifest_for_split(root, split: str, image_size=None, channels=None) -> DatasetManifest:
    """Scan the standard layout and pair images with same-name masks."""
    base = Path(root) / split
    img_dir = base / "images"
    if not img_dir.is_dir():
        raise IngestionError(f"missing split directory {img_dir}")
    pairs = []
    for img in sorted(img_dir.iterdir()):
        if img.suffix.lower() != ".png":
            continue
        mask = base / "masks" / img.name
        if not mask.exists():
            raise IngestionError(f"missing mask file {mask}")
        pairs.append(
            (str(img.relative_to(root)), str(mask.relative_to(root)), img.stem)
        )
    if not pairs:
        raise IngestionError(f"no images found under {img_dir}")
    return DatasetManifest(
        root=str(root),
        pairs=tuple(pairs),
        split=split,
        channels=channels,
        image_size=image_size,
    )


def load_split(root, split: str, image_size=None) -> list[Sample]:
    return load_dataset(manifest_for_split(root, split, image_size=image_size))


# ---------------------------------------------------------------- synthesis


@dataclass(frozen=True)
class SynthSpec:
    """Random segmentation scenes with contour and texture cues.

    Each scene is one smooth shape (ellipse or Fourier-bumped blob) whose
    interior carries a high-frequency grating and a brightness offset
    over a low-frequency background grating. Frequencies are in cycles
    per image width; contrast and frequency are sampled per sample from
    the given ranges.
    """

    n_samples: int = 200
    size: int = 64
    shape_family: str = "blobs"  # "blobs" | "ellipses"
    interior_freq: tuple = (8.0, 14.0)
    background_freq: tuple = (2.0, 5.0)
    texture_amplitude: float = 0.08
    boundary_contrast: tuple = (0.10, 0.25)
    noise_level: float = 0.005
    train_fraction: float = 0.8
    seed: RngSeed = field(default_factory=lambda: RngSeed(0))

    def __post_init__(self):
        if self.n_samples < 1:
            raise ConfigurationError(f"n_samples must be >= 1, got {self.n_samples}")
        if self.size < 16:
            raise ConfigurationError(f"size must be >= 16, got {self.size}")
        if self.shape_family not in ("blobs", "ellipses"):
            raise ConfigurationError(f"unknown shape family {self.shape_family!r}")


def _grating(size, freq, angle, phase):
    r, c = np.meshgrid(np.arange(size), np.arange(size), indexing="ij")
    axis = math.cos(angle) * c + math.sin(angle) * r
    return np.sin(2.0 * math.pi * freq * axis / size + phase)


def _random_mask(spec: SynthSpec, rng) -> np.ndarray:
    size = spec.size
    r, c = np.meshgrid(np.arange(size), np.arange(size), indexing="ij")
    for _ in range(64):
        cy, cx = rng.uniform(0.3 * size, 0.7 * size, size=2)
        base = rng.uniform(0.16, 0.30) * size
        dy, dx = r - cy, c - cx
        dist = np.hypot(dy, dx)
        phi = np.arctan2(dy, dx)
        radius = np.full_like(phi, base)
        if spec.shape_family == "blobs":
            for k in (2, 3, 4):
                amp = rng.uniform(0.0, 0.15)
                radius = radius + base * amp * np.cos(k * phi + rng.uniform(0, 2 * math.pi))
        else:
            squash = rng.uniform(0.6, 1.0)
            theta = rng.uniform(0, math.pi)
            du = np.cos(theta) * dx + np.sin(theta) * dy
            dv = -np.sin(theta) * dx + np.cos(theta) * dy
            dist = np.hypot(du, dv / squash)
        mask = (dist <= radius).astype(np.uint8)
        frac = mask.mean()
        if 0.05 <= frac <= 0.60:
            return mask
    raise ConfigurationError("could not sample a mask with 5-60% foreground")


def generate_synthetic(spec: SynthSpec) -> tuple[list[Sample], list[Sample]]:
    """Deterministic synthetic dataset, split 80/20 by index."""
    rng = spec.seed.rng()
    samples = []
    for i in range(spec.n_samples):
        mask = _random_mask(spec, rng)
        bg_level = rng.uniform(0.35, 0.50)
        offset = rng.uniform(*spec.boundary_contrast)
        bg = bg_level + spec.texture_amplitude * _grating(
            spec.size,
            rng.uniform(*spec.background_freq),
            rng.uniform(0, math.pi),
            rng.uniform(0, 2 * math.pi),
        )
        fg = bg_level + offset + spec.texture_amplitude * _grating(
            spec.size,
            rng.uniform(*spec.interior_freq),
            rng.uniform(0, math.pi),
            rng.uniform(0, 2 * math.pi),
        )
        image = np.where(mask.astype(bool), fg, bg)
        if spec.noise_level > 0:
            image = image + rng.normal(0.0, spec.noise_level, size=image.shape)
        image = np.clip(image, 0.0, 1.0).astype(np.float32)[..., None]
        samples.append(Sample(image, mask, f"synth_{i:04d}"))
    n_train = round(spec.train_fraction * spec.n_samples)
    return samples[:n_train], samples[n_train:]


# ---------------------------------------------------------------- saving


def _quantize(image: np.ndarray, bit_depth: int) -> np.ndarray:
    if bit_depth == 16:
        return np.round(image.astype(np.float64) * 65535.0).astype(np.uint16)
    return np.round(image.astype(np.float64) * 255.0).astype(np.uint8)


def _write_png(path: Path, arr: np.ndarray) -> None:
    if arr.ndim == 3 and arr.shape[2] == 3:
        arr = np.ascontiguousarray(arr[..., ::-1])  # RGB -> BGR
    elif arr.ndim == 3 and arr.shape[2] == 1:
        arr = arr[..., 0]
    if not cv2.imwrite(str(path), arr):
        raise IngestionError(f"failed to write {path}")


def write_split(root, split: str, samples: list[Sample], bit_depth: int = 16) -> list[str]:
    """Write one split in the standard layout; returns sample ids."""
    base = Path(root) / split
    (base / "images").mkdir(parents=True, exist_ok=True)
    (base / "masks").mkdir(parents=True, exist_ok=True)
    ids = []
    for s in samples:
        _write_png(base / "images" / f"{s.sample_id}.png", _quantize(s.image, bit_depth))
        _write_png(base / "masks" / f"{s.sample_id}.png", (s.mask * 255).astype(np.uint8))
        ids.append(s.sample_id)
    return ids


def _write_manifest(root, payload: dict) -> dict:
    path = Path(root) / "manifest.json"
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
    return payload


def save_dataset(
    out_root,
    train: list[Sample],
    test: list[Sample],
    bit_depth: int = 16,
    extra_meta: dict | None = None,
) -> dict:
    """Write a clean dataset (both splits) plus its manifest."""
    Path(out_root).mkdir(parents=True, exist_ok=True)
    train_ids = write_split(out_root, "train", train, bit_depth)
    test_ids = write_split(out_root, "test", test, bit_depth)
    first = train[0] if train else test[0]
    payload = {
        "format": "segshield-dataset",
        "bit_depth": bit_depth,
        "image_size": int(first.image.shape[0]),
        "channels": int(first.image.shape[2]),
        "splits": {"train": train_ids, "test": test_ids},
    }
    if extra_meta:
        payload.update(extra_meta)
    return _write_manifest(out_root, payload)


def save_protected(
    records: list[ProtectedSample],
    state: ProtectorState,
    out_root,
    bit_depth: int = 16,
    test_samples: list[Sample] | None = None,
    save_deltas: bool = True,
    override_precision: bool = False,
    extra_meta: dict | None = None,
) -> dict:
    """Write a protected training split (plus a clean test split).

    Refuses 8-bit output when the smallest adaptive texture budget
    (epsilon * floor) is below one 8-bit step, unless overridden.
    """
    if not records:
        raise ConfigurationError("save_protected needs at least one sample")
    if bit_depth not in (8, 16):
        raise ConfigurationError(f"bit_depth must be 8 or 16, got {bit_depth}")
    if bit_depth == 8 and state.kind == "umed" and state.epsilon * state.floor < 1.0 / 255.0:
        msg = (
            f"8-bit output would quantize texture perturbations to zero "
            f"(epsilon*floor = {state.epsilon * state.floor:.6f} < 1/255)"
        )
        if not override_precision:
            raise ConfigurationError(msg + "; pass override_precision=True to force")
        warnings.warn(msg)

    Path(out_root).mkdir(parents=True, exist_ok=True)
    train_samples = [Sample(r.image_p, r.mask, r.sample_id) for r in records]
    train_ids = write_split(out_root, "train", train_samples, bit_depth)
    test_ids = []
    if test_samples:
        test_ids = write_split(out_root, "test", test_samples, bit_depth)

    shape = list(records[0].image_p.shape)
    if save_deltas:
        delta_dir = Path(out_root) / "train" / "deltas"
        delta_dir.mkdir(parents=True, exist_ok=True)
        for r in records:
            total = (r.delta_c.values + r.delta_t.values).astype("<f4")
            (delta_dir / f"{r.sample_id}.f32").write_bytes(total.tobytes())

    payload = {
        "format": "segshield-dataset",
        "bit_depth": bit_depth,
        "image_size": shape[0],
        "channels": shape[2],
        "splits": {"train": train_ids, "test": test_ids},
        "protector": {
            "kind": state.kind,
            "epsilon": format_budget(state.epsilon),
            "band_width": state.band.band_width,
            "lbp": {"neighbors": state.lbp.neighbors, "radius": state.lbp.radius},
            "floor": state.floor,
        },
        "deltas": (
            {"dtype": "<f4", "order": "row-major", "shape": shape} if save_deltas else None
        ),
    }
    if extra_meta:
        payload.update(extra_meta)
    return _write_manifest(out_root, payload)


def load_delta(root, sample_id: str, shape) -> np.ndarray:
    """Read one raw float32 perturbation sidecar."""
    path = Path(root) / "train" / "deltas" / f"{sample_id}.f32"
    if not path.exists():
        raise IngestionError(f"missing delta sidecar {path}")
    arr = np.frombuffer(path.read_bytes(), dtype="<f4")
    expected = int(np.prod(shape))
    if arr.size != expected:
        raise DimensionError(f"sidecar {path} has {arr.size} values, expected {expected}")
    return arr.reshape(shape).copy()
