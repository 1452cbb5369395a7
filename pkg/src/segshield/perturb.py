"""Contour and texture perturbators, their composition, and the EM baseline.

A protector state is either

* ``umed``: two trained generator networks. The contour generator's
  output is squashed to [-eps, eps] and masked to the contour band; the
  texture generator's output is clipped per pixel to the adaptive bound
  eps * texture_intensity * interior. Outside band and interior the
  protected image equals the original exactly.
* ``em``: a table of per-sample error-minimizing perturbations, each
  bounded by eps everywhere, grown by projected sign-gradient descent
  against a surrogate segmenter.

Both leave masks untouched.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np
import torch

from .core import (
    FLOAT_DTYPE,
    Perturbation,
    clip_interval,
    masked_mul,
    validate_image,
    validate_mask,
)
from .errors import ConfigurationError, DimensionError, MissingPerturbationError
from .maskgeom import ContourBandSpec, extract_contour_band, interior_map
from .nets import NetSpec, net_forward
from .texture import LbpConfig, texture_intensity_map

DEFAULT_EPSILON = 4.0 / 255.0


@dataclass
class ProtectorState:
    """Everything needed to protect a sample with one protector.

    ``umed`` states carry the two generators; ``em`` states carry the
    per-sample delta table. The geometry/texture config travels with the
    state so protection is reproducible from the state alone.
    """

    kind: str
    epsilon: float = DEFAULT_EPSILON
    band: ContourBandSpec = ContourBandSpec()
    lbp: LbpConfig = LbpConfig()
    floor: float = 0.1
    gen_contour: torch.nn.Module | None = None
    gen_contour_spec: NetSpec | None = None
    gen_texture: torch.nn.Module | None = None
    gen_texture_spec: NetSpec | None = None
    deltas: dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in ("umed", "em", "none"):
            raise ConfigurationError(f"unknown protector kind {self.kind!r}")
        if not 0.0 < self.epsilon < 1.0:
            raise ConfigurationError(f"epsilon must be in (0, 1), got {self.epsilon}")


@dataclass
class ProtectedSample:
    """Protected image, untouched mask and the two perturbation fields."""

    image_p: np.ndarray
    mask: np.ndarray
    delta_c: Perturbation
    delta_t: Perturbation
    sample_id: str
    protector: str


def compute_regions(mask: np.ndarray, image: np.ndarray, state: ProtectorState):
    """Contour band, interior map and texture intensity for one sample."""
    y_c = extract_contour_band(mask, state.band)
    y_t = interior_map(mask, y_c)
    if y_t.any():
        x_t = texture_intensity_map(image, y_t, state.lbp, state.floor)
    else:
        x_t = np.zeros_like(y_t, dtype=np.float64)
    return y_c, y_t, x_t


def _generator_field(model, image: np.ndarray) -> np.ndarray:
    """Raw (H, W, C_out) output of a generator for one image."""
    out = net_forward(model, image[None].astype(FLOAT_DTYPE))
    return out[0].astype(FLOAT_DTYPE)


def contour_perturbation(x: np.ndarray, y: np.ndarray, state: ProtectorState) -> Perturbation:
    """Bounded perturbation confined to the contour band of ``y``."""
    _require_umed(state, x, y)
    y_c = extract_contour_band(y, state.band)
    raw = _generator_field(state.gen_contour, x)
    squashed = state.epsilon * np.tanh(raw)
    values = clip_interval(masked_mul(squashed, y_c), -state.epsilon, state.epsilon)
    budget = (state.epsilon * y_c).astype(FLOAT_DTYPE)
    return Perturbation(values.astype(FLOAT_DTYPE), budget)


def texture_perturbation(x: np.ndarray, y: np.ndarray, state: ProtectorState) -> Perturbation:
    """Perturbation inside the ROI interior under the adaptive texture bound."""
    _require_umed(state, x, y)
    y_c, y_t, x_t = compute_regions(y, x, state)
    budget = (state.epsilon * x_t * y_t).astype(FLOAT_DTYPE)
    if not y_t.any():
        warnings.warn("texture_perturbation: empty ROI interior, returning zeros")
        values = np.zeros_like(x, dtype=FLOAT_DTYPE)
        return Perturbation(values, budget)
    raw = _generator_field(state.gen_texture, x)
    squashed = state.epsilon * np.tanh(raw)
    values = clip_interval(squashed, -budget, budget)
    return Perturbation(values.astype(FLOAT_DTYPE), budget)


def protect_image(
    x: np.ndarray, y: np.ndarray, state: ProtectorState, sample_id: str = ""
) -> ProtectedSample:
    """Compose the perturbations for one sample and clip into [0, 1]."""
    x = validate_image(x)
    y = validate_mask(y)
    if x.shape[:2] != y.shape:
        raise DimensionError(f"image {x.shape[:2]} vs mask {y.shape}")

    if state.kind == "umed":
        delta_c = contour_perturbation(x, y, state)
        delta_t = texture_perturbation(x, y, state)
    elif state.kind == "em":
        if sample_id not in state.deltas:
            raise MissingPerturbationError(f"no stored perturbation for sample {sample_id!r}")
        values = state.deltas[sample_id].astype(FLOAT_DTYPE)
        if values.shape != x.shape:
            raise DimensionError(f"stored delta {values.shape} vs image {x.shape}")
        budget = np.full(y.shape, state.epsilon, dtype=FLOAT_DTYPE)
        delta_c = Perturbation(values, budget)
        delta_t = Perturbation(np.zeros_like(values), np.zeros_like(budget))
    else:  # "none": identity protector
        zeros = np.zeros_like(x, dtype=FLOAT_DTYPE)
        zb = np.zeros(y.shape, dtype=FLOAT_DTYPE)
        delta_c = Perturbation(zeros, zb)
        delta_t = Perturbation(zeros.copy(), zb.copy())

    image_p = clip_interval(x + delta_c.values + delta_t.values, 0.0, 1.0)
    return ProtectedSample(
        image_p=image_p.astype(FLOAT_DTYPE),
        mask=y.copy(),
        delta_c=delta_c,
        delta_t=delta_t,
        sample_id=sample_id,
        protector=state.kind,
    )


def em_update(
    batch,
    surrogate: torch.nn.Module,
    state: ProtectorState,
    steps: int = 10,
    step_size: float | None = None,
):
    """Grow error-minimizing deltas for a batch with K projected steps.

    Each step moves every delta by ``-step_size * sign(grad)`` of the
    segmentation loss and re-projects onto the eps ball. Deltas persist
    in ``state.deltas`` keyed by sample id.
    """
    from .train import seg_loss  # deferred: train depends on this module

    if state.kind != "em":
        raise ConfigurationError(f"em_update needs an em state, got {state.kind!r}")
    if step_size is None:
        step_size = state.epsilon / 5.0
    if steps == 0 or not batch:
        return state

    x = torch.from_numpy(np.stack([s.image.transpose(2, 0, 1) for s in batch]))
    ymask = torch.from_numpy(
        np.stack([s.mask[None].astype(np.float32) for s in batch])
    )
    deltas = np.stack(
        [
            state.deltas.get(s.sample_id, np.zeros_like(s.image, dtype=FLOAT_DTYPE))
            .transpose(2, 0, 1)
            for s in batch
        ]
    )
    delta = torch.from_numpy(deltas)
    eps = state.epsilon

    surrogate.eval()
    for _ in range(steps):
        delta.requires_grad_(True)
        loss = seg_loss(surrogate(x + delta), ymask)
        (grad,) = torch.autograd.grad(loss, delta)
        with torch.no_grad():
            delta = torch.clamp(delta - step_size * grad.sign(), -eps, eps)
    for i, s in enumerate(batch):
        state.deltas[s.sample_id] = (
            delta[i].detach().numpy().transpose(1, 2, 0).astype(FLOAT_DTYPE)
        )
    return state


def _require_umed(state: ProtectorState, x: np.ndarray, y: np.ndarray):
    if state.kind != "umed":
        raise ConfigurationError(f"operation needs a umed state, got {state.kind!r}")
    if state.gen_contour is None or state.gen_texture is None:
        raise ConfigurationError("umed state is missing its generators")
    if x.shape[:2] != y.shape:
        raise DimensionError(f"image {x.shape[:2]} vs mask {y.shape}")


def umed_deltas_torch(
    x: torch.Tensor,
    band: torch.Tensor,
    tex_budget: torch.Tensor,
    gen_contour: torch.nn.Module,
    gen_texture: torch.nn.Module,
    epsilon: float,
):
    """Differentiable batched perturbations for the training loop.

    ``x`` is (N, C, H, W); ``band`` and ``tex_budget`` are (N, 1, H, W)
    precomputed from the clean masks. Gradients flow into both
    generators through the tanh squash and the clips.
    """
    delta_c = torch.clamp(epsilon * torch.tanh(gen_contour(x)) * band, -epsilon, epsilon)
    delta_t = torch.clamp(epsilon * torch.tanh(gen_texture(x)), -tex_budget, tex_budget)
    return delta_c, delta_t
