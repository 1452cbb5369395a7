"""Loss functions and the three training loops.

* ``train_umed``: alternating bi-level optimization. Most epochs update
  the two perturbation generators to *minimize* the surrogate's
  segmentation loss on protected images (making the perturbations an
  easy shortcut); every ``schedule_modulus``-th epoch updates the
  surrogate instead, with the generators frozen.
* ``train_em``: the error-minimizing baseline. Alternates one surrogate
  epoch with a full sweep of projected sign-gradient updates on the
  per-sample deltas.
* ``train_exploiter`` / ``train_exploiter_adversarial``: plain
  supervised training of a segmenter on a (possibly protected) dataset,
  optionally on worst-case bounded perturbations of every batch.

All loops are deterministic given their config seed: batch order comes
from a dedicated numpy generator and parameter init from spawned seeds.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, replace

import numpy as np
import torch

from .core import RngSeed, Sample
from .errors import ConfigurationError, NonFiniteLossError
from .maskgeom import ContourBandSpec
from .nets import NetSpec, build_model
from .perturb import (
    DEFAULT_EPSILON,
    ProtectorState,
    compute_regions,
    em_update,
    umed_deltas_torch,
)
from .texture import LbpConfig

GRAD_CLIP_NORM = 5.0
DICE_SMOOTH = 1e-6


@dataclass(frozen=True)
class TrainConfig:
    """Optimizer and schedule settings for one training run.

    Defaults match the protector recipe (100 epochs, batch 16). Use
    :meth:`exploiter_defaults` for the exploiter recipe (150 epochs,
    batch 32). All trainers use Adam at a fixed rate.
    """

    epochs: int = 100
    batch_size: int = 16
    lr_surrogate: float = 1e-4
    lr_generator: float = 1e-4
    lr_exploiter: float = 1e-4
    schedule_modulus: int = 5
    seed: RngSeed = RngSeed(0)

    @classmethod
    def exploiter_defaults(cls, **overrides) -> "TrainConfig":
        base = cls(epochs=150, batch_size=32)
        return replace(base, **overrides)

    def __post_init__(self):
        if self.epochs < 1:
            raise ConfigurationError(f"epochs must be >= 1, got {self.epochs}")
        if min(self.lr_surrogate, self.lr_generator, self.lr_exploiter) <= 0:
            raise ConfigurationError("learning rates must be positive")
        if self.schedule_modulus < 2:
            raise ConfigurationError("schedule_modulus must be >= 2")


def _as_tensor(value, like=None):
    if isinstance(value, torch.Tensor):
        t = value
    else:
        t = torch.from_numpy(np.asarray(value))
    if like is not None:
        t = t.to(like.dtype)
    elif not t.dtype.is_floating_point:
        t = t.float()
    return t


def dice_loss(logits, mask) -> torch.Tensor:
    """Soft dice loss over all elements, smoothing 1e-6."""
    logits = _as_tensor(logits)
    y = _as_tensor(mask, like=logits)
    p = torch.sigmoid(logits)
    num = 2.0 * (p * y).sum() + DICE_SMOOTH
    den = p.sum() + y.sum() + DICE_SMOOTH
    return 1.0 - num / den


def seg_loss(logits, mask) -> torch.Tensor:
    """Mean binary cross-entropy plus dice loss, equally weighted."""
    logits = _as_tensor(logits)
    y = _as_tensor(mask, like=logits)
    ce = torch.nn.functional.binary_cross_entropy_with_logits(logits, y)
    return ce + dice_loss(logits, y)


def _stack_images(samples, idx) -> torch.Tensor:
    arr = np.stack([samples[i].image.transpose(2, 0, 1) for i in idx])
    return torch.from_numpy(arr)


def _stack_masks(samples, idx) -> torch.Tensor:
    arr = np.stack([samples[i].mask[None].astype(np.float32) for i in idx])
    return torch.from_numpy(arr)


def _epoch_batches(n, batch_size, rng):
    order = rng.permutation(n)
    for start in range(0, n, batch_size):
        yield order[start : start + batch_size]


def _check_finite(loss, **diag):
    val = float(loss.detach())
    if not math.isfinite(val):
        raise NonFiniteLossError(f"non-finite training loss {val}", diagnostics=diag)
    return val


def _step(optimizer, params, loss):
    optimizer.zero_grad(set_to_none=True)
    loss.backward()
    torch.nn.utils.clip_grad_norm_(params, GRAD_CLIP_NORM)
    optimizer.step()


def write_log(path, entries) -> None:
    """Append-only JSON-lines training log."""
    with open(path, "w", encoding="utf-8") as fh:
        for entry in entries:
            fh.write(json.dumps(entry) + "\n")


def train_umed(
    dataset: list[Sample],
    cfg: TrainConfig,
    surrogate_spec: NetSpec | None = None,
    gen_contour_spec: NetSpec | None = None,
    gen_texture_spec: NetSpec | None = None,
    band: ContourBandSpec = ContourBandSpec(),
    lbp: LbpConfig = LbpConfig(),
    epsilon: float = DEFAULT_EPSILON,
    floor: float = 0.1,
):
    """Alternately optimize the generators and the surrogate.

    Returns ``(state, log)``: a ``umed`` protector state holding the
    trained generators, and one log entry per epoch.
    """
    if not dataset:
        raise ConfigurationError("train_umed needs a nonempty dataset")
    channels = dataset[0].image.shape[2]
    if surrogate_spec is None:
        surrogate_spec = NetSpec(arch="unet", in_channels=channels)
    if gen_contour_spec is None:
        gen_contour_spec = NetSpec(
            arch="unet_cdc_encoder", in_channels=channels, out_channels=channels
        )
    if gen_texture_spec is None:
        gen_texture_spec = NetSpec(arch="unet", in_channels=channels, out_channels=channels)

    surrogate = build_model(surrogate_spec, cfg.seed.spawn("umed", "surrogate"))
    gen_c = build_model(gen_contour_spec, cfg.seed.spawn("umed", "gen_contour"))
    gen_t = build_model(gen_texture_spec, cfg.seed.spawn("umed", "gen_texture"))

    state = ProtectorState(
        kind="umed",
        epsilon=epsilon,
        band=band,
        lbp=lbp,
        floor=floor,
        gen_contour=gen_c,
        gen_contour_spec=gen_contour_spec,
        gen_texture=gen_t,
        gen_texture_spec=gen_texture_spec,
    )

    # region maps depend only on the clean data and config: compute once
    bands, budgets = [], []
    for s in dataset:
        y_c, y_t, x_t = compute_regions(s.mask, s.image, state)
        bands.append(y_c[None].astype(np.float32))
        budgets.append((epsilon * x_t * y_t)[None].astype(np.float32))
    band_arr = np.stack(bands)
    budget_arr = np.stack(budgets)

    opt_s = torch.optim.Adam(surrogate.parameters(), lr=cfg.lr_surrogate)
    opt_c = torch.optim.Adam(gen_c.parameters(), lr=cfg.lr_generator)
    opt_t = torch.optim.Adam(gen_t.parameters(), lr=cfg.lr_generator)

    rng = cfg.seed.spawn("umed", "batches").rng()
    log = []
    for epoch in range(1, cfg.epochs + 1):
        update_surrogate = epoch % cfg.schedule_modulus == 0
        losses = []
        for bi, idx in enumerate(_epoch_batches(len(dataset), cfg.batch_size, rng)):
            x = _stack_images(dataset, idx)
            y = _stack_masks(dataset, idx)
            b = torch.from_numpy(band_arr[idx])
            t = torch.from_numpy(budget_arr[idx])

            if update_surrogate:
                with torch.no_grad():
                    dc, dt = umed_deltas_torch(x, b, t, gen_c, gen_t, epsilon)
                xp = torch.clamp(x + dc + dt, 0.0, 1.0)
                loss = seg_loss(surrogate(xp), y)
                losses.append(_check_finite(loss, epoch=epoch, batch=bi, component="surrogate"))
                _step(opt_s, surrogate.parameters(), loss)
            else:
                dc, dt = umed_deltas_torch(x, b, t, gen_c, gen_t, epsilon)
                xp = torch.clamp(x + dc + dt, 0.0, 1.0)
                loss = seg_loss(surrogate(xp), y)
                losses.append(_check_finite(loss, epoch=epoch, batch=bi, component="generators"))
                # one step on each generator from the same loss evaluation
                opt_c.zero_grad(set_to_none=True)
                opt_t.zero_grad(set_to_none=True)
                loss.backward()
                torch.nn.utils.clip_grad_norm_(gen_c.parameters(), GRAD_CLIP_NORM)
                torch.nn.utils.clip_grad_norm_(gen_t.parameters(), GRAD_CLIP_NORM)
                opt_c.step()
                opt_t.step()
        log.append(
            {
                "epoch": epoch,
                "split": "train",
                "loss": float(np.mean(losses)),
                "updated_component": "surrogate" if update_surrogate else "generators",
            }
        )
    return state, log


def train_em(
    dataset: list[Sample],
    cfg: TrainConfig,
    surrogate_spec: NetSpec | None = None,
    epsilon: float = DEFAULT_EPSILON,
    rounds: int = 10,
    pgd_steps: int = 10,
    pgd_step_size: float | None = None,
):
    """Error-minimizing baseline: alternate surrogate epochs and delta sweeps."""
    if not dataset:
        raise ConfigurationError("train_em needs a nonempty dataset")
    channels = dataset[0].image.shape[2]
    if surrogate_spec is None:
        surrogate_spec = NetSpec(arch="unet", in_channels=channels)
    surrogate = build_model(surrogate_spec, cfg.seed.spawn("em", "surrogate"))
    state = ProtectorState(kind="em", epsilon=epsilon)
    opt = torch.optim.Adam(surrogate.parameters(), lr=cfg.lr_surrogate)
    rng = cfg.seed.spawn("em", "batches").rng()

    log = []
    for rnd in range(1, rounds + 1):
        losses = []
        surrogate.train()
        for bi, idx in enumerate(_epoch_batches(len(dataset), cfg.batch_size, rng)):
            x = _stack_images(dataset, idx)
            y = _stack_masks(dataset, idx)
            if state.deltas:
                d = np.stack(
                    [
                        state.deltas.get(
                            dataset[i].sample_id,
                            np.zeros_like(dataset[i].image),
                        ).transpose(2, 0, 1)
                        for i in idx
                    ]
                )
                x = torch.clamp(x + torch.from_numpy(d), 0.0, 1.0)
            loss = seg_loss(surrogate(x), y)
            losses.append(_check_finite(loss, round=rnd, batch=bi, component="surrogate"))
            _step(opt, surrogate.parameters(), loss)
        log.append(
            {
                "epoch": rnd,
                "split": "train",
                "loss": float(np.mean(losses)),
                "updated_component": "surrogate",
            }
        )
        for start in range(0, len(dataset), cfg.batch_size):
            em_update(
                dataset[start : start + cfg.batch_size],
                surrogate,
                state,
                steps=pgd_steps,
                step_size=pgd_step_size,
            )
        log.append(
            {
                "epoch": rnd,
                "split": "train",
                "loss": None,
                "updated_component": "deltas",
            }
        )
    return state, log


def _pgd_maximize(model, x, y, eps, steps, step_size, gen):
    """Worst-case bounded perturbation of a batch (maximizes seg_loss)."""
    noise = torch.empty_like(x)
    noise.uniform_(-1.0, 1.0, generator=gen)
    adv = torch.clamp(x + eps * noise, 0.0, 1.0)
    for _ in range(steps):
        adv.requires_grad_(True)
        loss = seg_loss(model(adv), y)
        (grad,) = torch.autograd.grad(loss, adv)
        with torch.no_grad():
            adv = adv + step_size * grad.sign()
            adv = torch.clamp(x + torch.clamp(adv - x, -eps, eps), 0.0, 1.0)
    return adv.detach()


def _train_supervised(dataset, spec, cfg, attack=None):
    if not dataset:
        raise ConfigurationError("exploiter training needs a nonempty dataset")
    model = build_model(spec, cfg.seed.spawn("exploiter", spec.arch))
    opt = torch.optim.Adam(model.parameters(), lr=cfg.lr_exploiter)
    rng = cfg.seed.spawn("exploiter", "batches").rng()

    log = []
    for epoch in range(1, cfg.epochs + 1):
        losses = []
        model.train()
        for bi, idx in enumerate(_epoch_batches(len(dataset), cfg.batch_size, rng)):
            x = _stack_images(dataset, idx)
            y = _stack_masks(dataset, idx)
            if attack is not None:
                model.eval()
                x = attack(model, x, y)
                model.train()
            loss = seg_loss(model(x), y)
            losses.append(_check_finite(loss, epoch=epoch, batch=bi, component="exploiter"))
            _step(opt, model.parameters(), loss)
        log.append(
            {
                "epoch": epoch,
                "split": "train",
                "loss": float(np.mean(losses)),
                "updated_component": "exploiter",
            }
        )
    return model, log


def train_exploiter(dataset: list[Sample], spec: NetSpec, cfg: TrainConfig):
    """Standard supervised segmenter training; returns (model, log)."""
    return _train_supervised(dataset, spec, cfg)


def train_exploiter_adversarial(
    dataset: list[Sample],
    spec: NetSpec,
    cfg: TrainConfig,
    adv_epsilon: float = 4.0 / 255.0,
    adv_steps: int = 7,
    adv_step_size: float = 1.0 / 255.0,
):
    """Adversarial training: fit on PGD-maximized batches.

    ``adv_steps=0`` skips the attack entirely and reproduces
    :func:`train_exploiter` bit for bit.
    """
    if adv_steps == 0:
        return _train_supervised(dataset, spec, cfg)
    gen = torch.Generator().manual_seed(int(cfg.seed.spawn("adv", "start").seed) % 2**63)

    def attack(model, x, y):
        return _pgd_maximize(model, x, y, adv_epsilon, adv_steps, adv_step_size, gen)

    return _train_supervised(dataset, spec, cfg, attack=attack)
