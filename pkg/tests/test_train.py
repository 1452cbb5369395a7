import json

import numpy as np
import pytest
import torch

from segshield.core import RngSeed, Sample
from segshield.errors import ConfigurationError, NonFiniteLossError
from segshield.nets import NetSpec
from segshield.train import (
    TrainConfig,
    dice_loss,
    seg_loss,
    train_em,
    train_exploiter,
    train_exploiter_adversarial,
    train_umed,
    write_log,
    _pgd_maximize,
)

from conftest import make_sample

TINY = NetSpec(arch="unet", depth=2, base_channels=2)


def tiny_dataset(rng, n=8, size=8):
    return [make_sample(rng, size=size, sid=f"s{i}") for i in range(n)]


def tiny_cfg(epochs=2, seed=0, **kw):
    return TrainConfig(epochs=epochs, batch_size=4, seed=RngSeed(seed), **kw)


# ------------------------------------------------------------------ losses


def test_dice_hand_case():
    logits = torch.zeros(2, dtype=torch.float64)  # sigmoid -> 0.5
    y = torch.tensor([1.0, 0.0], dtype=torch.float64)
    loss = dice_loss(logits, y)
    assert loss.item() == pytest.approx(1.0 - (2 * 0.5 + 1e-6) / (2.0 + 1e-6), abs=1e-12)


def test_dice_perfect_prediction_near_zero():
    y = torch.tensor([[1.0, 0.0], [1.0, 1.0]])
    logits = torch.where(y > 0, 20.0, -20.0)
    assert dice_loss(logits, y).item() <= 1e-4
    assert seg_loss(logits, y).item() <= 1e-3


def test_dice_total_miss_near_one():
    y = torch.ones(4)
    logits = torch.full((4,), -100.0)
    assert dice_loss(logits, y).item() > 0.999


def test_seg_loss_recomposition(rng):
    logits = torch.from_numpy(rng.normal(size=(2, 1, 4, 4)))
    y = torch.from_numpy((rng.random((2, 1, 4, 4)) > 0.5).astype(np.float64))
    ce = torch.nn.functional.binary_cross_entropy_with_logits(logits, y)
    total = seg_loss(logits, y)
    assert total.item() == pytest.approx((ce + dice_loss(logits, y)).item(), abs=0)


def test_seg_loss_accepts_numpy():
    logits = np.zeros((2, 2), np.float32)
    y = np.array([[1, 0], [0, 1]], np.uint8)
    assert np.isfinite(seg_loss(logits, y).item())


def test_seg_loss_gradient_matches_finite_differences(rng):
    logits0 = rng.normal(size=(4, 4))
    y = (rng.random((4, 4)) > 0.5).astype(np.float64)
    t = torch.from_numpy(logits0.copy()).requires_grad_(True)
    loss = seg_loss(t, torch.from_numpy(y))
    loss.backward()
    grad = t.grad.numpy()
    step = 1e-3
    for i in range(4):
        for j in range(4):
            pert = logits0.copy()
            pert[i, j] += step
            hi = seg_loss(torch.from_numpy(pert), torch.from_numpy(y)).item()
            pert[i, j] -= 2 * step
            lo = seg_loss(torch.from_numpy(pert), torch.from_numpy(y)).item()
            fd = (hi - lo) / (2 * step)
            assert abs(fd - grad[i, j]) <= 1e-3 * max(abs(fd), abs(grad[i, j]), 1e-6)


# ------------------------------------------------------------------ config


def test_train_config_validation():
    with pytest.raises(ConfigurationError):
        TrainConfig(epochs=0)
    with pytest.raises(ConfigurationError):
        TrainConfig(lr_exploiter=0.0)
    with pytest.raises(ConfigurationError):
        TrainConfig(schedule_modulus=1)
    cfg = TrainConfig.exploiter_defaults()
    assert (cfg.epochs, cfg.batch_size) == (150, 32)


# ------------------------------------------------------------------- umed


def snapshot(model):
    return [p.detach().clone() for p in model.parameters()]


def changed(before, model):
    return any(
        not torch.equal(b, p.detach()) for b, p in zip(before, model.parameters())
    )


def test_umed_single_epoch_leaves_surrogate_untouched(rng):
    data = tiny_dataset(rng)
    state, log = train_umed(
        data, tiny_cfg(epochs=1), surrogate_spec=TINY,
        gen_contour_spec=NetSpec(arch="unet_cdc_encoder", depth=2, base_channels=2),
        gen_texture_spec=TINY,
    )
    assert [e["updated_component"] for e in log] == ["generators"]


def test_umed_schedule_four_to_one(rng):
    data = tiny_dataset(rng)
    state, log = train_umed(
        data, tiny_cfg(epochs=5), surrogate_spec=TINY,
        gen_contour_spec=NetSpec(arch="unet_cdc_encoder", depth=2, base_channels=2),
        gen_texture_spec=TINY,
    )
    components = [e["updated_component"] for e in log]
    assert components.count("generators") == 4
    assert components.count("surrogate") == 1
    assert components[4] == "surrogate"
    assert all(np.isfinite(e["loss"]) for e in log)


def test_umed_generators_actually_move(rng):
    data = tiny_dataset(rng)
    cfg = tiny_cfg(epochs=1)
    state, _ = train_umed(
        data, cfg, surrogate_spec=TINY,
        gen_contour_spec=NetSpec(arch="unet_cdc_encoder", depth=2, base_channels=2),
        gen_texture_spec=TINY,
    )
    from segshield.nets import build_model

    fresh_c = build_model(state.gen_contour_spec, cfg.seed.spawn("umed", "gen_contour"))
    assert changed(snapshot(fresh_c), state.gen_contour)


def test_umed_empty_dataset_rejected():
    with pytest.raises(ConfigurationError):
        train_umed([], tiny_cfg())


# -------------------------------------------------------------------- em


def test_em_round_trip_produces_bounded_deltas(rng):
    data = tiny_dataset(rng)
    state, log = train_em(
        data, tiny_cfg(epochs=1), surrogate_spec=TINY, rounds=2, pgd_steps=2
    )
    assert set(state.deltas) == {s.sample_id for s in data}
    for d in state.deltas.values():
        assert np.abs(d).max() <= state.epsilon + 1e-9
    assert sum(1 for e in log if e["updated_component"] == "deltas") == 2


# -------------------------------------------------------------- exploiter


def test_exploiter_deterministic(rng):
    data = tiny_dataset(rng)
    m1, log1 = train_exploiter(data, TINY, tiny_cfg(seed=3))
    m2, log2 = train_exploiter(data, TINY, tiny_cfg(seed=3))
    assert log1 == log2
    for p1, p2 in zip(m1.parameters(), m2.parameters()):
        assert torch.equal(p1, p2)


def test_exploiter_seed_changes_result(rng):
    data = tiny_dataset(rng)
    _, log1 = train_exploiter(data, TINY, tiny_cfg(seed=3))
    _, log2 = train_exploiter(data, TINY, tiny_cfg(seed=4))
    assert log1 != log2


def test_adversarial_zero_steps_matches_plain(rng):
    data = tiny_dataset(rng)
    m1, log1 = train_exploiter(data, TINY, tiny_cfg(seed=5))
    m2, log2 = train_exploiter_adversarial(data, TINY, tiny_cfg(seed=5), adv_steps=0)
    assert log1 == log2
    for p1, p2 in zip(m1.parameters(), m2.parameters()):
        assert torch.equal(p1, p2)


def test_pgd_maximize_projection(rng):
    from segshield.nets import build_model

    model = build_model(TINY, RngSeed(0))
    x = torch.from_numpy(rng.random((2, 1, 8, 8)).astype(np.float32))
    y = torch.from_numpy((rng.random((2, 1, 8, 8)) > 0.5).astype(np.float32))
    gen = torch.Generator().manual_seed(0)
    eps = 4.0 / 255.0
    adv = _pgd_maximize(model, x, y, eps, steps=3, step_size=1.0 / 255.0, gen=gen)
    assert (adv - x).abs().max().item() <= eps + 1e-7
    assert adv.min().item() >= 0.0 and adv.max().item() <= 1.0


def test_adversarial_training_runs(rng):
    data = tiny_dataset(rng)
    model, log = train_exploiter_adversarial(
        data, TINY, tiny_cfg(epochs=1), adv_steps=2
    )
    assert len(log) == 1 and np.isfinite(log[0]["loss"])


def test_non_finite_loss_aborts(rng):
    data = tiny_dataset(rng)
    bad = Sample(np.full((8, 8, 1), np.nan, np.float32), data[0].mask, "bad")
    with pytest.raises(NonFiniteLossError) as err:
        train_exploiter(data + [bad], TINY, tiny_cfg())
    assert "epoch" in err.value.diagnostics


def test_write_log(tmp_path, rng):
    data = tiny_dataset(rng, n=4)
    _, log = train_exploiter(data, TINY, tiny_cfg(epochs=2))
    path = tmp_path / "log.jsonl"
    write_log(path, log)
    lines = path.read_text().strip().split("\n")
    assert len(lines) == 2
    entry = json.loads(lines[0])
    assert set(entry) == {"epoch", "split", "loss", "updated_component"}
