import json

import cv2
import numpy as np
import pytest

from segshield.core import RngSeed, Sample
from segshield.dataio import (
    DatasetManifest,
    SynthSpec,
    format_budget,
    generate_synthetic,
    load_dataset,
    load_delta,
    load_split,
    manifest_for_split,
    parse_budget,
    save_dataset,
    save_protected,
)
from segshield.errors import ConfigurationError, IngestionError
from segshield.perturb import ProtectorState, protect_image

from conftest import make_sample


def test_budget_parsing_round_trip():
    assert parse_budget("4/255") == pytest.approx(4 / 255)
    assert parse_budget(0.05) == 0.05
    assert format_budget(4 / 255) == "4/255"
    assert format_budget(8 / 255) == "8/255"
    assert parse_budget(format_budget(0.0123)) == pytest.approx(0.0123)


def test_mask_binarization_threshold(tmp_path):
    img_dir = tmp_path / "train" / "images"
    mask_dir = tmp_path / "train" / "masks"
    img_dir.mkdir(parents=True)
    mask_dir.mkdir(parents=True)
    cv2.imwrite(str(img_dir / "a.png"), np.full((8, 8), 100, np.uint8))
    mask = np.zeros((8, 8), np.uint8)
    mask[0, 0] = 128
    mask[0, 1] = 127
    cv2.imwrite(str(mask_dir / "a.png"), mask)
    samples = load_split(tmp_path, "train")
    assert samples[0].mask[0, 0] == 1
    assert samples[0].mask[0, 1] == 0


def test_sixteen_bit_normalization(tmp_path):
    img_dir = tmp_path / "train" / "images"
    mask_dir = tmp_path / "train" / "masks"
    img_dir.mkdir(parents=True)
    mask_dir.mkdir(parents=True)
    arr = np.zeros((8, 8), np.uint16)
    arr[0, 0] = 65535
    cv2.imwrite(str(img_dir / "a.png"), arr)
    cv2.imwrite(str(mask_dir / "a.png"), np.full((8, 8), 255, np.uint8))
    samples = load_split(tmp_path, "train")
    assert samples[0].image[0, 0, 0] == 1.0
    assert samples[0].image[1, 1, 0] == 0.0


def test_missing_mask_is_named(tmp_path):
    img_dir = tmp_path / "train" / "images"
    img_dir.mkdir(parents=True)
    (tmp_path / "train" / "masks").mkdir()
    cv2.imwrite(str(img_dir / "lonely.png"), np.zeros((8, 8), np.uint8))
    with pytest.raises(IngestionError) as err:
        manifest_for_split(tmp_path, "train")
    assert "lonely" in str(err.value)


def test_missing_image_file(tmp_path):
    manifest = DatasetManifest(root=str(tmp_path), pairs=(("x.png", "y.png", "x"),))
    with pytest.raises(IngestionError):
        load_dataset(manifest)


def test_resize_paths(tmp_path, rng):
    train = [make_sample(rng, size=32, sid="s0")]
    save_dataset(tmp_path, train, [], bit_depth=8)
    samples = load_dataset(manifest_for_split(tmp_path, "train", image_size=16))
    assert samples[0].image.shape == (16, 16, 1)
    assert samples[0].mask.shape == (16, 16)
    assert set(np.unique(samples[0].mask)) <= {0, 1}


def test_synthetic_deterministic():
    spec = SynthSpec(n_samples=12, size=32, seed=RngSeed(9))
    t1, v1 = generate_synthetic(spec)
    t2, v2 = generate_synthetic(spec)
    assert len(t1) == 10 and len(v1) == 2  # 80/20 by index
    for a, b in zip(t1 + v1, t2 + v2):
        np.testing.assert_array_equal(a.image, b.image)
        np.testing.assert_array_equal(a.mask, b.mask)
        assert a.sample_id == b.sample_id


def test_synthetic_mask_fractions():
    spec = SynthSpec(n_samples=30, size=32, seed=RngSeed(4))
    train, test = generate_synthetic(spec)
    for s in train + test:
        frac = s.mask.mean()
        assert 0.05 <= frac <= 0.60
        assert s.image.min() >= 0.0 and s.image.max() <= 1.0
        assert s.image.dtype == np.float32


def test_synthetic_shape_families():
    for family in ("blobs", "ellipses"):
        spec = SynthSpec(n_samples=4, size=32, shape_family=family, seed=RngSeed(2))
        train, test = generate_synthetic(spec)
        assert len(train) + len(test) == 4
    with pytest.raises(ConfigurationError):
        SynthSpec(shape_family="squares")


def test_save_load_round_trip_16bit(tmp_path, rng):
    train, test = generate_synthetic(SynthSpec(n_samples=6, size=32, seed=RngSeed(1)))
    save_dataset(tmp_path, train, test, bit_depth=16)
    reloaded = load_split(tmp_path, "train")
    for orig, back in zip(train, reloaded):
        assert np.abs(orig.image - back.image).max() <= 1.0 / 65535.0
        np.testing.assert_array_equal(orig.mask, back.mask)


def test_save_protected_manifest_and_deltas(tmp_path, rng):
    train = [make_sample(rng, size=16, sid=f"s{i}") for i in range(3)]
    state = ProtectorState(kind="em", epsilon=4 / 255)
    for s in train:
        state.deltas[s.sample_id] = np.full_like(s.image, 1 / 255)
    records = [protect_image(s.image, s.mask, state, s.sample_id) for s in train]
    manifest = save_protected(records, state, tmp_path, test_samples=[])
    assert manifest["protector"]["epsilon"] == "4/255"
    assert manifest["protector"]["kind"] == "em"

    on_disk = json.loads((tmp_path / "manifest.json").read_text())
    assert on_disk["protector"]["epsilon"] == "4/255"

    for s in train:
        delta = load_delta(tmp_path, s.sample_id, s.image.shape)
        np.testing.assert_allclose(delta, 1 / 255, rtol=1e-6)

    reloaded = load_split(tmp_path, "train")
    for rec, back in zip(records, reloaded):
        assert np.abs(rec.image_p - back.image).max() <= 1.0 / 65535.0


def test_protected_masks_byte_identical(tmp_path, rng):
    train = [make_sample(rng, size=16, sid=f"s{i}") for i in range(2)]
    clean_root = tmp_path / "clean"
    save_dataset(clean_root, train, [], bit_depth=16)

    state = ProtectorState(kind="none")
    records = [protect_image(s.image, s.mask, state, s.sample_id) for s in train]
    prot_root = tmp_path / "protected"
    save_protected(records, state, prot_root, test_samples=[])

    for s in train:
        clean_bytes = (clean_root / "train" / "masks" / f"{s.sample_id}.png").read_bytes()
        prot_bytes = (prot_root / "train" / "masks" / f"{s.sample_id}.png").read_bytes()
        assert clean_bytes == prot_bytes


def test_eight_bit_refusal_and_override(tmp_path, rng):
    from segshield.nets import NetSpec, build_model

    spec = NetSpec(arch="unet", depth=2, base_channels=2, out_channels=1)
    state = ProtectorState(
        kind="umed",
        epsilon=4 / 255,
        floor=0.1,
        gen_contour=build_model(spec, RngSeed(0)),
        gen_contour_spec=spec,
        gen_texture=build_model(spec, RngSeed(1)),
        gen_texture_spec=spec,
    )
    s = make_sample(rng, size=16)
    records = [protect_image(s.image, s.mask, state, s.sample_id)]
    with pytest.raises(ConfigurationError):
        save_protected(records, state, tmp_path / "a", bit_depth=8)
    with pytest.warns(UserWarning):
        save_protected(
            records, state, tmp_path / "b", bit_depth=8, override_precision=True
        )


def test_split_disjoint_and_exhaustive():
    spec = SynthSpec(n_samples=25, size=32, seed=RngSeed(3))
    train, test = generate_synthetic(spec)
    train_ids = {s.sample_id for s in train}
    test_ids = {s.sample_id for s in test}
    assert not train_ids & test_ids
    assert len(train_ids | test_ids) == 25


def test_three_channel_round_trip(tmp_path, rng):
    img = rng.random((16, 16, 3)).astype(np.float32)
    mask = np.zeros((16, 16), np.uint8)
    mask[4:12, 4:12] = 1
    train = [Sample(img, mask, "rgb0")]
    save_dataset(tmp_path, train, [], bit_depth=16)
    back = load_split(tmp_path, "train")[0]
    assert back.image.shape == (16, 16, 3)
    assert np.abs(back.image - img).max() <= 1.0 / 65535.0
