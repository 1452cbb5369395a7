import numpy as np
import pytest

from segshield.errors import ConfigurationError, DimensionError
from segshield.texture import (
    LbpConfig,
    lbp_codes,
    texture_intensity_map,
    transition_counts,
)

RING = [(0, 1), (1, 1), (1, 0), (1, -1), (0, -1), (-1, -1), (-1, 0), (-1, 1)]


def lbp_oracle(gray):
    """Bit-by-bit reference: explicit loops, replicate padding."""
    h, w = gray.shape
    codes = np.zeros((h, w), np.uint8)
    for i in range(h):
        for j in range(w):
            code = 0
            for k, (dr, dc) in enumerate(RING):
                ii = min(max(i + dr, 0), h - 1)
                jj = min(max(j + dc, 0), w - 1)
                if gray[ii, jj] >= gray[i, j]:
                    code |= 1 << k
            codes[i, j] = code
    return codes


def transitions_oracle(code):
    bits = [(code >> k) & 1 for k in range(8)]
    return sum(bits[k] != bits[(k + 1) % 8] for k in range(8))


def test_constant_image_all_codes_255():
    codes = lbp_codes(np.full((6, 6), 0.3))
    assert np.all(codes == 255)


def test_affine_transform_preserves_codes(rng):
    img = rng.random((12, 12))
    np.testing.assert_array_equal(lbp_codes(img), lbp_codes(0.5 * img + 0.2))


def test_center_peak_has_code_zero():
    img = np.array([[0.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 0.0]])
    assert lbp_codes(img)[1, 1] == 0


def test_codes_match_oracle(rng):
    for _ in range(5):
        img = rng.random((10, 10))
        np.testing.assert_array_equal(lbp_codes(img), lbp_oracle(img))


def test_transition_counts_match_oracle():
    codes = np.arange(256, dtype=np.uint8).reshape(16, 16)
    got = transition_counts(codes)
    expected = np.array(
        [[transitions_oracle(int(c)) for c in row] for row in codes], np.uint8
    )
    np.testing.assert_array_equal(got, expected)
    assert transitions_oracle(0) == 0
    assert transitions_oracle(255) == 0
    assert transitions_oracle(0b01010101) == 8
    assert transitions_oracle(0b00000001) == 2


def test_lbp_config_restricted_to_8_1():
    with pytest.raises(ConfigurationError):
        LbpConfig(neighbors=16)


def test_constant_image_maps_to_floor_inside():
    interior = np.zeros((8, 8), np.uint8)
    interior[2:6, 2:6] = 1
    tex = texture_intensity_map(np.full((8, 8), 0.5), interior, floor=0.1)
    inside = tex[interior.astype(bool)]
    np.testing.assert_allclose(inside, 0.1, atol=1e-12)
    assert np.all(tex[~interior.astype(bool)] == 0.0)


def test_checkerboard_rescales_to_full_range():
    # high-valued cells see an alternating ring code (8 transitions),
    # low-valued cells tie everywhere (0 transitions); after 3x3 mean
    # smoothing the interior maxima hit 1.0 and the minima the floor
    size = 12
    r, c = np.meshgrid(np.arange(size), np.arange(size), indexing="ij")
    board = ((r + c) % 2).astype(np.float64)
    interior = np.zeros((size, size), np.uint8)
    interior[3:9, 3:9] = 1
    floor = 0.1
    tex = texture_intensity_map(board, interior, floor=floor)

    codes = lbp_oracle(board)
    trans = np.array([[transitions_oracle(int(v)) for v in row] for row in codes])
    inner = interior.astype(bool)
    assert set(np.unique(trans[inner])) == {0, 8}

    assert tex[inner].max() == pytest.approx(1.0, abs=1e-12)
    assert tex[inner].min() == pytest.approx(floor, abs=1e-12)
    high = inner & (board == 1.0)
    low = inner & (board == 0.0)
    np.testing.assert_allclose(tex[high], 1.0, atol=1e-12)
    np.testing.assert_allclose(tex[low], floor, atol=1e-12)
    assert np.all(tex[~inner] == 0.0)


def test_empty_interior_warns_and_returns_zeros():
    with pytest.warns(UserWarning):
        tex = texture_intensity_map(np.full((8, 8), 0.5), np.zeros((8, 8), np.uint8))
    assert tex.sum() == 0.0


def test_grayscale_independence_bit_identical(rng):
    transforms = [
        lambda v: 0.5 * v + 0.2,
        lambda v: v**2,
        lambda v: np.sqrt(v),
        lambda v: 1.0 / (1.0 + np.exp(-4.0 * (v - 0.5))),
    ]
    for _ in range(3):
        img = rng.random((16, 16))
        interior = np.zeros((16, 16), np.uint8)
        interior[4:12, 4:12] = 1
        base = texture_intensity_map(img, interior)
        for g in transforms:
            out = texture_intensity_map(g(img), interior)
            np.testing.assert_array_equal(out, base)


def test_range_and_support(rng):
    for _ in range(5):
        img = rng.random((16, 16))
        interior = (rng.random((16, 16)) > 0.5).astype(np.uint8)
        tex = texture_intensity_map(img, interior)
        assert tex.min() >= 0.0 and tex.max() <= 1.0
        assert np.all(tex[interior == 0] == 0.0)


def test_determinism(rng):
    img = rng.random((16, 16))
    interior = np.ones((16, 16), np.uint8)
    a = texture_intensity_map(img, interior)
    b = texture_intensity_map(img, interior)
    np.testing.assert_array_equal(a, b)


def test_dimension_mismatch_rejected():
    with pytest.raises(DimensionError):
        texture_intensity_map(np.zeros((8, 8)), np.zeros((6, 6), np.uint8))


def test_three_channel_input_uses_luminance(rng):
    img = rng.random((12, 12, 3))
    interior = np.ones((12, 12), np.uint8)
    tex = texture_intensity_map(img, interior)
    assert tex.shape == (12, 12)
    assert tex.max() <= 1.0
