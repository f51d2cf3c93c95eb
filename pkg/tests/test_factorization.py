from pathlib import Path

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from hvitkit import hvit
from hvitkit.factorization import (
    DegenerateBlendError,
    LevelPixelField,
    blend_weights,
    bundle_to_fields,
    colormap_lut,
    factorize,
    gamma_sweep,
    normalize_level,
    render_heatmap,
    upsample_to_pixels,
)
from hvitkit.pnm import ppm_bytes

GOLDEN = Path(__file__).parent / "data" / "golden_heatmap_64.ppm"
LOCAL_FLAGS = (True, False, False)


def direct_blend(values, frozen, gamma):
    """Per-pixel weighted average written out loop by loop."""
    n = sum(frozen)
    beta = n * (1 - gamma) + (len(frozen) - n) * gamma
    h, w = values[0].shape
    out = np.zeros((h, w))
    for y in range(h):
        for x in range(w):
            acc = 0.0
            for v, fz in zip(values, frozen):
                finetuned = 0.0 if fz else 1.0
                acc += v[y, x] * (gamma * finetuned + (1 - gamma) * (1 - finetuned))
            out[y, x] = acc / beta
    return out


def fields_of(values, frozen):
    return [LevelPixelField(v, lvl, f) for v, lvl, f in zip(values, ("patch", "region", "slide"), frozen)]


def golden_inputs():
    yy, xx = np.mgrid[0:64, 0:64]
    field = (np.sin(xx / 7.0) * np.cos(yy / 5.0) + 1) / 2
    base = np.stack([(xx * 4) % 256, (yy * 4) % 256, ((xx + yy) * 2) % 256], -1).astype(np.uint8)
    mask = (xx - 32) ** 2 + (yy - 32) ** 2 < 28**2
    return field, base, mask


def test_upsample_examples():
    np.testing.assert_array_equal(upsample_to_pixels([[0.3]], 16), np.full((16, 16), 0.3))
    out = upsample_to_pixels([[1, 2], [3, 4]], 3)
    for (r, c), v in {(0, 0): 1, (0, 1): 2, (1, 0): 3, (1, 1): 4}.items():
        assert np.all(out[r * 3 : (r + 1) * 3, c * 3 : (c + 1) * 3] == v)
    checker = upsample_to_pixels([[0, 1], [1, 0]], 4)
    assert checker.sum() == 2 * 16
    with pytest.raises(ValueError):
        upsample_to_pixels([[1, 2]], 4, extent=8)


def test_normalize_examples():
    f = normalize_level(LevelPixelField(np.array([[0.1, 0.3]]), "patch", True))
    np.testing.assert_allclose(f.values, [[0.0, 1.0]])
    c = normalize_level(LevelPixelField(np.full((3, 3), 0.2), "slide", False))
    np.testing.assert_array_equal(c.values, np.full((3, 3), 0.5))
    covered = np.array([[True, False]])
    p = normalize_level(LevelPixelField(np.array([[0.4, 9.0]]), "region", False, covered))
    np.testing.assert_array_equal(p.values, [[0.5, 0.0]])


@given(st.integers(0, 2**31 - 1), st.floats(0.1, 10), st.floats(-5, 5))
def test_normalize_affine_invariant(seed, a, b):
    v = np.random.default_rng(seed).uniform(size=(4, 4))
    f1 = normalize_level(LevelPixelField(v, "patch", True)).values
    f2 = normalize_level(LevelPixelField(a * v + b, "patch", True)).values
    np.testing.assert_allclose(f1, f2, atol=1e-9)


def test_hand_evaluated_pixel():
    vals = [np.full((1, 1), v) for v in (0.2, 0.6, 0.8)]
    out = factorize(fields_of(vals, LOCAL_FLAGS), 0.7)
    assert out[0, 0] == pytest.approx((0.2 * 0.3 + 0.6 * 0.7 + 0.8 * 0.7) / 1.7, abs=1e-15)
    assert out[0, 0] == pytest.approx(0.6118, abs=1e-4)


def test_matches_direct_blend(rng):
    for _ in range(200):
        vals = [rng.uniform(size=(4, 4)) for _ in range(3)]
        frozen = tuple(bool(b) for b in rng.integers(0, 2, size=3))
        gamma = float(rng.uniform())
        np.testing.assert_allclose(factorize(fields_of(vals, frozen), gamma), direct_blend(vals, frozen, gamma), rtol=0, atol=1e-12)


@pytest.mark.parametrize("frozen", [(True, True, True), (False, False, False), LOCAL_FLAGS, (True, True, False)])
def test_half_gamma_equal_inputs_identity(frozen):
    c = 0.37
    out = factorize(fields_of([np.full((4, 4), c)] * 3, frozen), 0.5)
    np.testing.assert_array_equal(out, np.full((4, 4), c))


def test_degenerate_blends():
    with pytest.raises(DegenerateBlendError):
        blend_weights((True, True, True), 1.0)
    with pytest.raises(DegenerateBlendError):
        blend_weights((False, False, False), 0.0)
    with pytest.raises(ValueError):
        blend_weights(LOCAL_FLAGS, 1.5)


@given(st.lists(st.booleans(), min_size=3, max_size=3), st.floats(0.0, 1.0))
def test_weights_sum_to_one(frozen, gamma):
    try:
        w = blend_weights(frozen, gamma)
    except DegenerateBlendError:
        assert gamma in (0.0, 1.0)
        return
    assert abs(w.sum() - 1) <= 1e-12


def test_linearity_per_level(rng):
    vals = [rng.uniform(size=(4, 4)) for _ in range(3)]
    s, gamma = 2.5, 0.7
    base = factorize(fields_of(vals, LOCAL_FLAGS), gamma)
    scaled = factorize(fields_of([vals[0], vals[1] * s, vals[2]], LOCAL_FLAGS), gamma)
    w = blend_weights(LOCAL_FLAGS, gamma)
    np.testing.assert_allclose(scaled - base, (s - 1) * w[1] * vals[1], atol=1e-14)


def test_monotone_in_gamma():
    vals = [np.full((1, 1), 0.1), np.full((1, 1), 0.6), np.full((1, 1), 0.9)]
    outs = [factorize(fields_of(vals, LOCAL_FLAGS), g)[0, 0] for g in np.linspace(0.01, 0.99, 25)]
    assert all(b >= a for a, b in zip(outs, outs[1:]))


def test_sweep_and_limits(rng):
    vals = [rng.uniform(size=(4, 4)) for _ in range(3)]
    fields = fields_of(vals, LOCAL_FLAGS)
    assert len(gamma_sweep(fields, [0.3, 0.5, 0.7])) == 3
    np.testing.assert_allclose(factorize(fields, 1e-9), vals[0], atol=1e-8)
    np.testing.assert_allclose(factorize(fields, 1 - 1e-9), (vals[1] + vals[2]) / 2, atol=1e-8)


def test_mismatched_domains_rejected():
    with pytest.raises(ValueError):
        factorize([LevelPixelField(np.zeros((2, 2)), "patch", True), LevelPixelField(np.zeros((3, 3)), "region", False)])


def test_bundle_to_fields_places_regions(tiny_model, random_regions):
    _, bundle = hvit.forward_slide(tiny_model, list(random_regions[:2]))
    fields = bundle_to_fields(bundle, tiny_model.geometry, [(0, 0), (64, 64)], (128, 128))
    patch, region, slide = fields
    assert patch.covered[:64, :64].all() and patch.covered[64:, 64:].all()
    assert not patch.covered[:64, 64:].any()
    np.testing.assert_array_equal(slide.values[:64, :64], bundle.slide_attn[0])
    np.testing.assert_array_equal(region.values[64:80, 64:80], bundle.region_attn[1, 0, 0])
    # pixel (y=5, x=17) lies in patch (0, 1), mini-patch (1, 0)
    assert patch.values[5, 17] == bundle.patch_attn[0, 0, 1, 1, 0]
    # region-level mass per region equals footprint area
    assert region.values[:64, :64].sum() == pytest.approx(16 * 16)


def test_render_examples():
    field, base, mask = golden_inputs()
    assert np.array_equal(render_heatmap(field, base, alpha=0.0), base)
    top = render_heatmap(np.ones((64, 64)), base, alpha=1.0)
    assert np.all(top == colormap_lut("jet")[255])
    with pytest.raises(ValueError):
        render_heatmap(np.ones((8, 8)), base)


def test_render_golden_bytes():
    field, base, mask = golden_inputs()
    out = ppm_bytes(render_heatmap(field, base, "jet", 0.5, mask))
    assert out == GOLDEN.read_bytes()
