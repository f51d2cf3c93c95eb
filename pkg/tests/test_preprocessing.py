import numpy as np
import pytest
from scipy import ndimage

from hvitkit.hvit import FULL, TEST, Geometry
from hvitkit.preprocessing import (
    SegmentParams,
    SlideRaster,
    TissueMask,
    extract_regions,
    preprocess,
    read_manifest,
    read_slide,
    region_fractions,
    rescale_to_spacing,
    sample_grades,
    segment_tissue,
    synth_slide,
    write_manifest,
    write_slide,
)

MAGENTA = (200, 40, 200)


def white(h, w):
    return np.full((h, w, 3), 255, np.uint8)


def test_white_slide_is_empty():
    slide = SlideRaster(white(100, 130))
    mask = segment_tissue(slide)
    assert mask.shape == (100, 130) and not mask.mask.any()
    assert len(extract_regions(slide, mask, TEST)) == 0


def test_magenta_rectangle_mask():
    px = white(120, 120)
    px[30:90, 20:70] = MAGENTA
    mask = segment_tissue(SlideRaster(px)).mask
    rect = np.zeros((120, 120), bool)
    rect[30:90, 20:70] = True
    r = SegmentParams().median_kernel // 2
    grown = ndimage.binary_dilation(rect, iterations=r)
    shrunk = ndimage.binary_erosion(rect, iterations=r)
    assert np.all(mask <= grown) and np.all(shrunk <= mask)


def test_small_holes_filled_large_kept():
    px = white(160, 160)
    px[10:150, 10:150] = MAGENTA
    px[40:46, 40:46] = 255  # 36 px hole
    px[90:120, 90:120] = 255  # 900 px hole
    mask = segment_tissue(SlideRaster(px), SegmentParams(median_kernel=1)).mask
    assert mask[40:46, 40:46].all()
    assert not mask[90:120, 90:120].any()
    assert not mask[0:5, 0:5].any()  # outer background never filled


def test_full_tissue_4096_gives_four_regions():
    slide = SlideRaster(np.broadcast_to(np.array(MAGENTA, np.uint8), (4096, 4096, 3)).copy())
    regions = extract_regions(slide, segment_tissue(slide), FULL)
    assert len(regions) == 4
    assert regions.coords == [(0, 0), (2048, 0), (0, 2048), (2048, 2048)]
    assert regions.fractions == [1.0] * 4


@pytest.mark.parametrize(
    "geometry,drop_px,keep_px",
    [(Geometry(100, 20, 4), 990, 1010), (FULL, 415236, 423625)],
)
def test_threshold_straddle(geometry, drop_px, keep_px):
    s = geometry.region_size
    slide = SlideRaster(white(s, s))
    for count, kept in ((drop_px, False), (keep_px, True)):
        m = np.zeros(s * s, bool)
        m[:count] = True
        rs = extract_regions(slide, TissueMask(m.reshape(s, s)), geometry, min_tissue=0.10)
        assert (len(rs) == 1) is kept
    assert drop_px / s**2 < 0.10 <= keep_px / s**2


def test_edge_regions_padded_white():
    px = white(70, 100)
    px[:, :] = MAGENTA
    slide = SlideRaster(px)
    rs = extract_regions(slide, segment_tissue(slide), TEST, min_tissue=0.0)
    assert rs.coords == [(0, 0), (64, 0), (0, 64), (64, 64)]
    right = rs.regions[1]
    assert np.all(right[:, 36:] == 255) and np.all(right[:, :36] == MAGENTA)
    assert rs.fractions[1] == pytest.approx(36 * 64 / 64**2)
    assert rs.fractions[3] == pytest.approx(36 * 6 / 64**2)
    # the bottom strip holds 9.4% tissue and falls under the default threshold
    assert extract_regions(slide, segment_tissue(slide), TEST).coords == [(0, 0), (64, 0)]


def test_fractions_and_partition_properties(rng):
    for seed in range(5):
        slide, _ = synth_slide(seed, seed % 6, TEST, 3)
        mask = segment_tissue(slide)
        all_rs = extract_regions(slide, mask, TEST, min_tissue=0.0)
        s = TEST.region_size
        cover = np.zeros((3 * s, 3 * s), int)
        for x, y in all_rs.coords:
            cover[y : y + s, x : x + s] += 1
        assert np.all(cover == 1)
        rs = extract_regions(slide, mask, TEST, min_tissue=0.25)
        assert all(f >= 0.25 for f in rs.fractions)
        assert region_fractions(mask, rs.coords, s) == rs.fractions
        par = extract_regions(slide, mask, TEST, min_tissue=0.25, workers=4)
        assert par.coords == rs.coords and all(np.array_equal(a, b) for a, b in zip(par.regions, rs.regions))


def test_rescale_to_spacing():
    slide = SlideRaster(white(100, 80), spacing=0.25)
    out = rescale_to_spacing(slide)
    assert (out.height, out.width, out.spacing) == (50, 40, 0.5)
    near = SlideRaster(white(100, 80), spacing=0.49)
    assert rescale_to_spacing(near) is near


def test_synth_deterministic_and_validated():
    a, la = synth_slide(11, 3, TEST)
    b, lb = synth_slide(11, 3, TEST)
    assert la == lb == 3 and a.pixels.tobytes() == b.pixels.tobytes()
    c, _ = synth_slide(12, 3, TEST)
    assert c.pixels.tobytes() != a.pixels.tobytes()
    with pytest.raises(ValueError):
        synth_slide(0, 6, TEST)


def test_synth_grade_density_contrast():
    dens = {g: np.mean([synth_slide(s, g, TEST)[0].meta["dot_density"] for s in range(20)]) for g in (0, 5)}
    assert dens[5] >= 5 * dens[0]
    means = [np.mean([synth_slide(s, g, TEST)[0].meta["dot_density"] for s in range(20)]) for g in range(6)]
    assert all(b > a for a, b in zip(means, means[1:]))


def test_synth_slides_yield_regions():
    for g in range(6):
        slide, _ = synth_slide(g, g, TEST)
        _, rs = preprocess(slide, TEST)
        assert len(rs) >= 1


def test_sample_grades():
    b = sample_grades(60, 0, balanced=True)
    assert np.bincount(b, minlength=6).tolist() == [10] * 6
    s = sample_grades(2000, 0)
    assert np.bincount(s, minlength=6)[0] > np.bincount(s, minlength=6)[5]


def test_slide_and_manifest_roundtrip(tmp_path):
    slide, _ = synth_slide(5, 2, TEST)
    write_slide(tmp_path / "s.ppm", slide)
    back = read_slide(tmp_path / "s.ppm")
    assert np.array_equal(back.pixels, slide.pixels)
    _, rs = preprocess(back, TEST)
    (tmp_path / "r").mkdir()
    rel = []
    for (x, y), px in zip(rs.coords, rs.regions):
        from hvitkit.pnm import write_ppm

        write_ppm(tmp_path / "r" / f"{x}_{y}.ppm", px)
        rel.append(f"r/{x}_{y}.ppm")
    write_manifest(tmp_path / "m.txt", rs, rel, TEST, {"min_tissue": 0.1})
    got, header = read_manifest(tmp_path / "m.txt")
    assert header["min_tissue"] == "0.1"
    assert got.coords == rs.coords and got.fractions == rs.fractions
    assert np.array_equal(got.pixels(), rs.pixels())


def test_segment_params_validation():
    with pytest.raises(ValueError):
        SegmentParams(median_kernel=4)
    with pytest.raises(ValueError):
        extract_regions(SlideRaster(white(4, 4)), TissueMask(np.zeros((4, 4), bool)), TEST, min_tissue=1.5)
