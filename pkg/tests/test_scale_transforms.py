"""Resolution and field-of-view operators.

The brute-force references here re-derive both resampling stages with plain
per-pixel loops so the vectorized path is checked against an independent
implementation, not against itself.
"""

import math
import time

import numpy as np
import pytest

from lenscale.errors import InvalidCrop, InvalidFactor
from lenscale.scale_transforms import (
    DEFAULT_LEVELS,
    MAX_RFL_FACTOR,
    MIN_MFL_CROP,
    LevelLadder,
    apply_level,
    apply_mfl,
    apply_rfl,
    make_ladder,
    write_ladder_csv,
)
from lenscale.tiling import TILE_PX, Tile


def make_tile(pixels, pitch=0.51):
    return Tile(pixels=pixels, slide_id="s0", x=0, y=0, label="MetPos",
                pitch_um=pitch)


def random_tile(seed):
    rng = np.random.default_rng(seed)
    return make_tile(rng.integers(0, 256, (TILE_PX, TILE_PX, 3), dtype=np.uint8))


# --- reference resamplers, loop based ---------------------------------------

def ref_area_weights(dst, src):
    w = np.zeros((dst, src))
    r = src / dst
    for i in range(dst):
        a, b = i * r, (i + 1) * r
        for j in range(int(math.floor(a)), min(int(math.ceil(b)), src)):
            w[i, j] = min(b, j + 1.0) - max(a, float(j))
    return w / w.sum(axis=1, keepdims=True)


def ref_linear_weights(dst, src):
    w = np.zeros((dst, src))
    for i in range(dst):
        x = (i + 0.5) * src / dst - 0.5
        if x <= 0.0:
            w[i, 0] = 1.0
        elif x >= src - 1:
            w[i, src - 1] = 1.0
        else:
            j = int(math.floor(x))
            w[i, j] = 1.0 - (x - j)
            w[i, j + 1] = x - j
    return w


def ref_rfl(pixels, factor):
    side = max(2, int(math.floor(TILE_PX / factor + 0.5)))
    dw = ref_area_weights(side, TILE_PX)
    uw = ref_linear_weights(TILE_PX, side)
    out = np.empty((TILE_PX, TILE_PX, 3))
    for ch in range(3):
        g = pixels[..., ch].astype(np.float64)
        out[..., ch] = uw @ (dw @ g @ dw.T) @ uw.T
    return np.clip(np.rint(out), 0, 255).astype(np.uint8)


def ref_mfl(pixels, crop):
    start = (TILE_PX - crop) // 2
    win = pixels[start:start + crop, start:start + crop]
    uw = ref_linear_weights(TILE_PX, crop)
    out = np.empty((TILE_PX, TILE_PX, 3))
    for ch in range(3):
        out[..., ch] = uw @ win[..., ch].astype(np.float64) @ uw.T
    return np.clip(np.rint(out), 0, 255).astype(np.uint8)


# --- identity levels --------------------------------------------------------

def test_rfl_identity_is_bit_exact():
    for seed in range(5):
        tile = random_tile(seed)
        out = apply_rfl(tile, 1.0)
        assert out.pixels is not tile.pixels or np.array_equal(out.pixels, tile.pixels)
        assert np.array_equal(out.pixels, tile.pixels)
        assert out.transform_tag == "rfl(1)"
        assert out.slide_id == tile.slide_id and out.label == tile.label


def test_mfl_identity_is_bit_exact():
    for seed in range(5):
        tile = random_tile(seed)
        out = apply_mfl(tile, TILE_PX)
        assert np.array_equal(out.pixels, tile.pixels)
        assert out.transform_tag == "mfl(224)"


def test_identity_speed():
    tile = random_tile(0)
    t0 = time.time()
    for _ in range(100):
        apply_rfl(tile, 1.0)
        apply_mfl(tile, TILE_PX)
    assert time.time() - t0 < 1.0


# --- domain checks ----------------------------------------------------------

@pytest.mark.parametrize("factor", [0.0, 0.99, 30.01, -3.0, float("nan"), float("inf")])
def test_rfl_rejects_bad_factor(factor):
    with pytest.raises(InvalidFactor):
        apply_rfl(random_tile(1), factor)


@pytest.mark.parametrize("crop", [0, -5, 225, 1000])
def test_mfl_rejects_bad_crop(crop):
    with pytest.raises(InvalidCrop):
        apply_mfl(random_tile(1), crop)


# --- against the loop references --------------------------------------------

@pytest.mark.parametrize("factor", [1.5, 2.8, 4.06, 11.2, 30.0])
def test_rfl_matches_loop_reference(factor):
    tile = random_tile(11)
    out = apply_rfl(tile, factor)
    ref = ref_rfl(tile.pixels, factor)
    assert np.abs(out.pixels.astype(int) - ref.astype(int)).max() <= 1
    # summation order is the only allowed difference, so near-total agreement
    assert np.mean(out.pixels != ref) < 1e-3


@pytest.mark.parametrize("crop", [5, 14, 41, 112, 159, 223])
def test_mfl_matches_loop_reference(crop):
    tile = random_tile(12)
    out = apply_mfl(tile, crop)
    ref = ref_mfl(tile.pixels, crop)
    assert np.abs(out.pixels.astype(int) - ref.astype(int)).max() <= 1
    assert np.mean(out.pixels != ref) < 1e-3


def test_mfl_matches_torch_bilinear():
    torch = pytest.importorskip("torch")
    import torch.nn.functional as F

    tile = random_tile(13)
    for crop in (5, 40, 159):
        out = apply_mfl(tile, crop)
        start = (TILE_PX - crop) // 2
        win = tile.pixels[start:start + crop, start:start + crop].astype(np.float64)
        ten = torch.from_numpy(win).permute(2, 0, 1)[None]
        ref = F.interpolate(ten, size=(TILE_PX, TILE_PX), mode="bilinear",
                            align_corners=False)[0].permute(1, 2, 0).numpy()
        ref_u8 = np.clip(np.rint(ref), 0, 255).astype(np.uint8)
        assert np.abs(out.pixels.astype(int) - ref_u8.astype(int)).max() <= 1
        assert np.mean(out.pixels != ref_u8) < 1e-3


def test_mfl_constant_window_stays_constant():
    pixels = np.full((TILE_PX, TILE_PX, 3), 255, dtype=np.uint8)
    start = (TILE_PX - 21) // 2
    pixels[start:start + 21, start:start + 21] = 77
    out = apply_mfl(make_tile(pixels), 21)
    assert np.all(out.pixels == 77)


# --- what the operators preserve and destroy --------------------------------

def grating_tile(period, horizontal=True):
    x = np.arange(TILE_PX)
    g = 0.5 + 0.3 * np.cos(2 * np.pi * x / period)
    img = np.tile(g, (TILE_PX, 1)) if horizontal else np.tile(g[:, None], (1, TILE_PX))
    u8 = np.clip(np.rint(img * 255), 0, 255).astype(np.uint8)
    return make_tile(u8[..., None].repeat(3, axis=2))


def band_energy_ratio(tile, period, horizontal):
    """Energy at the grating frequency, after / before, via direct projection."""
    out = apply_rfl(tile, float(period))
    x = np.arange(TILE_PX)
    phase = np.exp(-2j * np.pi * x / period)

    def amp(pix):
        g = pix[..., 0].astype(np.float64) / 255.0
        prof = g.mean(axis=0) if horizontal else g.mean(axis=1)
        return abs((prof * phase).mean())

    a0, a1 = amp(tile.pixels), amp(out.pixels)
    return (a1 / a0) ** 2


def test_rfl_kills_grating_at_matching_factor():
    # quick spot checks; the full 16-combo table runs in the acceptance suite
    for period, horizontal in ((7, True), (16, False), (5, True)):
        r = band_energy_ratio(grating_tile(period, horizontal), period, horizontal)
        assert r < 0.01, (period, horizontal, r)


def test_rfl_passband_attenuation_is_mild():
    # box + triangle response: content 4x coarser than the cut loses some
    # amplitude (sinc(1/4) * sinc^2(1/4) ~ 0.73) but is nowhere near killed,
    # and 16x coarser content is essentially untouched
    def ratio(period, factor):
        tile = grating_tile(period, True)
        out = apply_rfl(tile, float(factor))
        x = np.arange(TILE_PX)
        phase = np.exp(-2j * np.pi * x / period)

        def amp(pix):
            prof = (pix[..., 0].astype(np.float64) / 255.0).mean(axis=0)
            return abs((prof * phase).mean())

        return amp(out.pixels) / amp(tile.pixels)

    r4 = ratio(56, 14)
    assert 0.6 < r4 < 0.85
    assert ratio(224, 14) > 0.95


def test_rfl_preserves_mean_level():
    tile = random_tile(21)
    for level in make_ladder("rfl", 0.51).levels:
        out = apply_rfl(tile, level.control)
        drift = abs(out.pixels.mean() - tile.pixels.mean())
        assert drift < 0.05, (level.control, drift)


def test_rfl_variance_shrinks_with_factor():
    tile = random_tile(22)
    v1 = apply_rfl(tile, 1.0).pixels.astype(np.float64).var()
    v4 = apply_rfl(tile, 4.0).pixels.astype(np.float64).var()
    v30 = apply_rfl(tile, 30.0).pixels.astype(np.float64).var()
    assert v1 > 10 * v4 > 10 * v30


# --- ladders ----------------------------------------------------------------

def test_rfl_ladder_defaults():
    ladder = make_ladder("rfl", 0.51)
    assert len(ladder.levels) == DEFAULT_LEVELS["rfl"]
    controls = [lv.control for lv in ladder.levels]
    assert controls[0] == 1.0
    assert controls[-1] == pytest.approx(MAX_RFL_FACTOR)
    ratios = [b / a for a, b in zip(controls, controls[1:])]
    assert max(ratios) - min(ratios) < 1e-9
    for lv in ladder.levels:
        assert lv.length_um == pytest.approx(2 * 0.51 * lv.control)
    assert ladder.identity_index() == 0
    assert ladder.levels[0].is_identity and not ladder.levels[1].is_identity


def test_mfl_ladder_defaults():
    ladder = make_ladder("mfl", 0.51)
    crops = [int(lv.control) for lv in ladder.levels]
    assert crops == [5, 7, 10, 14, 20, 28, 40, 56, 79, 112, 159, 224]
    for lv in ladder.levels:
        assert lv.length_um == pytest.approx(int(lv.control) * 0.51)
    assert ladder.identity_index() == len(crops) - 1
    assert ladder.levels[-1].is_identity


def test_two_point_ladders_hit_the_endpoints():
    assert [lv.control for lv in make_ladder("rfl", 0.51, 2).levels] == [1.0, 30.0]
    assert [int(lv.control) for lv in make_ladder("mfl", 0.51, 3).levels] == [5, 33, 224]


def test_ladder_rejects_junk():
    with pytest.raises(ValueError):
        make_ladder("zoom", 0.51)
    with pytest.raises(ValueError):
        make_ladder("rfl", 0.0)
    with pytest.raises(ValueError):
        make_ladder("rfl", 0.51, 1)
    # enough rungs to collide adjacent integer crop sizes
    with pytest.raises(ValueError):
        make_ladder("mfl", 0.51, 60)


def test_truncated_ladder_keeps_prefix():
    ladder = make_ladder("rfl", 0.51)
    sub = ladder.truncated(4.0)
    assert all(lv.length_um <= 4.0 for lv in sub.levels)
    assert sub.levels == ladder.levels[: len(sub.levels)]
    assert len(sub.levels) >= 2
    # cutoff below every level still leaves the finest rung
    tiny = ladder.truncated(0.1)
    assert tiny.levels == (ladder.levels[0],)


def test_level_tags_and_dispatch():
    tile = random_tile(30)
    for ladder in (make_ladder("rfl", 0.51, 4), make_ladder("mfl", 0.51, 4)):
        for lv in ladder.levels:
            out = apply_level(tile, lv)
            assert out.transform_tag == lv.tag
    assert make_ladder("rfl", 0.51, 2).levels[1].tag == "rfl(30)"
    assert make_ladder("mfl", 0.51, 3).levels[0].tag == "mfl(5)"


def test_ladder_csv_round_trips_exact_controls(tmp_path):
    ladder = make_ladder("rfl", 0.51)
    path = tmp_path / "ladder.csv"
    write_ladder_csv(ladder, path)
    import csv

    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    assert len(rows) == len(ladder.levels)
    for row, lv in zip(rows, ladder.levels):
        assert row["axis"] == lv.axis
        assert float(row["control"]) == lv.control
        assert float(row["length_um"]) == lv.length_um
