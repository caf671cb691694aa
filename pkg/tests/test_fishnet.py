import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from covermap.errors import ConfigError, PredictorError, ShapeError, StitchError
from covermap.fishnet import (
    DIHEDRAL,
    TtaTransform,
    apply_tta,
    build_fishnet,
    invert_tta,
    predict_tile,
    predict_tiled,
    seam_score,
    spline_window_1d,
    stitch_blend,
    stitch_clip,
    stitch_naive,
)
from covermap.raster import HeatMap, RasterF32, Window, read_window


def test_fishnet_4096_positions():
    net = build_fishnet(Window(0, 0, 4096, 4096), 2048, 512)
    # steps of 1536; the third column is pulled back to end on the edge
    assert [t.x0 for t in net.tiles[:3]] == [0, 1536, 2048]
    assert net.nx == net.ny == 3 and len(net) == 9
    # overlaps [1536, 2048) and [2048, 3584) are cut at their midpoints
    assert net.core_cuts() == ([1792, 2816], [1792, 2816])


def test_fishnet_rejects_bad_config():
    with pytest.raises(ConfigError):
        build_fishnet(Window(0, 0, 100, 100), 64, 64)
    with pytest.raises(ConfigError):
        build_fishnet(Window(0, 0, 100, 100), 64, 7)


def test_small_extent_gets_one_clamped_tile():
    net = build_fishnet(Window(0, 0, 30, 50), 64, 16)
    assert len(net) == 1 and net.tiles[0] == Window(0, 0, 30, 50)


@settings(max_examples=60, deadline=None)
@given(w=st.integers(1, 400), h=st.integers(1, 400), tile=st.integers(4, 128), ov=st.integers(0, 63))
def test_cores_partition_extent(w, h, tile, ov):
    ov = 2 * (ov // 2)
    if ov >= tile:
        return
    net = build_fishnet(Window(5, 7, w, h), tile, ov)
    cover = np.zeros((h + 7, w + 5), np.int32)
    for t, c in zip(net.tiles, net.cores):
        assert t.intersection(c) == c  # core inside its tile
        assert t.x1 <= 5 + w and t.y1 <= 7 + h
        cover[c.slices] += 1
    assert (cover[7:, 5:] == 1).all() and cover[:7].sum() == 0 and cover[:, :5].sum() == 0


@pytest.mark.parametrize("size", [8, 512, 2048])
@pytest.mark.parametrize("power", [1, 2, 3])
def test_window_partition_of_unity(size, power):
    w = spline_window_1d(size, power).weights_1d.astype(np.float64)
    half = size // 2
    assert np.array_equal(w, w[::-1])
    assert np.abs(w[:half] + w[half:] - 1.0).max() < 1e-6
    assert w.min() > 0


def test_window_sin2_shape_and_errors():
    w = spline_window_1d(64, 1, shape="sin2").weights_1d
    assert np.abs(w[:32] + w[32:] - 1).max() < 1e-6
    for bad in (3, 6 + 1, 2):
        with pytest.raises(ConfigError):
            spline_window_1d(bad)
    with pytest.raises(ConfigError):
        spline_window_1d(8, 2, shape="box")


def test_tta_group():
    tile = RasterF32(np.random.default_rng(0).random((6, 6, 2), dtype=np.float32))
    assert len({(t.rotation, t.mirror) for t in DIHEDRAL}) == 8
    for t in DIHEDRAL:
        fwd = apply_tta(tile, t)
        back = invert_tta(HeatMap((fwd.data * 255).astype(np.uint8)), t)
        assert np.array_equal(back.data, (tile.data * 255).astype(np.uint8))
    # rotation is clockwise after mirroring
    t = TtaTransform(90, True)
    want = np.rot90(tile.data[:, ::-1], -1)
    assert np.array_equal(apply_tta(tile, t).data, want)


def test_tta_requires_square():
    with pytest.raises(ShapeError):
        apply_tta(RasterF32(np.zeros((4, 5, 1), np.float32)), DIHEDRAL[1])


def _pixelwise(tile):
    # equivariant: each output depends on its own pixel only
    v = np.clip(tile.data[:, :, :2], 0, 1)
    return HeatMap(np.floor(v * 255 + 0.5).astype(np.uint8))


def test_tta_mean_of_equivariant_is_identity():
    img = RasterF32(np.random.default_rng(3).random((16, 16, 3), dtype=np.float32))
    win = Window(0, 0, 16, 16)
    a = predict_tile(img, win, _pixelwise, tta=False)
    b = predict_tile(img, win, _pixelwise, tta=True)
    assert np.array_equal(a.data, b.data)


def test_tta_mean_is_exact_integer_average():
    img = RasterF32(np.zeros((4, 4, 1), np.float32))
    calls = []

    def pred(tile):
        v = 3 * len(calls)  # 0, 3, ..., 21: mean 10.5 rounds up
        calls.append(v)
        return HeatMap(np.full((4, 4, 1), v, np.uint8))

    out = predict_tile(img, Window(0, 0, 4, 4), pred, tta=True)
    assert len(calls) == 8 and (out.data == 11).all()


def _scene(h=300, w=260):
    rng = np.random.default_rng(5)
    return RasterF32(rng.random((h, w, 2), dtype=np.float32))


def test_clip_stitch_equals_direct_for_pixelwise_predictor():
    img = _scene()
    net = build_fishnet(img.extent, 64, 16)
    tiles = predict_tiled(img, net, _pixelwise, workers=3)
    direct = _pixelwise(img)
    assert np.array_equal(stitch_clip(tiles, img.extent, 16).data, direct.data)
    blend = stitch_blend(tiles, img.extent, spline_window_1d(64, 2))
    assert np.abs(blend.data.astype(int) - direct.data).max() <= 1
    net0 = build_fishnet(img.extent, 64, 0)
    naive = stitch_naive(predict_tiled(img, net0, _pixelwise), img.extent)
    assert np.array_equal(naive.data, direct.data)


def test_blend_of_constant_tiles_is_constant():
    img = _scene(200, 200)
    net = build_fishnet(img.extent, 64, 32)
    tiles = [(w, HeatMap(np.full((w.h, w.w, 1), 77, np.uint8))) for w in net.tiles]
    out = stitch_blend(tiles, img.extent, spline_window_1d(64, 2), band_rows=37)
    assert (out.data == 77).all()


def test_blend_band_rows_and_workers_do_not_change_output():
    img = _scene()
    net = build_fishnet(img.extent, 64, 16)
    rng = np.random.default_rng(0)
    tiles = [(w, HeatMap(rng.integers(0, 256, (w.h, w.w, 2), dtype=np.uint8))) for w in net.tiles]
    win = spline_window_1d(64, 2)
    a = stitch_blend(tiles, img.extent, win)
    b = stitch_blend(tiles, img.extent, win, workers=4, band_rows=19)
    assert a == b


def test_stitch_detects_gaps():
    img = _scene(128, 128)
    net = build_fishnet(img.extent, 64, 16)
    tiles = predict_tiled(img, net, _pixelwise)[1:]
    with pytest.raises(StitchError):
        stitch_clip(tiles, img.extent, 16)
    with pytest.raises(StitchError):
        stitch_blend(tiles, img.extent, spline_window_1d(64))
    with pytest.raises(StitchError):
        stitch_naive(tiles, img.extent)


def test_predictor_shape_checked_with_tile_index():
    img = _scene(128, 128)
    net = build_fishnet(img.extent, 64, 16)

    def bad(tile):
        return HeatMap(np.zeros((tile.height - 1, tile.width, 1), np.uint8))

    with pytest.raises(PredictorError) as err:
        predict_tiled(img, net, bad)
    assert err.value.tile_index == 0


def test_edge_tiles_read_reflected_pixels():
    img = _scene(100, 100)
    seen = []

    def spy(tile):
        seen.append(tile.shape)
        return _pixelwise(tile)

    predict_tile(img, Window(80, 80, 32, 32), spy)
    assert seen == [(32, 32, 2)]
    assert read_window(img, Window(80, 80, 32, 32)).data[20, 0, 0] == img.data[99, 80, 0]


def test_seam_score_flags_a_planted_step():
    img = _scene(256, 256)
    net = build_fishnet(img.extent, 128, 0)
    flat = HeatMap(np.full((256, 256, 1), 100, np.uint8))
    assert seam_score(flat, net) == 0.0
    d = np.full((256, 256, 1), 100, np.uint8)
    d[:, 128:] = 140
    assert seam_score(HeatMap(d), net) == pytest.approx(40 / 255 / 2)
