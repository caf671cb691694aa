import json
from collections import deque

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from covermap.errors import ConfigError, GeometryError
from covermap.raster import GeoRef, HeatMap
from covermap.vector import (
    ThresholdPair,
    build_cover_map,
    connected_components,
    filter_objects,
    signed_area,
    simplify,
    trace_polygons,
    trace_rings,
)


# ----------------------------------------------------------------------------
# oracles
# ----------------------------------------------------------------------------

def flood_labels(b, eight=True):
    h, w = b.shape
    lab = np.zeros((h, w), int)
    nb = [(-1, -1), (-1, 0), (-1, 1), (0, -1), (0, 1), (1, -1), (1, 0), (1, 1)] if eight else \
        [(-1, 0), (0, -1), (0, 1), (1, 0)]
    n = 0
    for y in range(h):
        for x in range(w):
            if b[y, x] and not lab[y, x]:
                n += 1
                lab[y, x] = n
                q = deque([(y, x)])
                while q:
                    cy, cx = q.popleft()
                    for dy, dx in nb:
                        yy, xx = cy + dy, cx + dx
                        if 0 <= yy < h and 0 <= xx < w and b[yy, xx] and not lab[yy, xx]:
                            lab[yy, xx] = n
                            q.append((yy, xx))
    return lab, n


def rasterize(rings, shape):
    """Even-odd fill of lattice rings at pixel centres."""
    h, w = shape
    cnt = np.zeros((h, w + 1), int)
    for r in rings:
        for (x0, y0), (x1, y1) in zip(r[:-1], r[1:]):
            if x0 == x1 and y0 != y1:
                lo, hi = sorted((int(y0), int(y1)))
                cnt[lo:hi, int(x0)] += 1
    return (np.cumsum(cnt, axis=1)[:, :w] % 2).astype(bool)


def seg_dist(p, a, b):
    ab = b - a
    den = ab @ ab
    t = 0.0 if den == 0 else min(1.0, max(0.0, (p - a) @ ab / den))
    return float(np.hypot(*(a + t * ab - p)))


def fixture(rng, size):
    b = rng.random((size, size)) < rng.uniform(0.2, 0.7)
    # carve a donut so holes are always exercised
    yy, xx = np.mgrid[:size, :size]
    c = size / 2
    r = np.hypot(yy - c, xx - c)
    b[(r > size / 6) & (r < size / 3)] = True
    b[r < size / 10] = False
    return b


# ----------------------------------------------------------------------------

def test_ccl_matches_flood_fill():
    rng = np.random.default_rng(0)
    for _ in range(20):
        b = rng.random((31, 27)) < 0.45
        for eight in (True, False):
            lab, n = connected_components(b, 8 if eight else 4)
            want, m = flood_labels(b, eight)
            assert n == m and np.array_equal(lab, want)


def test_ccl_bad_connectivity():
    with pytest.raises(ConfigError):
        connected_components(np.ones((2, 2)), 6)


def test_single_pixel_ring_is_ccw_square():
    lab = np.zeros((3, 3), int)
    lab[1, 1] = 1
    polys = trace_polygons(lab, GeoRef(0.0, 0.0, 1.0))
    ext, holes = polys[1]
    assert holes == []
    assert signed_area(ext) == 1.0
    assert len(ext) == 5 and np.array_equal(ext[0], ext[-1])


def test_donut_has_cw_hole():
    lab = np.ones((5, 5), int)
    lab[2, 2] = 0
    ext, holes = trace_polygons(lab, GeoRef(0.0, 0.0, 1.0))[1]
    assert signed_area(ext) == 25.0
    assert len(holes) == 1 and signed_area(holes[0]) == -1.0


def test_diagonal_pixels_form_one_exterior():
    # 8-connected checkerboard pinch: one object, one exterior ring
    b = np.array([[1, 0], [0, 1]])
    lab, n = connected_components(b, 8)
    assert n == 1
    ext, holes = trace_polygons(lab, GeoRef(0.0, 0.0, 1.0))[1]
    assert holes == [] and signed_area(ext) == 2.0


def test_diagonal_hole_pixels_are_separate_holes():
    b = np.ones((4, 4), int)
    b[1, 1] = b[2, 2] = 0
    ext, holes = trace_polygons(b, GeoRef(0.0, 0.0, 1.0))[1]
    assert signed_area(ext) == 16.0
    assert sorted(signed_area(h) for h in holes) == [-1.0, -1.0]


@pytest.mark.parametrize("seed", range(10))
def test_polygon_roundtrip(seed):
    rng = np.random.default_rng(seed)
    size = int(rng.integers(8, 96))
    lab, n = connected_components(fixture(rng, size), 8)
    rings, rlab = trace_rings(lab)
    back = np.zeros_like(lab)
    for k in range(1, n + 1):
        back[rasterize([r for r, l in zip(rings, rlab) if l == k], lab.shape)] = k
    assert np.array_equal(back, lab)
    geo = GeoRef(0.0, 0.0, 1.0)
    for k, (ext, holes) in trace_polygons(lab, geo).items():
        area = signed_area(ext) + sum(signed_area(h) for h in holes)
        assert area == (lab == k).sum()


def test_simplify_keeps_rectangle_corners():
    ring = np.array([[0, 0], [1, 0], [2, 0], [2, 1], [2, 2], [1, 2], [0, 2], [0, 1], [0, 0]], float)
    out = simplify(ring, 0.1)
    assert out.tolist() == [[0, 0], [2, 0], [2, 2], [0, 2], [0, 0]]


def test_simplify_errors():
    with pytest.raises(GeometryError):
        simplify(np.array([[0, 0], [1, 0], [0, 0]], float), 1)
    with pytest.raises(GeometryError):
        simplify(np.array([[0, 0], [1, 0], [1, 1], [0, 1]], float), 1)


def test_simplify_never_below_triangle():
    t = np.linspace(0, 2 * np.pi, 40, endpoint=False)
    ring = np.column_stack([np.cos(t), np.sin(t)])
    ring = np.vstack([ring, ring[:1]])
    assert len(simplify(ring, 100.0)) == 4


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 10_000), n=st.integers(4, 80), tol=st.floats(0.0, 3.0))
def test_simplify_hausdorff_bound(seed, n, tol):
    rng = np.random.default_rng(seed)
    t = np.sort(rng.uniform(0, 2 * np.pi, n))
    r = rng.uniform(2, 10, n)
    pts = np.column_stack([r * np.cos(t), r * np.sin(t)])
    ring = np.vstack([pts, pts[:1]])
    out = simplify(ring, tol)
    # retained vertices are a subsequence of the input, closing vertex included
    assert np.array_equal(out[0], out[-1])
    assert all(any(np.array_equal(v, p) for p in pts) for v in out[:-1])
    # brute force: every removed vertex lies within tol of the simplified ring
    segs = list(zip(out[:-1], out[1:]))
    if len(out) > 4:  # a forced-triangle fallback is allowed to exceed tol
        for p in pts:
            assert min(seg_dist(p, a, b) for a, b in segs) <= tol + 1e-9


def _uniform_object(value):
    d = np.zeros((20, 20, 1), np.uint8)
    d[5:12, 4:15, 0] = value
    return HeatMap(d)


@pytest.mark.parametrize("high, kept", [(115, 1), (120, 1), (121, 0), (153, 0)])
def test_two_level_threshold_boundary(high, kept):
    m = build_cover_map(_uniform_object(120), ThresholdPair(102, high))
    assert len(m.objects) == kept


def test_mean_prob_and_area_reported():
    m = build_cover_map(_uniform_object(200), ThresholdPair(102, 153), geo=GeoRef(0.0, 0.0, 0.2))
    (o,) = m.objects
    assert o.pixel_count == 77 and o.area == pytest.approx(77 * 0.04)
    assert o.mean_prob == pytest.approx(200 / 255, abs=1e-6)


def test_min_area_filter():
    m = build_cover_map(_uniform_object(200), ThresholdPair(102, 153), min_area=3.1)
    assert m.objects == []


def test_filter_objects_exact_integer_test():
    counts = np.array([0, 3])
    sums = np.array([0, 3 * 153])
    assert filter_objects([1], None, 153, 0, sums=sums, counts=counts) == [1]
    assert filter_objects([1], None, 154, 0, sums=sums, counts=counts) == []


def test_threshold_pair_validation():
    with pytest.raises(ConfigError):
        ThresholdPair(150, 100)


def test_geojson_structure_and_winding():
    d = np.zeros((12, 12, 2), np.uint8)
    d[2:10, 2:10, 1] = 220
    d[4:6, 4:6, 1] = 0
    m = build_cover_map(HeatMap(d, GeoRef(1000.0, 2000.0, 0.5)), class_names=["a", "b"])
    gj = json.loads(m.to_geojson())
    (f,) = gj["features"]
    assert f["properties"]["class"] == "b" and f["properties"]["pixel_count"] == 60
    ext, hole = (np.array(r) for r in f["geometry"]["coordinates"])
    assert signed_area(ext) > 0 > signed_area(hole)
    assert ext[:, 0].min() == 1001.0 and ext[:, 1].max() == 1999.0
    assert m.summary_csv().splitlines() == ["class,count,total_area", "a,0,0.0", "b,1,15.0"]


def test_workers_do_not_change_map():
    rng = np.random.default_rng(3)
    h = HeatMap(rng.integers(0, 256, (40, 40, 3), dtype=np.uint8))
    a = build_cover_map(h, ThresholdPair(120, 130), tolerance=0.5)
    b = build_cover_map(h, ThresholdPair(120, 130), tolerance=0.5, workers=3)
    assert a.to_geojson() == b.to_geojson()


def test_empty_heat_map():
    assert build_cover_map(HeatMap(np.zeros((8, 8, 3), np.uint8))).objects == []


def test_filter_identity_with_zero_thresholds():
    counts = np.array([0, 4, 1, 9])
    sums = np.array([0, 0, 3, 200])
    assert filter_objects([1, 2, 3], None, 0, 0.0, areas=counts * 0.04, sums=sums, counts=counts) == [1, 2, 3]


def test_staircase_collapses_to_straight_edge():
    # lower-left triangle of a 10x10 grid: 45 degree staircase hypotenuse
    lab = np.tril(np.ones((10, 10), int))
    (ring,), _ = trace_rings(lab)
    out = simplify(ring.astype(float), np.sqrt(2) / 2)
    assert len(out) - 1 == 3


def test_square_keeps_four_corners():
    lab = np.zeros((12, 12), int)
    lab[2:10, 2:10] = 1
    (ring,), _ = trace_rings(lab)
    for tol in (0.5, 2.0, 3.9):
        assert len(simplify(ring.astype(float), tol)) - 1 == 4


def test_lowering_low_grows_blurred_object():
    yy, xx = np.mgrid[:64, :64]
    p = np.clip(1.2 - np.hypot(yy - 32, xx - 32) / 20, 0, 1)
    h = HeatMap(np.floor(p * 255 + 0.5).astype(np.uint8))
    areas = []
    for low in (200, 175, 150, 125, 100):
        (o,) = build_cover_map(h, ThresholdPair(low, low)).objects
        areas.append(o.area)
    assert all(b > a for a, b in zip(areas, areas[1:]))


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 10_000), low=st.integers(0, 200), h1=st.integers(0, 255), h2=st.integers(0, 255))
def test_raising_high_never_adds(seed, low, h1, h2):
    h1, h2 = sorted((max(h1, low), max(h2, low)))
    rng = np.random.default_rng(seed)
    hm = HeatMap(rng.integers(0, 256, (24, 24, 1), dtype=np.uint8))
    a = build_cover_map(hm, ThresholdPair(low, h1)).objects
    b = build_cover_map(hm, ThresholdPair(low, h2)).objects
    assert {o.label for o in b} <= {o.label for o in a}


def test_raising_low_can_add_an_object():
    # mean-probability filtering is not monotone in the low threshold: dropping
    # the weak rim lifts the core's mean over the high threshold
    d = np.zeros((7, 7, 1), np.uint8)
    d[1:6, 1:6] = 110
    d[3, 3] = 250
    h = HeatMap(d)
    assert build_cover_map(h, ThresholdPair(102, 153)).objects == []
    (o,) = build_cover_map(h, ThresholdPair(120, 153)).objects
    assert o.pixel_count == 1
