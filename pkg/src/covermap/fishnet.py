"""Overlapping tile grids, tiled prediction with dihedral TTA, and stitching.

Two stitching strategies are provided: :func:`stitch_clip` keeps only the
core of every tile (margins of ``overlap / 2`` are dropped on inner sides)
and :func:`stitch_blend` takes a weighted mean of overlapping tiles using a
separable window that forms a partition of unity at 50% overlap.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import List, Optional, Protocol, Sequence, Tuple

import numpy as np

from .errors import ConfigError, PredictorError, ShapeError, StitchError
from .raster import (
    EDGE_REFLECT,
    GeoRef,
    HeatMap,
    RasterF32,
    Window,
    quantize_array,
    read_window,
)

DEFAULT_TILE = 2048
DEFAULT_OVERLAP = 512

TileList = List[Tuple[Window, HeatMap]]


# ---------------------------------------------------------------------------
# fishnet
# ---------------------------------------------------------------------------

def _axis_positions(length: int, tile: int, overlap: int) -> Tuple[List[int], int]:
    if length <= tile:
        return [0], length
    step = tile - overlap
    n = math.ceil((length - tile) / step) + 1
    pos = [i * step for i in range(n - 1)] + [length - tile]
    return pos, tile


def _axis_cores(pos: Sequence[int], size: int, length: int) -> List[Tuple[int, int]]:
    # each core boundary sits at the midpoint of the overlap of neighbouring tiles
    cuts = [0] + [(pos[i] + pos[i - 1] + size) // 2 for i in range(1, len(pos))] + [length]
    return [(cuts[i], cuts[i + 1]) for i in range(len(pos))]


@dataclass(frozen=True)
class Fishnet:
    extent: Window
    tile: int
    overlap: int
    tiles: Tuple[Window, ...]
    cores: Tuple[Window, ...]
    nx: int
    ny: int

    def __len__(self):
        return len(self.tiles)

    def core_cuts(self):
        """Interior core boundaries as (x positions, y positions), extent-relative."""
        xs = sorted({c.x0 - self.extent.x0 for c in self.cores if c.x0 > self.extent.x0})
        ys = sorted({c.y0 - self.extent.y0 for c in self.cores if c.y0 > self.extent.y0})
        return xs, ys

    def to_dict(self):
        return {
            "extent": self.extent.as_list(),
            "tile": self.tile,
            "overlap": self.overlap,
            "tiles": [t.as_list() for t in self.tiles],
        }

    @classmethod
    def from_dict(cls, d):
        return build_fishnet(Window(*d["extent"]), d["tile"], d["overlap"])


def build_fishnet(extent: Window, tile: int = DEFAULT_TILE, overlap: int = DEFAULT_OVERLAP) -> Fishnet:
    """Row-major grid of ``tile``-sized windows stepping by ``tile - overlap``.

    The last row and column are shifted inward so they end on the extent
    edge. An axis shorter than ``tile`` gets one clamped tile.
    """
    if tile <= 0 or overlap < 0:
        raise ConfigError(f"invalid tile/overlap ({tile}, {overlap})")
    if overlap >= tile:
        raise ConfigError(f"overlap {overlap} must be smaller than tile {tile}")
    if overlap % 2:
        raise ConfigError(f"overlap must be even, got {overlap}")
    xpos, tw = _axis_positions(extent.w, tile, overlap)
    ypos, th = _axis_positions(extent.h, tile, overlap)
    xcores = _axis_cores(xpos, tw, extent.w)
    ycores = _axis_cores(ypos, th, extent.h)
    tiles, cores = [], []
    for y, (cy0, cy1) in zip(ypos, ycores):
        for x, (cx0, cx1) in zip(xpos, xcores):
            tiles.append(Window(extent.x0 + x, extent.y0 + y, tw, th))
            cores.append(Window(extent.x0 + cx0, extent.y0 + cy0, cx1 - cx0, cy1 - cy0))
    return Fishnet(extent, tile, overlap, tuple(tiles), tuple(cores), len(xpos), len(ypos))


# ---------------------------------------------------------------------------
# blend window
# ---------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class BlendWindow:
    size: int
    power: float
    weights_1d: np.ndarray

    def weights_2d(self) -> np.ndarray:
        return np.outer(self.weights_1d, self.weights_1d).astype(np.float32)


def spline_window_1d(size: int, power: float = 2, shape: str = "spline") -> BlendWindow:
    """Symmetric 1-D blending window whose half-shifted copies sum to one.

    ``shape="spline"`` is the piecewise-polynomial window used for smooth
    patch blending: on a half-pixel-centred triangle ``b`` it is
    ``(2b)**power / 2`` in the outer quarters and ``1 - (2(1-b))**power / 2``
    in the middle; ``power=1`` gives the triangle itself. ``shape="sin2"``
    uses ``sin(pi (i + 0.5) / size)**(2 power)`` instead. Either base is
    divided by the sum with its ``size/2``-shifted partner so the partition of
    unity holds to rounding.
    """
    if size < 4 or size % 2:
        raise ConfigError(f"window size must be even and >= 4, got {size}")
    if not power > 0:
        raise ConfigError(f"window power must be > 0, got {power}")
    half = size // 2
    i = np.arange(half, dtype=np.float64)
    if shape == "spline":
        b = (2.0 * i + 1.0) / size
        u = np.where(
            b <= 0.5,
            (2.0 * b) ** power / 2.0,
            1.0 - (2.0 * (1.0 - b)) ** power / 2.0,
        )
    elif shape == "sin2":
        u = np.sin(np.pi * (i + 0.5) / size) ** (2.0 * power)
    else:
        raise ConfigError(f"unknown window shape {shape!r}")
    # position i pairs with i + size/2, which mirrors back onto half - 1 - i
    partner = u[::-1]
    first = (u / (u + partner)).astype(np.float32)
    weights = np.concatenate([first, first[::-1]])
    return BlendWindow(size, power, weights)


# ---------------------------------------------------------------------------
# test-time augmentation
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class TtaTransform:
    """Optional horizontal mirror followed by a quarter-turn rotation.

    A 90 degree turn maps ``[[a, b], [c, d]]`` to ``[[c, a], [d, b]]``.
    """

    rotation: int = 0
    mirror: bool = False

    def __post_init__(self):
        if self.rotation not in (0, 90, 180, 270):
            raise ConfigError(f"rotation must be a multiple of 90, got {self.rotation}")

    def forward(self, arr: np.ndarray) -> np.ndarray:
        if self.mirror:
            arr = arr[:, ::-1]
        return np.rot90(arr, -(self.rotation // 90), axes=(0, 1))

    def inverse(self, arr: np.ndarray) -> np.ndarray:
        arr = np.rot90(arr, self.rotation // 90, axes=(0, 1))
        if self.mirror:
            arr = arr[:, ::-1]
        return arr


DIHEDRAL = tuple(TtaTransform(r, m) for m in (False, True) for r in (0, 90, 180, 270))


def _require_square(r):
    if r.width != r.height:
        raise ShapeError(f"TTA needs a square tile, got {r.width}x{r.height}")


def apply_tta(tile: RasterF32, t: TtaTransform) -> RasterF32:
    _require_square(tile)
    return tile.with_data(t.forward(tile.data))


def invert_tta(h: HeatMap, t: TtaTransform) -> HeatMap:
    _require_square(h)
    return h.with_data(t.inverse(h.data))


# ---------------------------------------------------------------------------
# tiled prediction
# ---------------------------------------------------------------------------

class Predictor(Protocol):
    """Maps a (T, T, bands) image tile to a (T, T, classes) heat map."""

    def __call__(self, tile: RasterF32) -> HeatMap: ...


def _checked(pred, tile: RasterF32, index: int, classes: Optional[int]) -> np.ndarray:
    try:
        out = pred(tile)
    except PredictorError as exc:
        if exc.tile_index is None:
            exc.tile_index = index
        raise
    data = out.data if isinstance(out, HeatMap) else None
    if data is None or data.shape[:2] != tile.data.shape[:2]:
        got = None if data is None else data.shape
        raise PredictorError(
            f"tile {index}: predictor returned {got} for input {tile.data.shape}", index
        )
    if classes is not None and data.shape[2] != classes:
        raise PredictorError(f"tile {index}: expected {classes} classes, got {data.shape[2]}", index)
    return data


def predict_tile(image: RasterF32, win: Window, predictor, tta: bool = False,
                 index: int = 0, classes: Optional[int] = None,
                 edge: str = EDGE_REFLECT) -> HeatMap:
    tile = read_window(image, win, edge)
    if not tta:
        return HeatMap(_checked(predictor, tile, index, classes), tile.geo)
    _require_square(tile)
    acc = None
    for t in DIHEDRAL:
        pred = _checked(predictor, tile.with_data(t.forward(tile.data)), index, classes)
        back = t.inverse(pred).astype(np.float32)
        acc = back if acc is None else acc + back
    # acc holds exact integer sums of u8 levels, so this is the f32 mean probability
    mean = acc / np.float32(len(DIHEDRAL) * 255)
    return HeatMap(quantize_array(mean), tile.geo)


def predict_tiled(image: RasterF32, net: Fishnet, predictor, tta: bool = False,
                  workers: int = 1, edge: str = EDGE_REFLECT) -> TileList:
    """Predict every fishnet tile; results keep the fishnet order."""
    ext = net.extent
    if ext.x1 > image.width or ext.y1 > image.height:
        raise ConfigError(f"fishnet extent {ext} exceeds image {image.width}x{image.height}")

    def run(i):
        return predict_tile(image, net.tiles[i], predictor, tta, i, edge=edge)

    if workers <= 1 or len(net.tiles) == 1:
        maps = [run(i) for i in range(len(net.tiles))]
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            maps = list(pool.map(run, range(len(net.tiles))))
    classes = {m.classes for m in maps}
    if len(classes) > 1:
        raise PredictorError(f"predictor returned inconsistent class counts {sorted(classes)}")
    return list(zip(net.tiles, maps))


# ---------------------------------------------------------------------------
# stitching
# ---------------------------------------------------------------------------

def _infer_fishnet(tiles: TileList, extent: Window, overlap: int) -> Fishnet:
    wins = [w for w, _ in tiles]
    if wins == [extent]:
        return Fishnet(extent, max(extent.w, extent.h), overlap, (extent,), (extent,), 1, 1)
    tw = {w.w for w in wins}
    th = {w.h for w in wins}
    if len(tw) != 1 or len(th) != 1:
        raise StitchError("tiles do not share one size")
    tile = max(tw.pop(), th.pop())
    try:
        net = build_fishnet(extent, tile, overlap)
    except ConfigError as exc:
        raise StitchError(f"tiles are not a fishnet of overlap {overlap}: {exc}") from exc
    if sorted(net.tiles, key=lambda w: (w.y0, w.x0)) != sorted(wins, key=lambda w: (w.y0, w.x0)):
        raise StitchError(f"tile windows do not match a fishnet with tile {tile}, overlap {overlap}")
    return net


def _output_geo(tiles: TileList, extent: Window) -> Optional[GeoRef]:
    win, h = tiles[0]
    if h.geo is None:
        return None
    ps = h.geo.pixel_size
    return GeoRef(h.geo.origin_x - (win.x0 - extent.x0) * ps,
                  h.geo.origin_y + (win.y0 - extent.y0) * ps, ps)


def _classes(tiles: TileList) -> int:
    if not tiles:
        raise StitchError("no tiles to stitch")
    return tiles[0][1].classes


def stitch_clip(tiles: TileList, extent: Window, overlap: int) -> HeatMap:
    """Keep each tile's core; margins of overlap/2 are discarded on inner sides."""
    classes = _classes(tiles)
    net = _infer_fishnet(tiles, extent, overlap)
    core_of = dict(zip(net.tiles, net.cores))
    out = np.zeros((extent.h, extent.w, classes), np.uint8)
    covered = np.zeros((extent.h, extent.w), bool)
    for win, h in tiles:
        core = core_of[win]
        src = h.data[core.y0 - win.y0:core.y1 - win.y0, core.x0 - win.x0:core.x1 - win.x0]
        dst = (slice(core.y0 - extent.y0, core.y1 - extent.y0),
               slice(core.x0 - extent.x0, core.x1 - extent.x0))
        out[dst] = src
        covered[dst] = True
    if not covered.all():
        raise StitchError(f"{int((~covered).sum())} pixels are covered by no tile core")
    return HeatMap(out, _output_geo(tiles, extent))


def stitch_naive(tiles: TileList, extent: Window) -> HeatMap:
    """Paste whole tiles in order, later tiles overwriting earlier ones."""
    classes = _classes(tiles)
    out = np.zeros((extent.h, extent.w, classes), np.uint8)
    covered = np.zeros((extent.h, extent.w), bool)
    for win, h in tiles:
        dst = (slice(win.y0 - extent.y0, win.y1 - extent.y0),
               slice(win.x0 - extent.x0, win.x1 - extent.x0))
        out[dst] = h.data
        covered[dst] = True
    if not covered.all():
        raise StitchError(f"{int((~covered).sum())} pixels are covered by no tile")
    return HeatMap(out, _output_geo(tiles, extent))


def _tile_weights(win: Window, window: BlendWindow) -> np.ndarray:
    w1 = window.weights_1d
    if win.w != window.size or win.h != window.size:
        # clamped tiles on short axes: reuse the window's centre section
        if win.w > window.size or win.h > window.size:
            raise ConfigError(f"tile {win.w}x{win.h} is larger than blend window {window.size}")
        ox, oy = (window.size - win.w) // 2, (window.size - win.h) // 2
        return np.outer(w1[oy:oy + win.h], w1[ox:ox + win.w]).astype(np.float32)
    return window.weights_2d()


def stitch_blend(tiles: TileList, extent: Window, window: BlendWindow,
                 workers: int = 1, band_rows: int = 512) -> HeatMap:
    """Weighted mean of overlapping tiles with separable window weights.

    Numerator and divisor are accumulated in f32 per disjoint row band, so
    bands can be processed by independent workers; the mean is quantized
    once at the end.
    """
    classes = _classes(tiles)
    weights = {}
    for win, _ in tiles:
        key = (win.w, win.h)
        if key not in weights:
            weights[key] = _tile_weights(win, window)
    out = np.zeros((extent.h, extent.w, classes), np.uint8)

    def run_band(r0):
        r1 = min(r0 + band_rows, extent.h)
        num = np.zeros((r1 - r0, extent.w, classes), np.float32)
        den = np.zeros((r1 - r0, extent.w), np.float32)
        for win, h in tiles:
            y0 = max(win.y0 - extent.y0, r0)
            y1 = min(win.y1 - extent.y0, r1)
            if y1 <= y0:
                continue
            ty0 = y0 - (win.y0 - extent.y0)
            tx0 = max(extent.x0 - win.x0, 0)
            tx1 = min(extent.x1 - win.x0, win.w)
            if tx1 <= tx0:
                continue
            w2 = weights[(win.w, win.h)][ty0:ty0 + (y1 - y0), tx0:tx1]
            vals = h.data[ty0:ty0 + (y1 - y0), tx0:tx1].astype(np.float32)
            cols = slice(win.x0 + tx0 - extent.x0, win.x0 + tx1 - extent.x0)
            num[y0 - r0:y1 - r0, cols] += w2[:, :, None] * vals
            den[y0 - r0:y1 - r0, cols] += w2
        if not (den > 0).all():
            raise StitchError(f"zero blend weight in rows {r0}..{r1}")
        mean = num / den[:, :, None] / np.float32(255.0)
        out[r0:r1] = quantize_array(mean)

    starts = range(0, extent.h, band_rows)
    if workers <= 1:
        for r0 in starts:
            run_band(r0)
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            list(pool.map(run_band, starts))
    return HeatMap(out, _output_geo(tiles, extent))


# ---------------------------------------------------------------------------
# seam diagnostics
# ---------------------------------------------------------------------------

def _line_diff(p: np.ndarray, pos: int, axis: int) -> np.ndarray:
    if axis == 1:
        return np.abs(p[:, pos] - p[:, pos - 1])
    return np.abs(p[pos] - p[pos - 1])


def seam_score(h: HeatMap, net: Fishnet, controls: int = 8, max_shift: int = 16,
               seed: int = 0) -> float:
    """Excess cross-boundary difference at tile-core boundaries.

    Mean absolute probability jump across every interior core boundary minus
    the same statistic on control lines shifted by up to ``max_shift`` pixels.
    Positive values mean seams stand out from the surrounding texture.
    """
    xs, ys = net.core_cuts()
    if not xs and not ys:
        return 0.0
    p = h.data.astype(np.float64) / 255.0
    rng = np.random.default_rng(seed)
    bvals, cvals = [], []
    for cuts, axis, length in ((xs, 1, h.width), (ys, 0, h.height)):
        taken = set(cuts)
        for pos in cuts:
            bvals.append(_line_diff(p, pos, axis).mean())
            cand = [pos + s for s in range(-max_shift, max_shift + 1)
                    if s != 0 and 1 <= pos + s < length and pos + s not in taken]
            if not cand:
                continue
            pick = rng.choice(len(cand), size=min(controls, len(cand)), replace=False)
            for k in sorted(pick):
                cvals.append(_line_diff(p, cand[k], axis).mean())
    control = float(np.mean(cvals)) if cvals else 0.0
    return float(np.mean(bvals)) - control
