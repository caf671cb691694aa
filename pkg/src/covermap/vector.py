"""Heat map to vector land-cover objects via two-level thresholding.

Per class: binarize at ``low`` -> 8-connected components -> mean probability
per component -> keep components whose mean reaches ``high`` and whose area
reaches ``min_area`` -> trace pixel-boundary rings -> Douglas-Peucker.

Rings are traced on the pixel lattice with the object on the left-hand
side, which makes exteriors counter-clockwise and holes clockwise in map
coordinates (y up). Where two object pixels touch only at a corner the
trace keeps them in one ring, matching 8-connected foreground and
4-connected holes.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import _kernels
from .errors import ConfigError, GeometryError, ShapeError
from .raster import GeoRef, HeatMap

DEFAULT_LOW = 102
DEFAULT_HIGH = 153


@dataclass(frozen=True)
class ThresholdPair:
    low: int = DEFAULT_LOW
    high: int = DEFAULT_HIGH

    def __post_init__(self):
        if not (0 <= self.low <= self.high <= 255):
            raise ConfigError(f"need 0 <= low <= high <= 255, got {self.low}, {self.high}")


@dataclass
class CoverObject:
    class_id: int
    exterior: np.ndarray
    holes: List[np.ndarray]
    mean_prob: float
    area: float
    pixel_count: int
    label: int = 0


@dataclass
class CoverMap:
    objects: List[CoverObject]
    classes: Sequence[str]
    geo: GeoRef

    def to_geojson(self) -> str:
        feats = []
        for o in self.objects:
            rings = [o.exterior] + list(o.holes)
            feats.append({
                "type": "Feature",
                "properties": {
                    "class": self.classes[o.class_id],
                    "mean_prob": round(float(o.mean_prob), 4),
                    "area_m2": float(o.area),
                    "pixel_count": int(o.pixel_count),
                },
                "geometry": {
                    "type": "Polygon",
                    "coordinates": [[[round(float(x), 3), round(float(y), 3)] for x, y in r] for r in rings],
                },
            })
        return json.dumps({"type": "FeatureCollection", "features": feats}, separators=(",", ":"))

    def summary_csv(self) -> str:
        buf = io.StringIO()
        out = csv.writer(buf, lineterminator="\n")
        out.writerow(["class", "count", "total_area"])
        for cid, name in enumerate(self.classes):
            objs = [o for o in self.objects if o.class_id == cid]
            out.writerow([name, len(objs), repr(float(sum(o.area for o in objs)))])
        return buf.getvalue()


# ---------------------------------------------------------------------------
# raster stages
# ---------------------------------------------------------------------------

def binarize(h: HeatMap, class_id: int, low: int) -> np.ndarray:
    if not 0 <= class_id < h.classes:
        raise ConfigError(f"class {class_id} out of range for {h.classes} classes")
    return (h.data[:, :, class_id] >= low).astype(np.uint8)


def connected_components(b: np.ndarray, connectivity: int = 8) -> Tuple[np.ndarray, int]:
    """Two-pass union-find labelling; labels follow row-major first-pixel order."""
    if connectivity not in (4, 8):
        raise ConfigError(f"connectivity must be 4 or 8, got {connectivity}")
    b = np.ascontiguousarray(np.asarray(b) != 0, dtype=np.uint8)
    if b.ndim != 2:
        raise ShapeError(f"binary plane must be 2-D, got {b.shape}")
    lab, n = _kernels.ccl(b, connectivity == 8)
    return lab, int(n)


def object_sums(h: HeatMap, labels: np.ndarray, class_id: int, n: Optional[int] = None):
    """Pixel counts and u8 value sums per label (index 0 is background)."""
    n = int(labels.max()) if n is None else n
    flat = labels.ravel()
    counts = np.bincount(flat, minlength=n + 1).astype(np.int64)
    sums = np.bincount(flat, weights=h.data[:, :, class_id].ravel(), minlength=n + 1)
    return counts, np.rint(sums).astype(np.int64)


def mean_prob_per_object(h: HeatMap, labels: np.ndarray, class_id: int) -> Dict[int, float]:
    n = int(labels.max(initial=0))
    if n == 0:
        return {}
    counts, sums = object_sums(h, labels, class_id, n)
    return {i: float(sums[i] / (counts[i] * 255.0)) for i in range(1, n + 1) if counts[i] > 0}


def filter_objects(objects: Sequence[int], mean_probs, high: int, min_area: float,
                   areas=None, sums=None, counts=None) -> List[int]:
    """Labels whose mean probability reaches ``high / 255`` and area ``min_area``.

    When integer ``sums`` and ``counts`` are given the probability test is done
    exactly as ``sum >= high * count``.
    """
    keep = []
    for lab in objects:
        if sums is not None and counts is not None:
            ok = sums[lab] >= high * counts[lab]
        else:
            ok = mean_probs[lab] >= high / 255.0
        if ok and (areas is None or areas[lab] >= min_area):
            keep.append(lab)
    return keep


# ---------------------------------------------------------------------------
# boundary tracing
# ---------------------------------------------------------------------------

def _boundary_edges(labels: np.ndarray):
    h, w = labels.shape
    pad = np.zeros((h + 2, w + 2), labels.dtype)
    pad[1:-1, 1:-1] = labels
    core = pad[1:-1, 1:-1]
    fg = core > 0
    parts = []
    # (neighbour slice, start offset, end offset, direction)
    specs = (
        (pad[1:-1, :-2], (0, 0), (0, 1), _kernels.DOWN),
        (pad[2:, 1:-1], (0, 1), (1, 1), _kernels.EAST),
        (pad[1:-1, 2:], (1, 1), (1, 0), _kernels.UP),
        (pad[:-2, 1:-1], (1, 0), (0, 0), _kernels.WEST),
    )
    for nb, (sdx, sdy), (edx, edy), d in specs:
        rr, cc = np.nonzero(fg & (nb != core))
        parts.append((cc + sdx, rr + sdy, cc + edx, rr + edy, np.full(rr.size, d, np.int8), core[rr, cc]))
    sx, sy, ex, ey, dirs, lab = (np.concatenate(x) for x in zip(*parts))
    return sx.astype(np.int64), sy.astype(np.int64), ex.astype(np.int64), ey.astype(np.int64), dirs, lab.astype(np.int64)


def trace_rings(labels: np.ndarray):
    """Closed lattice rings of every labelled region.

    Returns ``(rings, ring_labels)`` where each ring is an ``(n, 2)`` int
    array of (column, row) lattice vertices, first vertex repeated at the end.
    Collinear vertices are dropped.
    """
    labels = np.ascontiguousarray(labels)
    h, w = labels.shape
    sx, sy, ex, ey, dirs, lab = _boundary_edges(labels)
    if sx.size == 0:
        return [], np.zeros(0, np.int64)
    nv = (h + 1) * (w + 1)
    skey = lab * nv + sy * (w + 1) + sx
    order = np.argsort(skey, kind="stable")
    sorted_keys = skey[order]
    ekey = lab * nv + ey * (w + 1) + ex
    lo = np.searchsorted(sorted_keys, ekey, side="left")
    hi = np.searchsorted(sorted_keys, ekey, side="right")
    first = order[lo]
    nxt = first.copy()
    pinch = np.nonzero(hi - lo == 2)[0]
    if pinch.size:
        # at a corner-touching vertex take the right turn so diagonal pixels stay joined
        second = order[lo[pinch] + 1]
        want = (dirs[pinch] + 3) % 4
        nxt[pinch] = np.where(dirs[first[pinch]] == want, first[pinch], second)
    coords, starts, rlabels = _kernels.walk_rings(
        order.astype(np.int64), nxt.astype(np.int64), sx, sy, dirs.astype(np.int64), lab
    )
    rings = []
    for i in range(len(rlabels)):
        r = coords[starts[i]:starts[i + 1]]
        rings.append(np.vstack([r, r[:1]]))
    return rings, np.asarray(rlabels)


def lattice_to_map(ring: np.ndarray, geo: GeoRef) -> np.ndarray:
    ring = np.asarray(ring, np.float64)
    return np.column_stack([geo.origin_x + ring[:, 0] * geo.pixel_size,
                            geo.origin_y - ring[:, 1] * geo.pixel_size])


def signed_area(ring: np.ndarray) -> float:
    """Shoelace area of a closed ring; positive when counter-clockwise (y up)."""
    x, y = ring[:, 0], ring[:, 1]
    return 0.5 * float(np.dot(x[:-1], y[1:]) - np.dot(x[1:], y[:-1]))


def trace_polygons(labels: np.ndarray, geo: GeoRef) -> Dict[int, Tuple[np.ndarray, List[np.ndarray]]]:
    """Map-unit (exterior, holes) for every label of a component plane."""
    rings, rlab = trace_rings(labels)
    out: Dict[int, Tuple[Optional[np.ndarray], List[np.ndarray]]] = {}
    for ring, lab in zip(rings, rlab.tolist()):
        m = lattice_to_map(ring, geo)
        ext, holes = out.get(lab, (None, []))
        if signed_area(m) > 0:
            if ext is not None:
                raise GeometryError(f"label {lab} traced to several exteriors")
            ext = m
        else:
            holes.append(m)
        out[lab] = (ext, holes)
    return out


# ---------------------------------------------------------------------------
# simplification
# ---------------------------------------------------------------------------

def _hull(pts: np.ndarray) -> np.ndarray:
    # monotone chain; returns indices into pts
    idx = np.lexsort((pts[:, 1], pts[:, 0]))
    p = pts[idx]

    def cross(o, a, b):
        return (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])

    lower, upper = [], []
    for k in range(len(p)):
        while len(lower) >= 2 and cross(p[lower[-2]], p[lower[-1]], p[k]) <= 0:
            lower.pop()
        lower.append(k)
    for k in range(len(p) - 1, -1, -1):
        while len(upper) >= 2 and cross(p[upper[-2]], p[upper[-1]], p[k]) <= 0:
            upper.pop()
        upper.append(k)
    return idx[np.array(lower[:-1] + upper[:-1])]


def _farthest_pair(pts: np.ndarray) -> Tuple[int, int]:
    cand = _hull(pts) if len(pts) > 3 else np.arange(len(pts))
    cand = np.sort(cand)
    c = pts[cand]
    d2 = ((c[:, None, :] - c[None, :, :]) ** 2).sum(-1)
    i, j = np.unravel_index(np.argmax(d2), d2.shape)
    i, j = sorted((int(cand[i]), int(cand[j])))
    return i, j


def simplify(ring, tolerance: float) -> np.ndarray:
    """Douglas-Peucker on a closed ring anchored at its two most distant vertices.

    Removed vertices lie within ``tolerance`` of the retained segment that
    replaces them. If fewer than three vertices would survive, the vertex
    farthest from the anchor chord is kept as well.
    """
    ring = np.asarray(ring, np.float64)
    if ring.ndim != 2 or len(ring) < 4 or not np.array_equal(ring[0], ring[-1]):
        raise GeometryError("simplify needs a closed ring with at least 4 vertices")
    if tolerance < 0:
        raise ConfigError(f"tolerance must be >= 0, got {tolerance}")
    pts = ring[:-1]
    n = len(pts)
    i, j = _farthest_pair(pts)
    # rotate so the chain runs i -> j -> i
    order = np.r_[np.arange(i, n), np.arange(0, i)]
    p = pts[order]
    jj = j - i
    a = _kernels.dp_keep(np.ascontiguousarray(p[: jj + 1]), float(tolerance))
    b = _kernels.dp_keep(np.ascontiguousarray(np.vstack([p[jj:], p[:1]])), float(tolerance))
    keep = np.zeros(n, bool)
    keep[: jj + 1] |= a
    keep[jj:] |= b[:-1]
    if keep.sum() < 3:
        chord_a, chord_b = p[0], p[jj]
        ab = chord_b - chord_a
        cross = np.abs(ab[0] * (p[:, 1] - chord_a[1]) - ab[1] * (p[:, 0] - chord_a[0]))
        cross[keep] = -1
        keep[int(np.argmax(cross))] = True
    out = p[keep]
    k0 = (n - i) % n
    if keep[k0]:
        # start from the original first vertex when it survived
        out = np.roll(out, -int(keep[:k0].sum()), axis=0)
    return np.vstack([out, out[:1]])


# ---------------------------------------------------------------------------
# full chain
# ---------------------------------------------------------------------------

def vectorize_class(h: HeatMap, class_id: int, thresholds: ThresholdPair, min_area: float,
                    tolerance: float, geo: GeoRef) -> List[CoverObject]:
    b = binarize(h, class_id, thresholds.low)
    labels, n = connected_components(b, 8)
    if n == 0:
        return []
    counts, sums = object_sums(h, labels, class_id, n)
    areas = counts * geo.pixel_size ** 2
    keep = filter_objects(range(1, n + 1), None, thresholds.high, min_area,
                          areas=areas, sums=sums, counts=counts)
    if not keep:
        return []
    lut = np.zeros(n + 1, labels.dtype)
    lut[keep] = keep
    polys = trace_polygons(lut[labels], geo)
    out = []
    for lab in keep:
        ext, holes = polys[lab]
        if tolerance > 0:
            ext = simplify(ext, tolerance)
            holes = [simplify(r, tolerance) for r in holes]
        out.append(CoverObject(
            class_id=class_id,
            exterior=ext,
            holes=holes,
            mean_prob=float(np.float32(sums[lab] / (counts[lab] * 255.0))),
            area=float(areas[lab]),
            pixel_count=int(counts[lab]),
            label=int(lab),
        ))
    return out


def build_cover_map(h: HeatMap, thresholds=None, min_area: float = 0.0, tolerance: float = 0.0,
                    class_names: Optional[Sequence[str]] = None, geo: Optional[GeoRef] = None,
                    workers: int = 1) -> CoverMap:
    """Vectorize every class independently; objects ordered by class then label."""
    geo = geo or h.geo or GeoRef()
    names = list(class_names) if class_names else [f"class_{i}" for i in range(h.classes)]
    if len(names) != h.classes:
        raise ConfigError(f"{len(names)} class names for {h.classes} classes")
    if thresholds is None:
        thresholds = ThresholdPair()
    if isinstance(thresholds, ThresholdPair):
        thresholds = [thresholds] * h.classes
    if len(thresholds) != h.classes:
        raise ConfigError(f"{len(thresholds)} threshold pairs for {h.classes} classes")

    def run(c):
        return vectorize_class(h, c, thresholds[c], min_area, tolerance, geo)

    if workers > 1:
        from concurrent.futures import ThreadPoolExecutor

        with ThreadPoolExecutor(max_workers=workers) as pool:
            per_class = list(pool.map(run, range(h.classes)))
    else:
        per_class = [run(c) for c in range(h.classes)]
    return CoverMap([o for objs in per_class for o in objs], names, geo)
