"""Raster containers, windowed reads, probability quantization and file I/O.

All containers store pixel-major (band-interleaved-by-pixel) arrays of shape
``(height, width, bands)`` so that the per-pixel class vector is contiguous.
Arrays are wrapped in read-only views on construction.

The native container is CMR1, a little-endian binary format::

    magic "CMR1" | dtype u8 (0=u8, 1=f32) | width u32 | height u32 | bands u32
    | geo_flag u8 | [origin_x f64 | origin_y f64 | pixel_size f64] | payload

Uncompressed pixel-interleaved TIFF is supported for interchange through
``tifffile``.
"""

from __future__ import annotations

import json
import os
import struct
import warnings
from dataclasses import dataclass, field
from typing import Optional, Union

import numpy as np

from .errors import FormatError, RasterIOError, ShapeError, WindowError

MAGIC = b"CMR1"
_HEADER = struct.Struct("<4sBIIIB")
_GEO = struct.Struct("<ddd")
DTYPE_U8 = 0
DTYPE_F32 = 1
MAX_PAYLOAD_BYTES = 4 * 1024**3

EDGE_REFLECT = "reflect"
EDGE_ZERO = "zero"


class LabelMaskWarning(UserWarning):
    """Stored complementary band disagreed with the class bands."""


@dataclass(frozen=True)
class GeoRef:
    """Top-left origin and square pixel size in map units (north-up)."""

    origin_x: float = 0.0
    origin_y: float = 0.0
    pixel_size: float = 0.2

    def __post_init__(self):
        if not self.pixel_size > 0:
            raise FormatError(f"pixel_size must be > 0, got {self.pixel_size}")

    def shifted(self, x0: int, y0: int) -> "GeoRef":
        return GeoRef(
            self.origin_x + x0 * self.pixel_size,
            self.origin_y - y0 * self.pixel_size,
            self.pixel_size,
        )


@dataclass(frozen=True)
class Window:
    x0: int
    y0: int
    w: int
    h: int

    def __post_init__(self):
        if self.x0 < 0 or self.y0 < 0:
            raise WindowError(f"negative window offset in {self}")
        if self.w <= 0 or self.h <= 0:
            raise WindowError(f"empty window {self}")

    @property
    def x1(self) -> int:
        return self.x0 + self.w

    @property
    def y1(self) -> int:
        return self.y0 + self.h

    @property
    def slices(self):
        return slice(self.y0, self.y1), slice(self.x0, self.x1)

    def intersection(self, other: "Window") -> Optional["Window"]:
        x0, y0 = max(self.x0, other.x0), max(self.y0, other.y0)
        x1, y1 = min(self.x1, other.x1), min(self.y1, other.y1)
        if x1 <= x0 or y1 <= y0:
            return None
        return Window(x0, y0, x1 - x0, y1 - y0)

    def as_list(self):
        return [self.x0, self.y0, self.w, self.h]


def _frozen(arr: np.ndarray) -> np.ndarray:
    view = arr.view()
    view.flags.writeable = False
    return view


@dataclass(frozen=True, eq=False)
class _Raster:
    data: np.ndarray
    geo: Optional[GeoRef] = None

    _dtype = None

    def __post_init__(self):
        arr = np.asarray(self.data)
        if arr.ndim == 2:
            arr = arr[:, :, None]
        if arr.ndim != 3:
            raise ShapeError(f"expected (height, width, bands) array, got shape {arr.shape}")
        if min(arr.shape) <= 0:
            raise ShapeError(f"raster dimensions must be positive, got {arr.shape}")
        arr = np.ascontiguousarray(arr, dtype=self._dtype)
        object.__setattr__(self, "data", _frozen(arr))

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def bands(self) -> int:
        return self.data.shape[2]

    @property
    def shape(self):
        return self.data.shape

    @property
    def extent(self) -> Window:
        return Window(0, 0, self.width, self.height)

    def with_data(self, data, geo="keep"):
        return type(self)(data, self.geo if geo == "keep" else geo)

    def __eq__(self, other):
        if type(other) is not type(self):
            return NotImplemented
        return (
            self.geo == other.geo
            and self.data.shape == other.data.shape
            and self.data.tobytes() == other.data.tobytes()
        )

    __hash__ = None


class RasterF32(_Raster):
    """Float32 image stack, e.g. the 5-band R, G, B, IR, DHM input."""

    _dtype = np.float32


class HeatMap(_Raster):
    """Per-class probability raster quantized to u8 (probability = value / 255)."""

    _dtype = np.uint8

    @property
    def classes(self) -> int:
        return self.bands

    def probabilities(self) -> np.ndarray:
        return dequantize_array(self.data)


class LabelMask(_Raster):
    """Binary multilabel mask with ``classes + 1`` bands.

    The last band is the complementary (unlabelled) band. It is always
    recomputed from the class bands; pass ``validate=True`` to warn when a
    stored complementary band disagrees.
    """

    _dtype = np.uint8

    def __init__(self, data, geo=None, validate=False):
        arr = np.asarray(data)
        if arr.ndim != 3 or arr.shape[2] < 2:
            raise ShapeError(f"label mask needs >= 2 bands, got shape {arr.shape}")
        if arr.dtype != np.uint8 or arr.max(initial=0) > 1:
            if np.any((arr != 0) & (arr != 1)):
                raise FormatError("label mask values must be 0 or 1")
        arr = np.array(arr, dtype=np.uint8, order="C")
        derived = (~np.any(arr[:, :, :-1], axis=2)).astype(np.uint8)
        if validate and not np.array_equal(derived, arr[:, :, -1]):
            warnings.warn(
                "stored complementary band disagrees with class bands; recomputed",
                LabelMaskWarning,
                stacklevel=2,
            )
        arr[:, :, -1] = derived
        super().__init__(arr, geo)

    @classmethod
    def from_classes(cls, class_bands, geo=None) -> "LabelMask":
        bands = np.asarray(class_bands).astype(np.uint8)
        if bands.ndim == 2:
            bands = bands[:, :, None]
        pad = np.zeros(bands.shape[:2] + (1,), np.uint8)
        return cls(np.concatenate([bands, pad], axis=2), geo)

    @classmethod
    def from_label_image(cls, labels, classes: int, geo=None) -> "LabelMask":
        """Build from an integer image where -1 marks unlabelled pixels."""
        labels = np.asarray(labels)
        bands = labels[:, :, None] == np.arange(classes)[None, None, :]
        return cls.from_classes(bands, geo)

    def with_data(self, data, geo="keep"):
        return LabelMask(data, self.geo if geo == "keep" else geo)

    @property
    def classes(self) -> int:
        return self.bands - 1

    @property
    def class_bands(self) -> np.ndarray:
        return self.data[:, :, :-1]

    @property
    def complementary(self) -> np.ndarray:
        return self.data[:, :, -1]

    @property
    def valid(self) -> np.ndarray:
        """Boolean plane of labelled pixels."""
        return self.data[:, :, -1] == 0


AnyRaster = Union[RasterF32, HeatMap, LabelMask]


# ---------------------------------------------------------------------------
# quantization
# ---------------------------------------------------------------------------

def quantize_array(p) -> np.ndarray:
    """Probabilities to u8 with clamping and round-half-away-from-zero.

    NaN maps to 0.
    """
    p = np.nan_to_num(np.asarray(p, dtype=np.float64), nan=0.0)
    p = np.clip(p, 0.0, 1.0)
    return np.floor(p * 255.0 + 0.5).astype(np.uint8)


def dequantize_array(v) -> np.ndarray:
    return np.asarray(v, dtype=np.float32) / np.float32(255.0)


def quantize(r: RasterF32) -> HeatMap:
    return HeatMap(quantize_array(r.data), r.geo)


def dequantize(h: HeatMap) -> RasterF32:
    return RasterF32(dequantize_array(h.data), h.geo)


# ---------------------------------------------------------------------------
# windowed access
# ---------------------------------------------------------------------------

def _reflect_index(idx: np.ndarray, n: int) -> np.ndarray:
    # symmetric reflection: ... c d | d c b a | a b ...
    m = np.mod(idx, 2 * n)
    return np.where(m < n, m, 2 * n - 1 - m)


def read_window(r: AnyRaster, win: Window, edge: str = EDGE_REFLECT) -> AnyRaster:
    """Read ``win`` from ``r``; overhanging pixels follow ``edge`` (reflect or zero)."""
    if win.intersection(r.extent) is None:
        raise WindowError(f"window {win} does not intersect raster {r.width}x{r.height}")
    geo = r.geo.shifted(win.x0, win.y0) if r.geo is not None else None
    if win.x1 <= r.width and win.y1 <= r.height:
        return r.with_data(r.data[win.slices], geo)

    cols = np.arange(win.x0, win.x1)
    rows = np.arange(win.y0, win.y1)
    if edge == EDGE_REFLECT:
        out = r.data[_reflect_index(rows, r.height)][:, _reflect_index(cols, r.width)]
    elif edge == EDGE_ZERO:
        out = np.zeros((win.h, win.w, r.bands), r.data.dtype)
        inside = win.intersection(r.extent)
        out[inside.y0 - win.y0:inside.y1 - win.y0, inside.x0 - win.x0:inside.x1 - win.x0] = (
            r.data[inside.slices]
        )
    else:
        raise WindowError(f"unknown edge policy {edge!r}")
    return r.with_data(out, geo)


# ---------------------------------------------------------------------------
# CMR1 I/O
# ---------------------------------------------------------------------------

def encode_cmr1(r: AnyRaster) -> bytes:
    dtype = DTYPE_F32 if isinstance(r, RasterF32) else DTYPE_U8
    head = _HEADER.pack(MAGIC, dtype, r.width, r.height, r.bands, 1 if r.geo else 0)
    if r.geo is not None:
        head += _GEO.pack(r.geo.origin_x, r.geo.origin_y, r.geo.pixel_size)
    payload = r.data.astype("<f4" if dtype == DTYPE_F32 else np.uint8, copy=False)
    return head + payload.tobytes()


def decode_cmr1(buf: bytes, kind: Optional[str] = None) -> AnyRaster:
    """Parse CMR1 bytes.

    ``kind`` selects the container for u8 payloads: ``"heat"`` (default) or
    ``"label"``. f32 payloads always decode to :class:`RasterF32`.
    """
    if len(buf) < _HEADER.size:
        raise FormatError("truncated CMR1 header")
    magic, dtype, width, height, bands, geo_flag = _HEADER.unpack_from(buf, 0)
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r}")
    if dtype not in (DTYPE_U8, DTYPE_F32):
        raise FormatError(f"unknown dtype code {dtype}")
    if width == 0 or height == 0 or bands == 0:
        raise FormatError(f"zero dimension in header ({width}x{height}x{bands})")
    if geo_flag not in (0, 1):
        raise FormatError(f"bad geo flag {geo_flag}")
    itemsize = 4 if dtype == DTYPE_F32 else 1
    nbytes = width * height * bands * itemsize
    if nbytes > MAX_PAYLOAD_BYTES:
        raise FormatError(f"payload of {nbytes} bytes exceeds the 4 GiB limit")
    offset = _HEADER.size
    geo = None
    if geo_flag:
        if len(buf) < offset + _GEO.size:
            raise FormatError("truncated geo block")
        ox, oy, ps = _GEO.unpack_from(buf, offset)
        if not ps > 0:
            raise FormatError(f"non-positive pixel size {ps}")
        geo = GeoRef(ox, oy, ps)
        offset += _GEO.size
    if len(buf) - offset != nbytes:
        raise FormatError(f"payload is {len(buf) - offset} bytes, header implies {nbytes}")
    arr = np.frombuffer(buf, dtype="<f4" if itemsize == 4 else np.uint8, offset=offset)
    arr = arr.reshape(height, width, bands)
    if dtype == DTYPE_F32:
        if kind not in (None, "image"):
            raise FormatError(f"f32 payload cannot be read as {kind!r}")
        return RasterF32(arr.astype(np.float32), geo)
    if kind == "label":
        return LabelMask(arr, geo, validate=True)
    if kind not in (None, "heat"):
        raise FormatError(f"u8 payload cannot be read as {kind!r}")
    return HeatMap(arr, geo)


def save_raster(r: AnyRaster, path) -> None:
    path = os.fspath(path)
    if path.lower().endswith((".tif", ".tiff")):
        return save_tiff(r, path)
    try:
        with open(path, "wb") as fh:
            fh.write(encode_cmr1(r))
    except OSError as exc:
        raise RasterIOError(f"cannot write {path}: {exc}") from exc


def load_raster(path, kind: Optional[str] = None) -> AnyRaster:
    path = os.fspath(path)
    if path.lower().endswith((".tif", ".tiff")):
        return load_tiff(path, kind)
    try:
        with open(path, "rb") as fh:
            buf = fh.read()
    except OSError as exc:
        raise RasterIOError(f"cannot read {path}: {exc}") from exc
    return decode_cmr1(buf, kind)


def save_tiff(r: AnyRaster, path) -> None:
    import tifffile

    desc = {"covermap": "LabelMask" if isinstance(r, LabelMask) else type(r).__name__}
    if r.geo is not None:
        desc["geo"] = [r.geo.origin_x, r.geo.origin_y, r.geo.pixel_size]
    try:
        tifffile.imwrite(
            path,
            np.asarray(r.data),
            photometric="minisblack",
            planarconfig="contig",
            compression=None,
            description=json.dumps(desc),
            metadata=None,
        )
    except OSError as exc:
        raise RasterIOError(f"cannot write {path}: {exc}") from exc


def load_tiff(path, kind: Optional[str] = None) -> AnyRaster:
    import tifffile

    try:
        with tifffile.TiffFile(path) as tif:
            arr = tif.asarray()
            desc = tif.pages[0].description or ""
    except OSError as exc:
        raise RasterIOError(f"cannot read {path}: {exc}") from exc
    try:
        meta = json.loads(desc)
    except ValueError:
        meta = {}
    geo = GeoRef(*meta["geo"]) if "geo" in meta else None
    if arr.ndim == 2:
        arr = arr[:, :, None]
    if arr.dtype == np.float32:
        return RasterF32(arr, geo)
    if arr.dtype != np.uint8:
        raise FormatError(f"unsupported TIFF dtype {arr.dtype}")
    if kind is None and meta.get("covermap") == "LabelMask":
        kind = "label"
    if kind == "label":
        return LabelMask(arr, geo, validate=True)
    return HeatMap(arr, geo)
