"""Synthetic scenes and built-in predictors for model-free runs.

A scene paints non-touching primitives (rectangles, disks, stripes) of each
class on an unlabelled background. Every class has a spectral signature in
the 5-band stack; the ideal heat map is a per-pixel function of the image
(inverse-distance memberships to the signatures), so the ``oracle``
predictor is exactly equivariant to translation, rotation and mirroring.
"""

from __future__ import annotations

import zlib
from dataclasses import dataclass, field
from itertools import combinations
from typing import List, Optional, Sequence, Tuple

import numpy as np

from . import _kernels
from .errors import ConfigError
from .losses import CLASS_NAMES, CLASS_FREQUENCY
from .raster import GeoRef, HeatMap, LabelMask, RasterF32, quantize_array

BANDS = 5
BACKGROUND_LEVEL = 0.15
SIGNATURE_GAIN = 0.5
ORACLE_SOFTNESS = 0.005
ARTIFACT_AMPLITUDE = 60 / 255
ARTIFACT_DEPTH = 235

# band pairs lit by each class; any two pairs share at most one band
_BAND_PAIRS = [(2, 4), (3, 4), (1, 3), (0, 2), (0, 1), (0, 3), (2, 3), (1, 2), (1, 4), (0, 4)]
assert sorted(_BAND_PAIRS) == sorted(combinations(range(BANDS), 2))


def signatures(classes: int) -> np.ndarray:
    """(classes + 1, 5) band signatures, background first."""
    if not 1 <= classes <= len(_BAND_PAIRS):
        raise ConfigError(f"synthetic scenes support 1..{len(_BAND_PAIRS)} classes, got {classes}")
    sig = np.full((classes + 1, BANDS), BACKGROUND_LEVEL)
    for c, (i, j) in enumerate(_BAND_PAIRS[:classes]):
        sig[c + 1, [i, j]] += SIGNATURE_GAIN / np.sqrt(2.0)
    return sig


def default_class_names(classes: int) -> List[str]:
    return list(CLASS_NAMES[:classes]) + [f"class_{i}" for i in range(len(CLASS_NAMES), classes)]


@dataclass
class Primitive:
    class_id: int
    kind: str
    bbox: Tuple[int, int, int, int]


@dataclass
class SyntheticScene:
    seed: int
    size: int
    classes: int
    image: RasterF32
    truth: LabelMask
    heat: HeatMap
    primitives: List[Primitive]
    class_names: List[str]
    signatures: np.ndarray

    def primitive_counts(self) -> np.ndarray:
        counts = np.zeros(self.classes, int)
        for p in self.primitives:
            counts[p.class_id] += 1
        return counts


def _paint_cells(rng, size: int, classes: int):
    cell = max(16, size // 16)
    ny = nx = size // cell
    n = nx * ny
    owner = np.full((size, size), -1, np.int16)
    prims = []
    order = rng.permutation(n)
    filled = max(classes * 2, int(round(n * 0.8)))
    for k, idx in enumerate(order[:min(filled, n)]):
        c = k % classes
        cy, cx = divmod(int(idx), nx)
        y0, x0 = cy * cell + 2, cx * cell + 2
        span = cell - 4
        kind = ("rect", "disk", "stripe")[int(rng.integers(0, 3))]
        if kind == "rect":
            hh = int(rng.integers(max(4, int(span * 0.55)), span + 1))
            ww = int(rng.integers(max(4, int(span * 0.55)), span + 1))
            oy = int(rng.integers(0, span - hh + 1))
            ox = int(rng.integers(0, span - ww + 1))
            owner[y0 + oy:y0 + oy + hh, x0 + ox:x0 + ox + ww] = c
            bbox = (x0 + ox, y0 + oy, ww, hh)
        elif kind == "disk":
            r = rng.uniform(0.3, 0.5) * span
            cyf, cxf = y0 + span / 2.0, x0 + span / 2.0
            yy, xx = np.mgrid[y0:y0 + span, x0:x0 + span]
            m = (yy + 0.5 - cyf) ** 2 + (xx + 0.5 - cxf) ** 2 <= r * r
            owner[y0:y0 + span, x0:x0 + span][m] = c
            bbox = (x0, y0, span, span)
        else:
            width = max(3, span // 6)
            off = int(rng.integers(0, span - width + 1))
            if rng.random() < 0.5:
                owner[y0 + off:y0 + off + width, x0:x0 + span] = c
                bbox = (x0, y0 + off, span, width)
            else:
                owner[y0:y0 + span, x0 + off:x0 + off + width] = c
                bbox = (x0 + off, y0, width, span)
        prims.append(Primitive(c, kind, bbox))
    bands = owner[:, :, None] == np.arange(classes)[None, None, :]
    return bands, prims


def _cuts(shares: Sequence[float], size: int) -> List[int]:
    cum = np.concatenate([[0.0], np.cumsum(shares)])
    return [int(np.floor(v * size + 0.5)) for v in cum]


def _paint_imbalanced(rng, size: int, classes: int):
    """Class bands with the reference per-class frequencies.

    Forest and grassland share an overlap band so multilabel pixels make up
    the difference between the summed frequencies and one.
    """
    if classes != 7:
        raise ConfigError("the imbalanced preset is defined for 7 classes")
    freq = list(CLASS_FREQUENCY[:7])
    multi = sum(CLASS_FREQUENCY) - 1.0
    forest, grass = 1, 2
    # segments: (class ids, share)
    segs = [((c,), freq[c]) for c in range(7) if c not in (forest, grass)]
    pair = [((forest,), freq[forest] - multi), ((forest, grass), multi), ((grass,), freq[grass] - multi)]
    segs.append(((), CLASS_FREQUENCY[7]))
    order = list(rng.permutation(len(segs)))
    layout = []
    for k in order:
        layout.append(segs[k])
        if k == 0:
            layout.extend(pair)
    cuts = _cuts([s for _, s in layout], size)
    bands = np.zeros((size, size, classes), bool)
    prims = []
    vertical = bool(rng.random() < 0.5)
    for (ids, _), a, b in zip(layout, cuts[:-1], cuts[1:]):
        if b <= a:
            continue
        for c in ids:
            if vertical:
                bands[:, a:b, c] = True
            else:
                bands[a:b, :, c] = True
            prims.append(Primitive(c, "rect", (a, 0, b - a, size) if vertical else (0, a, size, b - a)))
    return bands, prims


def render_image(bands: np.ndarray, sig: np.ndarray, rng, noise: float) -> np.ndarray:
    """Per-pixel mean of the signatures of the classes present (background if none)."""
    h, w, c = bands.shape
    weights = np.concatenate([~bands.any(axis=2, keepdims=True), bands], axis=2).astype(np.float64)
    weights /= weights.sum(axis=2, keepdims=True)
    img = np.zeros((h, w, sig.shape[1]))
    for k in range(sig.shape[0]):
        img += weights[:, :, k:k + 1] * sig[k]
    if noise > 0:
        img += rng.normal(0.0, noise, img.shape)
    return np.clip(img, 0.0, 1.0).astype(np.float32)


def generate_scene(seed: int = 0, size: int = 512, classes: int = 7, preset: str = "default",
                   noise: float = 0.01, pixel_size: float = 0.2) -> SyntheticScene:
    """Deterministic synthetic scene: 5-band image, multilabel truth and ideal heat map."""
    if size < 64:
        raise ConfigError(f"scene size must be >= 64, got {size}")
    rng = np.random.default_rng(seed)
    if preset == "default":
        bands, prims = _paint_cells(rng, size, classes)
    elif preset == "imbalanced":
        bands, prims = _paint_imbalanced(rng, size, classes)
    else:
        raise ConfigError(f"unknown scene preset {preset!r}")
    sig = signatures(classes)
    geo = GeoRef(0.0, size * pixel_size, pixel_size)
    image = RasterF32(render_image(bands, sig, rng, noise), geo)
    truth = LabelMask.from_classes(bands, geo)
    heat = HeatMap(_kernels.oracle(image.data, sig, ORACLE_SOFTNESS), geo)
    return SyntheticScene(seed, size, classes, image, truth, heat, prims,
                          default_class_names(classes), sig)


def separable_fixture(seed: int = 0, size: int = 64, classes: int = 7, imbalanced: bool = False,
                      spread: float = 0.0):
    """Features and truth for the toy trainer.

    Each class gets a distinct constant band vector, so the default fixture is
    linearly separable. ``spread`` adds per-pixel Gaussian noise; with
    ``imbalanced`` the last class covers about 2% of the pixels.
    """
    rng = np.random.default_rng(seed)
    sig = signatures(classes)[1:]
    if imbalanced:
        p = np.full(classes, 0.98 / (classes - 1))
        p[-1] = 0.02
    else:
        p = np.full(classes, 1.0 / classes)
    lab = rng.choice(classes, size=(size, size), p=p)
    feats = sig[lab] + rng.normal(0.0, spread, (size, size, sig.shape[1])) if spread else sig[lab]
    truth = LabelMask.from_label_image(lab, classes)
    return RasterF32(feats.astype(np.float32)), truth


# ---------------------------------------------------------------------------
# predictors
# ---------------------------------------------------------------------------

def _tile_seed(seed: int, tile: RasterF32) -> np.random.Generator:
    digest = zlib.crc32(np.ascontiguousarray(tile.data).tobytes())
    return np.random.default_rng([seed, digest])


class OraclePredictor:
    """Ideal heat map computed pixel by pixel from the image bands."""

    def __init__(self, classes: int = 7, sig: Optional[np.ndarray] = None):
        self.sig = signatures(classes) if sig is None else np.asarray(sig, np.float64)
        self.classes = self.sig.shape[0] - 1

    def __call__(self, tile: RasterF32) -> HeatMap:
        return HeatMap(_kernels.oracle(np.ascontiguousarray(tile.data), self.sig, ORACLE_SOFTNESS))


class EdgeArtifactPredictor:
    """Oracle output with a seeded bias near every tile border.

    Per tile, class and side a sign is drawn from the tile content and
    ``seed``; the bias is ``amplitude`` at the border and falls linearly to
    zero at ``depth`` pixels, mimicking zero-padding effects.
    """

    def __init__(self, base, seed: int = 0, amplitude: float = ARTIFACT_AMPLITUDE,
                 depth: int = ARTIFACT_DEPTH):
        self.base = base
        self.seed = seed
        self.amplitude = amplitude
        self.depth = depth

    def __call__(self, tile: RasterF32) -> HeatMap:
        out = self.base(tile)
        h, w, c = out.data.shape
        signs = _tile_seed(self.seed, tile).choice([-1.0, 1.0], size=(4, c))
        ramp_y = np.clip(1.0 - np.arange(h) / self.depth, 0.0, None)
        ramp_x = np.clip(1.0 - np.arange(w) / self.depth, 0.0, None)
        bias = (ramp_y[:, None, None] * signs[0] + ramp_y[::-1, None, None] * signs[1]
                + ramp_x[None, :, None] * signs[2] + ramp_x[None, ::-1, None] * signs[3])
        prob = out.data.astype(np.float64) / 255.0 + self.amplitude * bias
        return HeatMap(quantize_array(prob))


class NoisyPredictor:
    """Oracle output plus seeded i.i.d. integer jitter in [-amplitude, amplitude]."""

    def __init__(self, base, amplitude: int = 8, seed: int = 0):
        self.base = base
        self.amplitude = int(amplitude)
        self.seed = seed

    def __call__(self, tile: RasterF32) -> HeatMap:
        out = self.base(tile)
        if self.amplitude == 0:
            return out
        jitter = _tile_seed(self.seed, tile).integers(-self.amplitude, self.amplitude + 1, out.data.shape)
        return HeatMap(np.clip(out.data.astype(np.int32) + jitter, 0, 255).astype(np.uint8))


BUILTIN_PREDICTORS = ("oracle", "edge_artifact", "noisy")


def builtin_predictor(name: str, scene: Optional[SyntheticScene] = None, classes: int = 7,
                      seed: int = 0, **kwargs):
    sig = scene.signatures if scene is not None else None
    base = OraclePredictor(scene.classes if scene is not None else classes, sig)
    if name == "oracle":
        return base
    if name == "edge_artifact":
        return EdgeArtifactPredictor(base, seed=seed, **kwargs)
    if name == "noisy":
        return NoisyPredictor(base, seed=seed, **kwargs)
    raise ConfigError(f"unknown builtin predictor {name!r}; expected one of {BUILTIN_PREDICTORS}")
