"""Training-set consistency statistics and fixed-size sample extraction."""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field
from typing import Iterable, List, Optional, Sequence

import numpy as np

from .errors import ConfigError, DegenerateInput, ShapeError
from .raster import LabelMask, RasterF32, Window, read_window


@dataclass(frozen=True)
class SampleRecord:
    image: Optional[RasterF32]
    mask: LabelMask
    id: str

    def __post_init__(self):
        if self.image is not None and self.image.data.shape[:2] != self.mask.data.shape[:2]:
            raise ShapeError(f"sample {self.id}: image and mask sizes differ")


@dataclass
class DatasetStats:
    share_multilabel: float
    entropy_mean: float
    entropy_normalized_mean: float
    nb_class_mean: float
    nb_samples: int
    class_pixel_freq: np.ndarray
    unlabelled_freq: float
    class_names: Sequence[str] = ()

    def to_dict(self):
        names = list(self.class_names) or [str(i) for i in range(len(self.class_pixel_freq))]
        freq = {n: float(f) for n, f in zip(names, self.class_pixel_freq)}
        freq["unlabelled"] = float(self.unlabelled_freq)
        return {
            "share_multilabel": float(self.share_multilabel),
            "entropy": float(self.entropy_mean),
            "entropy_normalized": float(self.entropy_normalized_mean),
            "nb_class": float(self.nb_class_mean),
            "nb_samples": int(self.nb_samples),
            "per_class_frequency": freq,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    def to_csv(self) -> str:
        buf = io.StringIO()
        out = csv.writer(buf, lineterminator="\n")
        out.writerow(["stat", "value"])
        d = self.to_dict()
        for key in ("share_multilabel", "entropy", "entropy_normalized", "nb_class", "nb_samples"):
            out.writerow([key, d[key]])
        for name, f in d["per_class_frequency"].items():
            out.writerow([f"frequency:{name}", f])
        return buf.getvalue()


def _entropy_from_counts(counts: np.ndarray) -> float:
    total = counts.sum()
    f = counts[counts > 0] / total
    return float(-(f * np.log(f)).sum()) + 0.0  # no -0.0 for single-class samples


def sample_entropy(mask: LabelMask) -> float:
    """Class-distribution entropy in nats over labelled pixels.

    Multilabel pixels count once for each of their classes.
    """
    counts = mask.class_bands.sum(axis=(0, 1), dtype=np.int64)
    if counts.sum() == 0:
        raise DegenerateInput("mask has no labelled pixels")
    return _entropy_from_counts(counts)


@dataclass
class _Partial:
    pixels: int = 0
    multilabel: int = 0
    counts: Optional[np.ndarray] = None
    unlabelled: int = 0
    entropy_sum: float = 0.0
    entropy_norm_sum: float = 0.0
    entropy_n: int = 0
    nb_class_sum: int = 0
    samples: int = 0

    def merge(self, other: "_Partial") -> "_Partial":
        counts = other.counts if self.counts is None else self.counts + other.counts
        return _Partial(
            self.pixels + other.pixels,
            self.multilabel + other.multilabel,
            counts,
            self.unlabelled + other.unlabelled,
            self.entropy_sum + other.entropy_sum,
            self.entropy_norm_sum + other.entropy_norm_sum,
            self.entropy_n + other.entropy_n,
            self.nb_class_sum + other.nb_class_sum,
            self.samples + other.samples,
        )


def _partial(mask: LabelMask) -> _Partial:
    bands = mask.class_bands
    per_pixel = bands.sum(axis=2, dtype=np.int32)
    counts = bands.sum(axis=(0, 1), dtype=np.int64)
    part = _Partial(
        pixels=per_pixel.size,
        multilabel=int((per_pixel >= 2).sum()),
        counts=counts,
        unlabelled=int(mask.complementary.sum(dtype=np.int64)),
        nb_class_sum=int((counts > 0).sum()),
        samples=1,
    )
    if counts.sum() > 0:
        h = _entropy_from_counts(counts)
        part.entropy_sum = h
        part.entropy_norm_sum = h / math.log(mask.classes) if mask.classes > 1 else 0.0
        part.entropy_n = 1
    return part


def dataset_statistics(samples: Iterable, class_names: Sequence[str] = ()) -> DatasetStats:
    """Aggregate share_multilabel, entropy, nb_class and per-class frequencies.

    Accepts :class:`SampleRecord` or bare :class:`LabelMask` items. Samples
    without labelled pixels count towards ``nb_samples`` and the pixel
    frequencies but not towards the entropy mean.
    """
    total = _Partial()
    for s in samples:
        mask = s.mask if isinstance(s, SampleRecord) else s
        total = total.merge(_partial(mask))
    if total.samples == 0:
        raise DegenerateInput("no samples")
    return DatasetStats(
        share_multilabel=total.multilabel / total.pixels,
        entropy_mean=total.entropy_sum / total.entropy_n if total.entropy_n else 0.0,
        entropy_normalized_mean=total.entropy_norm_sum / total.entropy_n if total.entropy_n else 0.0,
        nb_class_mean=total.nb_class_sum / total.samples,
        nb_samples=total.samples,
        class_pixel_freq=total.counts / total.pixels,
        unlabelled_freq=total.unlabelled / total.pixels,
        class_names=tuple(class_names),
    )


def _grid(length: int, size: int, stride: int) -> List[int]:
    pos = list(range(0, length - size + 1, stride))
    if pos[-1] != length - size:
        pos.append(length - size)
    return pos


def extract_samples(image: Optional[RasterF32], mask: LabelMask, size: int = 512,
                    stride: Optional[int] = None) -> List[SampleRecord]:
    """Row-major ``size`` x ``size`` samples; the last row/column is edge-anchored."""
    stride = stride or size
    if stride <= 0:
        raise ConfigError(f"stride must be positive, got {stride}")
    if image is not None and image.data.shape[:2] != mask.data.shape[:2]:
        raise ShapeError("image and mask are not aligned")
    if size <= 0 or size > mask.width or size > mask.height:
        raise ConfigError(f"sample size {size} does not fit {mask.width}x{mask.height}")
    out = []
    for y0 in _grid(mask.height, size, stride):
        for x0 in _grid(mask.width, size, stride):
            win = Window(x0, y0, size, size)
            img = read_window(image, win) if image is not None else None
            out.append(SampleRecord(img, read_window(mask, win), f"{x0}_{y0}"))
    return out
