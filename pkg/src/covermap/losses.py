"""Segmentation losses with analytic gradients, IoU metrics and a toy trainer.

Losses take ``(H, W, C)`` prediction tensors and return a :class:`LossResult`
holding the scalar value and the gradient with respect to the predictions.
CE and WCE consume raw logits (softmax is applied internally); BCE and the
Jaccard family consume probabilities. An optional ``(H, W)`` boolean
``valid`` mask removes unlabelled pixels from every sum.

Arithmetic is carried out in float64; gradients are returned in float64
for float64 inputs and float32 otherwise.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence

import numpy as np

from .errors import ConfigError, DegenerateInput, ShapeError, TrainingError
from .raster import LabelMask, RasterF32

BCE_EPS = 1e-7
JACCARD_SMOOTH = 1.0
COMBO_BCE_WEIGHT = 0.25
COMBO_JACCARD_WEIGHT = 0.75
LOSS_IDS = ("ce", "wce", "bce", "combo", "jaccard")

CLASS_NAMES = ("building", "forest", "grassland", "asphalt", "mineral materials", "bare soil", "water")
# per-class pixel frequency of the reference training set, unlabelled last
CLASS_FREQUENCY = (0.12, 0.28, 0.20, 0.12, 0.02, 0.01, 0.10, 0.17)


@dataclass
class LossResult:
    value: float
    grad: np.ndarray


@dataclass
class JaccardResult(LossResult):
    per_class: np.ndarray = None
    present: np.ndarray = None


def _prep(pred, target, valid):
    pred = np.asarray(pred)
    out_dtype = np.float64 if pred.dtype == np.float64 else np.float32
    x = pred.astype(np.float64)
    t = np.asarray(target).astype(np.float64)
    if x.ndim != 3 or x.shape != t.shape:
        raise ShapeError(f"prediction {x.shape} and target {t.shape} must be equal (H, W, C)")
    if valid is None:
        v = np.ones(x.shape[:2], bool)
    else:
        v = np.asarray(valid, bool)
        if v.shape != x.shape[:2]:
            raise ShapeError(f"valid mask {v.shape} does not match {x.shape[:2]}")
    return x, t, v, out_dtype


def class_weights(values: Sequence[float]) -> np.ndarray:
    """Validate positive class weights and rescale them to mean 1."""
    w = np.asarray(values, np.float64)
    if w.ndim != 1 or w.size == 0 or not np.all(np.isfinite(w)) or np.any(w <= 0):
        raise ConfigError(f"class weights must be finite and > 0, got {values}")
    return w / w.mean()


def inverse_frequency_weights(freq: Sequence[float] = CLASS_FREQUENCY[:7]) -> np.ndarray:
    return class_weights(1.0 / np.asarray(freq, np.float64))


# ---------------------------------------------------------------------------
# cross-entropy family (logits)
# ---------------------------------------------------------------------------

def _softmax_ce(z, t, v):
    if np.any(t[v].sum(axis=-1) != 1):
        raise DegenerateInput("CE targets must be one-hot on every valid pixel")
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    s = e.sum(axis=-1, keepdims=True)
    soft = e / s
    nll = np.log(s[..., 0]) - (z * t).sum(axis=-1)
    return soft, nll


def ce_loss(logits, target, valid=None) -> LossResult:
    z, t, v, dt = _prep(logits, target, valid)
    n = int(v.sum())
    if n == 0:
        raise DegenerateInput("no valid pixels")
    soft, nll = _softmax_ce(z, t, v)
    value = nll[v].sum() / n
    grad = (soft - t) * v[..., None] / n
    return LossResult(float(value), grad.astype(dt))


def wce_loss(logits, target, weights, valid=None) -> LossResult:
    """Class-weighted CE, normalized by the summed weight of valid pixels."""
    z, t, v, dt = _prep(logits, target, valid)
    w = np.asarray(weights, np.float64)
    if w.shape != (z.shape[-1],) or np.any(~np.isfinite(w)) or np.any(w <= 0):
        raise ConfigError(f"need {z.shape[-1]} positive class weights, got {weights}")
    if not v.any():
        raise DegenerateInput("no valid pixels")
    soft, nll = _softmax_ce(z, t, v)
    wpix = (t @ w) * v
    total = wpix.sum()
    value = (wpix * nll).sum() / total
    grad = (soft - t) * (wpix / total)[..., None]
    return LossResult(float(value), grad.astype(dt))


# ---------------------------------------------------------------------------
# probability losses
# ---------------------------------------------------------------------------

def bce_loss(probs, target, valid=None) -> LossResult:
    p, t, v, dt = _prep(probs, target, valid)
    m = int(v.sum()) * p.shape[-1]
    if m == 0:
        raise DegenerateInput("no valid cells")
    inside = (p > BCE_EPS) & (p < 1.0 - BCE_EPS)
    pc = np.clip(p, BCE_EPS, 1.0 - BCE_EPS)
    cell = -(t * np.log(pc) + (1.0 - t) * np.log1p(-pc))
    vm = v[..., None]
    value = (cell * vm).sum() / m
    grad = np.where(inside & vm, (pc - t) / (pc * (1.0 - pc)), 0.0) / m
    return LossResult(float(value), grad.astype(dt))


def soft_jaccard(probs, target, valid=None, smooth: bool = False) -> JaccardResult:
    """Soft Jaccard index, per class then averaged over classes present in ``target``.

    Per class ``J = sum(t p) / (sum(t) + sum(p) - sum(t p))``. With
    ``smooth=True`` one is added to numerator and denominator.
    """
    p, t, v, dt = _prep(probs, target, valid)
    vm = v[..., None]
    p = p * vm
    t = t * vm
    inter = (t * p).sum(axis=(0, 1))
    st = t.sum(axis=(0, 1))
    sp = p.sum(axis=(0, 1))
    s = JACCARD_SMOOTH if smooth else 0.0
    union = st + sp - inter
    present = st > 0
    k = int(present.sum())
    if k == 0:
        raise DegenerateInput("target is empty for every class")
    per_class = np.full(p.shape[-1], np.nan)
    per_class[present] = (inter[present] + s) / (union[present] + s)
    value = per_class[present].mean()
    den = np.where(present, union + s, 1.0)
    num = np.where(present, inter + s, 0.0)
    grad = (t * den - num * (1.0 - t)) / (den * den) * present / k * vm
    return JaccardResult(float(value), grad.astype(dt), per_class, present)


def jaccard_loss(probs, target, valid=None, smooth: bool = False) -> LossResult:
    j = soft_jaccard(probs, target, valid, smooth)
    return LossResult(1.0 - j.value, -j.grad)


def combo_loss(probs, target, valid=None, smooth: bool = False) -> LossResult:
    b = bce_loss(probs, target, valid)
    j = jaccard_loss(probs, target, valid, smooth)
    return LossResult(
        COMBO_BCE_WEIGHT * b.value + COMBO_JACCARD_WEIGHT * j.value,
        COMBO_BCE_WEIGHT * b.grad + COMBO_JACCARD_WEIGHT * j.grad,
    )


def loss_by_id(loss_id: str, pred, target, valid=None, weights=None) -> LossResult:
    if loss_id == "ce":
        return ce_loss(pred, target, valid)
    if loss_id == "wce":
        if weights is None:
            weights = np.ones(np.shape(pred)[-1])
        return wce_loss(pred, target, weights, valid)
    if loss_id == "bce":
        return bce_loss(pred, target, valid)
    if loss_id == "jaccard":
        return jaccard_loss(pred, target, valid)
    if loss_id == "combo":
        return combo_loss(pred, target, valid)
    raise ConfigError(f"unknown loss id {loss_id!r}; expected one of {LOSS_IDS}")


# ---------------------------------------------------------------------------
# IoU
# ---------------------------------------------------------------------------

def _bands(x) -> np.ndarray:
    if isinstance(x, LabelMask):
        return x.class_bands.astype(bool)
    return np.asarray(x).astype(bool)


@dataclass
class IoUResult:
    intersection: np.ndarray
    union: np.ndarray

    @property
    def iou(self) -> np.ndarray:
        """Per-class IoU; NaN for classes absent from prediction and truth."""
        with np.errstate(invalid="ignore", divide="ignore"):
            return np.where(self.union > 0, self.intersection / np.maximum(self.union, 1), np.nan)

    def mean(self) -> float:
        vals = self.iou
        vals = vals[~np.isnan(vals)]
        return float(vals.mean()) if vals.size else float("nan")

    def __add__(self, other: "IoUResult") -> "IoUResult":
        return IoUResult(self.intersection + other.intersection, self.union + other.union)

    def to_csv(self, class_names: Optional[Sequence[str]] = None) -> str:
        buf = io.StringIO()
        out = csv.writer(buf, lineterminator="\n")
        out.writerow(["class", "intersection", "union", "iou"])
        names = class_names or [str(i) for i in range(len(self.union))]
        for name, i, u, q in zip(names, self.intersection, self.union, self.iou):
            out.writerow([name, int(i), int(u), "" if np.isnan(q) else f"{q:.6f}"])
        return buf.getvalue()


def iou_per_class(pred_bin, truth, valid=None) -> IoUResult:
    """Per-class intersection and union counts of two binary masks.

    Pixels unlabelled in ``truth`` (complementary band set) are excluded when
    ``truth`` is a :class:`LabelMask`; an explicit ``valid`` plane overrides.
    Sum several results with ``+`` for micro-aggregation over samples.
    """
    p = _bands(pred_bin)
    t = _bands(truth)
    if p.shape != t.shape:
        raise ShapeError(f"prediction {p.shape} and truth {t.shape} differ")
    if valid is None:
        valid = truth.valid if isinstance(truth, LabelMask) else np.ones(t.shape[:2], bool)
    vm = np.asarray(valid, bool)[..., None]
    p = p & vm
    t = t & vm
    inter = (p & t).sum(axis=(0, 1)).astype(np.int64)
    union = (p | t).sum(axis=(0, 1)).astype(np.int64)
    return IoUResult(inter, union)


# ---------------------------------------------------------------------------
# finite-difference gradient checks
# ---------------------------------------------------------------------------

def max_relative_error(a, b, floor: float = 1e-8) -> float:
    a = np.asarray(a, np.float64)
    b = np.asarray(b, np.float64)
    return float(np.max(np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)))


def numeric_gradient(fn, x, eps: float = 1e-3) -> np.ndarray:
    """Central differences of scalar ``fn`` at every element of ``x``."""
    x = np.array(x, np.float64)
    g = np.zeros_like(x)
    flat = x.reshape(-1)
    gf = g.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + eps
        hi = fn(x)
        flat[i] = old - eps
        lo = fn(x)
        flat[i] = old
        gf[i] = (hi - lo) / (2 * eps)
    return g


def random_instance(loss_id: str, seed: int, shape=(8, 8, 7)):
    """Random (prediction, target, valid, weights) for gradient checking."""
    rng = np.random.default_rng(seed)
    h, w, c = shape
    valid = rng.random((h, w)) > 0.15
    if loss_id in ("ce", "wce"):
        pred = rng.normal(size=shape)
        target = np.eye(c)[rng.integers(0, c, size=(h, w))]
    else:
        pred = rng.uniform(0.1, 0.9, size=shape)
        target = (rng.random(shape) < 0.3).astype(np.float64)
    weights = rng.uniform(0.5, 3.0, size=c) if loss_id == "wce" else None
    return pred, target, valid, weights


def gradient_check(loss_id: str, seed: int, eps: float = 1e-3, shape=(8, 8, 7)) -> float:
    pred, target, valid, weights = random_instance(loss_id, seed, shape)
    res = loss_by_id(loss_id, pred, target, valid, weights)
    num = numeric_gradient(lambda x: loss_by_id(loss_id, x, target, valid, weights).value, pred, eps)
    return max_relative_error(res.grad, num)


# ---------------------------------------------------------------------------
# toy per-pixel trainer
# ---------------------------------------------------------------------------

@dataclass
class ToyTrainResult:
    weights: np.ndarray
    mean: np.ndarray
    scale: np.ndarray
    loss_history: List[float]
    iou_history: List[np.ndarray]
    iou: np.ndarray
    recall: np.ndarray
    steps: int

    def predict(self, features) -> np.ndarray:
        x = np.asarray(features.data if isinstance(features, RasterF32) else features, np.float64)
        flat = (x.reshape(-1, x.shape[-1]) - self.mean) / self.scale
        z = np.column_stack([flat, np.ones(len(flat))]) @ self.weights.T
        return np.argmax(z, axis=1).reshape(x.shape[:2])


def _sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def toy_train(features: RasterF32, truth: LabelMask, loss: str = "ce", steps: int = 500,
              lr: float = 1.0, seed: int = 0, holdout: float = 0.25,
              class_weight=None, eval_every: int = 25) -> ToyTrainResult:
    """Gradient descent on a per-pixel linear classifier through ``loss``.

    The model is a ``C x (bands + 1)`` matrix over standardized features.
    Softmax losses see the logits, the others see sigmoid probabilities.
    A seeded random ``holdout`` fraction of the labelled pixels is kept out
    of training and scored with :func:`iou_per_class`.
    """
    if loss not in LOSS_IDS:
        raise ConfigError(f"unknown loss id {loss!r}")
    x = np.asarray(features.data, np.float64)
    if x.shape[:2] != truth.data.shape[:2]:
        raise ShapeError("features and truth are not aligned")
    nb, nc = x.shape[2], truth.classes
    flat = x.reshape(-1, nb)
    tgt = truth.class_bands.reshape(-1, nc).astype(np.float64)
    labelled = truth.valid.reshape(-1)
    # salted so the split never replays a generator built from the bare seed
    rng = np.random.default_rng([seed, 0x7e57])
    test = rng.random(flat.shape[0]) < holdout
    train = labelled & ~test
    evalm = labelled & test
    if not train.any() or not evalm.any():
        raise ConfigError("split left no training or no held-out pixels")
    mean = flat[train].mean(axis=0)
    scale = flat[train].std(axis=0)
    scale[scale == 0] = 1.0
    xa = np.column_stack([(flat - mean) / scale, np.ones(flat.shape[0])])
    xtr = xa[train]
    ttr = tgt[train][:, None, :]
    if class_weight is None:
        class_weight = np.ones(nc)
    w = np.zeros((nc, nb + 1))
    losses, ious = [], []

    def evaluate(wm):
        pred = np.argmax(xa[evalm] @ wm.T, axis=1)
        onehot = np.eye(nc, dtype=bool)[pred][:, None, :]
        t = tgt[evalm][:, None, :].astype(bool)
        res = iou_per_class(onehot, t)
        tp = (onehot & t).sum(axis=(0, 1))
        with np.errstate(invalid="ignore", divide="ignore"):
            recall = tp / t.sum(axis=(0, 1))
        return res.iou, recall

    for step in range(steps + 1):
        z = (xtr @ w.T)[:, None, :]
        if loss in ("ce", "wce"):
            res = loss_by_id(loss, z, ttr, None, class_weight)
            gz = res.grad
        else:
            p = _sigmoid(z)
            res = loss_by_id(loss, p, ttr)
            gz = res.grad * p * (1.0 - p)
        if not np.isfinite(res.value) or not np.all(np.isfinite(gz)):
            raise TrainingError(f"non-finite loss at step {step}")
        losses.append(res.value)
        if step % eval_every == 0 or step == steps:
            ious.append(evaluate(w)[0])
        if step == steps:
            break
        w = w - lr * (gz[:, 0, :].T @ xtr)
    iou, recall = evaluate(w)
    return ToyTrainResult(w, mean, scale, losses, ious, iou, recall, steps)
