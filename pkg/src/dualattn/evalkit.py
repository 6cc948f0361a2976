"""Faithfulness metrics for attribution maps.

Two protocols: input perturbation (remove the least important pixels, re-score
with a fixed classifier, integrate balanced accuracy over the removed fraction)
and implicit segmentation (IoU of quantile-thresholded maps and average
precision against held-out masks).
"""
from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from . import kernels
from .errors import RejectedInput

QUANTILES = (0.975, 0.95, 0.90)
FILL_VALUE = 0.0


def default_fractions() -> np.ndarray:
    return np.round(np.linspace(0.0, 1.0, 21), 10)


@dataclass
class AttributionRecord:
    attribution: np.ndarray
    image: np.ndarray
    label: int
    mask: np.ndarray | None = None

    def __post_init__(self):
        a = np.asarray(self.attribution, dtype=np.float64)
        if a.shape != np.shape(self.image):
            raise RejectedInput(f"attribution {a.shape} does not match image {np.shape(self.image)}")
        if np.any(a < 0) or abs(a.sum() - 1.0) > 1e-9:
            raise RejectedInput("attribution must be nonnegative and sum to 1")
        self.attribution = a / a.sum()


@dataclass
class PerturbationCurve:
    fractions: np.ndarray
    balanced_accuracy: np.ndarray  # percent

    def __post_init__(self):
        f = np.asarray(self.fractions, dtype=np.float64)
        b = np.asarray(self.balanced_accuracy, dtype=np.float64)
        if f.ndim != 1 or f.shape != b.shape:
            raise RejectedInput("fractions and accuracies must be equal-length vectors")
        if f.size >= 2 and (np.any(np.diff(f) <= 0) or f[0] != 0.0 or f[-1] != 1.0):
            raise RejectedInput("fractions must ascend strictly from 0.0 to 1.0")
        self.fractions, self.balanced_accuracy = f, b


def removal_order(attribution) -> np.ndarray:
    """Flat pixel indices from least to most important; ties keep flat-index order."""
    return np.argsort(np.asarray(attribution, dtype=np.float64).reshape(-1), kind="stable")


def perturb(image, attribution, fraction: float) -> np.ndarray:
    """Set the ``floor(fraction * P)`` lowest-attributed pixels to the fill value."""
    image = np.asarray(image)
    if np.shape(attribution) != image.shape:
        raise RejectedInput(f"attribution {np.shape(attribution)} does not match image {image.shape}")
    if not 0.0 <= fraction <= 1.0:
        raise RejectedInput(f"fraction must lie in [0, 1], got {fraction}")
    k = int(np.floor(fraction * image.size + 1e-9))
    out = image.copy().reshape(-1)
    out[removal_order(attribution)[:k]] = FILL_VALUE
    return out.reshape(image.shape)


def balanced_accuracy(labels, predictions) -> float:
    """Mean per-class recall over the classes present in ``labels``, in percent."""
    labels, predictions = np.asarray(labels), np.asarray(predictions)
    if labels.size == 0:
        raise RejectedInput("no labels")
    recalls = [np.mean(predictions[labels == c] == c) for c in np.unique(labels)]
    return 100.0 * float(np.mean(recalls))


def perturbation_curve(scorer, records, fractions=None) -> PerturbationCurve:
    """``scorer`` maps an (N, H, W) image stack to predicted class ids."""
    records = list(records)
    if not records:
        raise RejectedInput("empty record set")
    fractions = default_fractions() if fractions is None else np.asarray(fractions, dtype=np.float64)
    labels = np.array([r.label for r in records])
    images = np.stack([np.asarray(r.image, dtype=np.float64) for r in records])
    orders = np.stack([removal_order(r.attribution) for r in records])
    flat = images.reshape(len(records), -1)
    accs = []
    for f in fractions:
        if not 0.0 <= f <= 1.0:
            raise RejectedInput(f"fraction {f} outside [0, 1]")
        k = int(np.floor(f * flat.shape[1] + 1e-9))
        perturbed = flat.copy()
        np.put_along_axis(perturbed, orders[:, :k], FILL_VALUE, axis=1)
        accs.append(balanced_accuracy(labels, scorer(perturbed.reshape(images.shape))))
    return PerturbationCurve(fractions, np.array(accs))


def curve_auc(curve: PerturbationCurve) -> float:
    """Trapezoidal area under balanced accuracy (percent) over fraction in [0, 1]."""
    f, b = curve.fractions, curve.balanced_accuracy
    if f.size < 2:
        raise RejectedInput("need at least two points for an area")
    return float(np.sum(np.diff(f) * (b[1:] + b[:-1]) / 2.0))


def _check_mask(attribution, mask) -> np.ndarray:
    mask = np.asarray(mask).astype(bool)
    if mask.shape != np.shape(attribution):
        raise RejectedInput(f"mask {mask.shape} does not match attribution {np.shape(attribution)}")
    if not mask.any():
        raise RejectedInput("mask has no positive pixels; overlap is only defined on positive samples")
    return mask


def iou_at_quantile(attribution, mask, q: float) -> float:
    """IoU between the mask and the pixels strictly above the attribution's q-quantile."""
    mask = _check_mask(attribution, mask)
    a = np.asarray(attribution, dtype=np.float64)
    threshold = np.quantile(a, q, method="linear")
    kept = a > threshold
    union = np.count_nonzero(kept | mask)
    return float(np.count_nonzero(kept & mask) / union)


def average_precision(attribution, mask) -> float:
    """Non-interpolated AP: sum over ranks of (recall step) x (precision at that rank)."""
    mask = _check_mask(attribution, mask)
    a = np.asarray(attribution, dtype=np.float64).reshape(-1)
    order = np.argsort(-a, kind="stable")
    return kernels.ranked_average_precision(mask.reshape(-1)[order].astype(np.float64))


def mean_average_precision(records) -> float:
    records = list(records)
    if not records:
        raise RejectedInput("no records")
    return float(np.mean([average_precision(r.attribution, r.mask) for r in records]))


def segmentation_table(records) -> list[dict]:
    """Per-record AP and IoU at each quantile."""
    rows = []
    for i, r in enumerate(records):
        row = {"record_id": i, "ap": average_precision(r.attribution, r.mask)}
        for q in QUANTILES:
            row[f"iou_q{str(q)[2:].ljust(2, '0')}"] = iou_at_quantile(r.attribution, r.mask, q)
        rows.append(row)
    return rows


def random_attribution(shape, seed: int) -> np.ndarray:
    """A random-ranking baseline: i.i.d. uniform weights, normalized."""
    w = np.random.default_rng(seed).random(shape) + 1e-12
    return w / w.sum()


def write_curve_csv(curve: PerturbationCurve, path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["fraction", "balanced_accuracy"])
        for f, b in zip(curve.fractions, curve.balanced_accuracy):
            writer.writerow([f"{f:.17g}", f"{b:.17g}"])


def write_segmentation_csv(rows, path) -> None:
    cols = ["record_id", "ap", "iou_q975", "iou_q95", "iou_q90"]
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(cols)
        for row in rows:
            writer.writerow([row["record_id"]] + [f"{row[c]:.17g}" for c in cols[1:]])


def write_pgm(array, path) -> None:
    """8-bit binary PGM (P5) with min-max scaling."""
    a = np.asarray(array, dtype=np.float64)
    lo, hi = a.min(), a.max()
    scaled = np.zeros(a.shape, np.uint8) if hi <= lo else np.round(255 * (a - lo) / (hi - lo)).astype(np.uint8)
    h, w = a.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode())
        fh.write(scaled.tobytes())
