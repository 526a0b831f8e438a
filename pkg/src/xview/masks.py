"""Binary masks, run-length encoding, and the evaluation metrics.

Metrics: IoU, location error (LE), contour accuracy (CA) and visibility
accuracy (VA).  LE is the centroid distance divided by the image diagonal.
CA is a boundary F-measure computed after translating the prediction so its
centroid lands (to the nearest pixel) on the ground-truth centroid.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy import ndimage
from scipy.spatial import cKDTree

from .errors import FormatError, ShapeError, UndefinedMetric

LE_NORMALIZER = "image_diagonal"


class BinaryMask:
    """A height x width boolean raster, row-major."""

    __slots__ = ("bits",)

    def __init__(self, bits):
        arr = np.asarray(bits)
        if arr.ndim != 2:
            raise ShapeError(f"mask must be 2-D, got shape {arr.shape}")
        self.bits = arr.astype(bool)

    @classmethod
    def empty(cls, height: int, width: int) -> "BinaryMask":
        return cls(np.zeros((height, width), dtype=bool))

    @property
    def height(self) -> int:
        return self.bits.shape[0]

    @property
    def width(self) -> int:
        return self.bits.shape[1]

    @property
    def shape(self) -> tuple[int, int]:
        return self.bits.shape

    def area(self) -> int:
        return int(self.bits.sum())

    def centroid(self) -> tuple[float, float]:
        """(x, y) mean of foreground pixel coordinates."""
        ys, xs = np.nonzero(self.bits)
        if xs.size == 0:
            raise UndefinedMetric("centroid of an empty mask")
        return float(xs.mean()), float(ys.mean())

    def complement(self) -> "BinaryMask":
        return BinaryMask(~self.bits)

    def translate(self, dx: int, dy: int) -> "BinaryMask":
        """Shift by whole pixels; content leaving the frame is dropped."""
        h, w = self.shape
        out = np.zeros_like(self.bits)
        ys, xs = np.nonzero(self.bits)
        ys, xs = ys + dy, xs + dx
        keep = (ys >= 0) & (ys < h) & (xs >= 0) & (xs < w)
        out[ys[keep], xs[keep]] = True
        return BinaryMask(out)

    def __eq__(self, other) -> bool:
        return isinstance(other, BinaryMask) and self.shape == other.shape and bool(
            np.array_equal(self.bits, other.bits))

    def __repr__(self) -> str:
        return f"BinaryMask({self.width}x{self.height}, area={self.area()})"


@dataclass(frozen=True)
class RleMask:
    """Run lengths alternating background/foreground, starting with background."""

    width: int
    height: int
    runs: tuple[int, ...]

    def __post_init__(self):
        if self.width < 0 or self.height < 0:
            raise FormatError("negative mask dimensions")
        if any(r < 0 for r in self.runs):
            raise FormatError("negative run length")
        if sum(self.runs) != self.width * self.height:
            raise FormatError(
                f"runs sum to {sum(self.runs)}, expected {self.width * self.height}")
        if any(r == 0 for r in self.runs[1:]):
            raise FormatError("only the leading run may have length 0")

    def to_json(self) -> dict:
        return {"w": self.width, "h": self.height, "runs": list(self.runs)}

    @classmethod
    def from_json(cls, obj: dict) -> "RleMask":
        try:
            return cls(int(obj["w"]), int(obj["h"]), tuple(int(r) for r in obj["runs"]))
        except (KeyError, TypeError) as exc:
            raise FormatError(f"malformed RLE object: {exc}") from exc


def rle_encode(mask: BinaryMask) -> RleMask:
    flat = mask.bits.reshape(-1)
    if flat.size == 0:
        return RleMask(mask.width, mask.height, (0,))
    change = np.flatnonzero(flat[1:] != flat[:-1]) + 1
    edges = np.concatenate([[0], change, [flat.size]])
    runs = np.diff(edges).tolist()
    if flat[0]:
        runs = [0] + runs
    return RleMask(mask.width, mask.height, tuple(int(r) for r in runs))


def rle_decode(rle: RleMask) -> BinaryMask:
    values = np.arange(len(rle.runs)) % 2 == 1
    flat = np.repeat(values, rle.runs)
    return BinaryMask(flat.reshape(rle.height, rle.width))


def save_rle(mask: BinaryMask) -> str:
    return json.dumps(rle_encode(mask).to_json(), separators=(",", ":"))


def load_rle(text: str) -> BinaryMask:
    return rle_decode(RleMask.from_json(json.loads(text)))


def _same_shape(a: BinaryMask, b: BinaryMask) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"mask dimensions differ: {a.shape} vs {b.shape}")


def iou(pred: BinaryMask, gt: BinaryMask) -> float:
    _same_shape(pred, gt)
    union = int(np.count_nonzero(pred.bits | gt.bits))
    if union == 0:
        return 1.0
    return int(np.count_nonzero(pred.bits & gt.bits)) / union


def location_error(pred: BinaryMask, gt: BinaryMask) -> float:
    _same_shape(pred, gt)
    if pred.area() == 0 or gt.area() == 0:
        raise UndefinedMetric("location error needs two nonempty masks")
    px, py = pred.centroid()
    gx, gy = gt.centroid()
    return math.hypot(px - gx, py - gy) / math.hypot(gt.width, gt.height)


def boundary(mask: BinaryMask) -> np.ndarray:
    """Foreground pixels with a 4-neighbour outside the mask (frame edge counts as outside)."""
    inner = ndimage.binary_erosion(mask.bits, structure=ndimage.generate_binary_structure(2, 1),
                                   border_value=0)
    return mask.bits & ~inner


def _round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def centroid_offset(pred: BinaryMask, gt: BinaryMask) -> tuple[int, int]:
    """Integer (dx, dy) that moves pred's centroid to the nearest pixel of gt's."""
    px, py = pred.centroid()
    gx, gy = gt.centroid()
    return _round_half_up(gx - px), _round_half_up(gy - py)


def boundary_match_counts(pred: BinaryMask, gt: BinaryMask, tolerance_px: int = 1):
    """Counts behind the CA score.

    Returns (matched_pred, n_pred, matched_gt, n_gt) after centroid alignment.
    The prediction's boundary is shifted as coordinates, so nothing is clipped.
    """
    _same_shape(pred, gt)
    if pred.area() == 0 or gt.area() == 0:
        raise UndefinedMetric("contour accuracy needs two nonempty masks")
    dx, dy = centroid_offset(pred, gt)
    py, px = np.nonzero(boundary(pred))
    gy, gx = np.nonzero(boundary(gt))
    p_pts = np.column_stack([px + dx, py + dy]).astype(float)
    g_pts = np.column_stack([gx, gy]).astype(float)
    bound = tolerance_px + 0.5
    d_pg, _ = cKDTree(g_pts).query(p_pts, k=1, p=np.inf, distance_upper_bound=bound)
    d_gp, _ = cKDTree(p_pts).query(g_pts, k=1, p=np.inf, distance_upper_bound=bound)
    return (int(np.count_nonzero(d_pg <= tolerance_px)), len(p_pts),
            int(np.count_nonzero(d_gp <= tolerance_px)), len(g_pts))


def contour_accuracy(pred: BinaryMask, gt: BinaryMask, tolerance_px: int = 1) -> float:
    mp, n_p, mg, n_g = boundary_match_counts(pred, gt, tolerance_px)
    if n_p == 0 and n_g == 0:
        return 1.0
    precision = mp / n_p if n_p else 0.0
    recall = mg / n_g if n_g else 0.0
    if precision + recall == 0:
        return 0.0
    return 2 * precision * recall / (precision + recall)


def visibility_accuracy(pred_visible: Sequence[bool], gt_visible: Sequence[bool]) -> float:
    if len(pred_visible) != len(gt_visible):
        raise ShapeError(f"length mismatch: {len(pred_visible)} vs {len(gt_visible)}")
    if len(gt_visible) == 0:
        raise ValueError("visibility accuracy of an empty list")
    hits = sum(bool(a) == bool(b) for a, b in zip(pred_visible, gt_visible))
    return 100.0 * hits / len(gt_visible)


def predicted_visible(mask: BinaryMask, theta_vis: int = 1) -> bool:
    return mask.area() >= theta_vis


@dataclass
class MetricsReport:
    iou: float
    le: float | None
    ca: float | None
    va: float
    n_samples: int
    n_visible_pairs: int
    n_le: int = 0
    n_ca: int = 0
    le_normalizer: str = LE_NORMALIZER
    extra: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        out = {
            "iou": self.iou, "le": self.le, "ca": self.ca, "va": self.va,
            "n_samples": self.n_samples, "n_visible_pairs": self.n_visible_pairs,
            "n_le": self.n_le, "n_ca": self.n_ca, "le_normalizer": self.le_normalizer,
        }
        out.update(self.extra)
        return out

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)


def summarize(preds: Sequence[BinaryMask], gts: Sequence[BinaryMask],
              gt_visible: Sequence[bool] | None = None, theta_vis: int = 1,
              tolerance_px: int = 1) -> MetricsReport:
    """Aggregate per-sample metrics.

    IoU/LE/CA are averaged over samples whose target is visible; LE and CA
    additionally skip samples with an empty prediction.  VA covers all samples.
    """
    if len(preds) != len(gts):
        raise ShapeError("prediction and ground-truth lists differ in length")
    if gt_visible is None:
        gt_visible = [g.area() >= 1 for g in gts]
    ious, les, cas = [], [], []
    for pred, gt, vis in zip(preds, gts, gt_visible):
        if not vis:
            continue
        ious.append(iou(pred, gt))
        try:
            les.append(location_error(pred, gt))
            cas.append(contour_accuracy(pred, gt, tolerance_px))
        except UndefinedMetric:
            pass
    va = visibility_accuracy([predicted_visible(p, theta_vis) for p in preds], list(gt_visible))
    return MetricsReport(
        iou=float(sum(ious) / len(ious)) if ious else 0.0,
        le=float(sum(les) / len(les)) if les else None,
        ca=float(sum(cas) / len(cas)) if cas else None,
        va=va,
        n_samples=len(preds),
        n_visible_pairs=len(ious),
        n_le=len(les),
        n_ca=len(cas),
    )
