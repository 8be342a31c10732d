"""Box and mask geometry: overlap metrics, NMS, and RoI-aligned pooling.

Boxes use continuous coordinates with area ``(x2 - x1) * (y2 - y1)``; there is
no "+1" convention anywhere in this package. All functions here are pure.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

DAMAGE_SCALES = ("slight", "severe", "debris")


@dataclass(frozen=True)
class BBox:
    """Axis-aligned box with strictly positive area."""

    x1: float
    y1: float
    x2: float
    y2: float

    def __post_init__(self):
        for name in ("x1", "y1", "x2", "y2"):
            object.__setattr__(self, name, float(getattr(self, name)))
        coords = (self.x1, self.y1, self.x2, self.y2)
        if not all(np.isfinite(coords)):
            raise ValueError(f"box coordinates must be finite, got {coords}")
        if not (self.x2 > self.x1 and self.y2 > self.y1):
            raise ValueError(f"box must have positive extent, got {coords}")

    @property
    def width(self) -> float:
        return self.x2 - self.x1

    @property
    def height(self) -> float:
        return self.y2 - self.y1

    @property
    def area(self) -> float:
        return self.width * self.height

    @property
    def center(self) -> tuple[float, float]:
        return (0.5 * (self.x1 + self.x2), 0.5 * (self.y1 + self.y2))

    def intersection_area(self, other: "BBox") -> float:
        iw = min(self.x2, other.x2) - max(self.x1, other.x1)
        ih = min(self.y2, other.y2) - max(self.y1, other.y1)
        if iw <= 0.0 or ih <= 0.0:
            return 0.0
        return iw * ih

    def scaled(self, factor: float) -> "BBox":
        """Coordinates multiplied by ``factor`` (e.g. image -> feature space)."""
        return BBox(self.x1 * factor, self.y1 * factor, self.x2 * factor, self.y2 * factor)

    def as_tuple(self) -> tuple[float, float, float, float]:
        return (self.x1, self.y1, self.x2, self.y2)


def iou(a: BBox, b: BBox) -> float:
    """Intersection over union of two boxes. Symmetric, in [0, 1]."""
    inter = a.intersection_area(b)
    if inter == 0.0:
        return 0.0
    return inter / (a.area + b.area - inter)


def inner_intersection(anchor: BBox, proposal: BBox) -> float:
    """Intersection area divided by the *anchor* area. Not symmetric.

    Favors small anchors nested inside large proposals: an anchor fully
    contained in the proposal scores 1.0 regardless of the proposal's size.
    """
    return anchor.intersection_area(proposal) / anchor.area


@dataclass(frozen=True)
class BitMask:
    """Rasterized instance mask: a row-major boolean grid."""

    bits: np.ndarray  # shape (height, width), dtype bool

    def __post_init__(self):
        bits = np.asarray(self.bits, dtype=bool)
        if bits.ndim != 2:
            raise ValueError(f"mask must be 2-D, got shape {bits.shape}")
        object.__setattr__(self, "bits", bits)

    @property
    def height(self) -> int:
        return int(self.bits.shape[0])

    @property
    def width(self) -> int:
        return int(self.bits.shape[1])

    @property
    def area(self) -> int:
        """Number of set pixels."""
        return int(np.count_nonzero(self.bits))

    @classmethod
    def empty(cls, width: int, height: int) -> "BitMask":
        return cls(np.zeros((height, width), dtype=bool))

    def shifted(self, dx: int, dy: int) -> "BitMask":
        """Mask translated by whole pixels, clipped to the original grid."""
        out = np.zeros_like(self.bits)
        h, w = self.bits.shape
        ys = slice(max(0, dy), min(h, h + dy))
        xs = slice(max(0, dx), min(w, w + dx))
        ys_src = slice(max(0, -dy), min(h, h - dy))
        xs_src = slice(max(0, -dx), min(w, w - dx))
        out[ys, xs] = self.bits[ys_src, xs_src]
        return BitMask(out)


def mask_iou(a: BitMask, b: BitMask) -> float:
    """Pixelwise IoU of two masks on the same grid.

    Two empty masks yield 0 so the evaluator stays total and conservative.
    """
    if (a.width, a.height) != (b.width, b.height):
        raise ValueError(
            f"mask dimensions differ: {a.width}x{a.height} vs {b.width}x{b.height}"
        )
    inter = int(np.count_nonzero(a.bits & b.bits))
    if inter == 0:
        return 0.0
    union = int(np.count_nonzero(a.bits | b.bits))
    return inter / union


@dataclass
class Detection:
    """One detected instance: box, optional mask, class, score, and frame."""

    box: BBox
    score: float
    class_label: str
    frame_id: int
    mask: Optional[BitMask] = field(default=None)

    def __post_init__(self):
        if not (0.0 <= self.score <= 1.0):
            raise ValueError(f"score must be in [0, 1], got {self.score}")
        if self.class_label not in DAMAGE_SCALES:
            raise ValueError(f"unknown class label {self.class_label!r}")

    def with_score(self, score: float) -> "Detection":
        return Detection(self.box, score, self.class_label, self.frame_id, self.mask)


def nms_indices(
    boxes: Sequence[BBox],
    scores: Sequence[float],
    iou_threshold: float,
    top_k: int,
) -> list[int]:
    """Greedy non-maximum suppression; returns kept indices in score order.

    Score ties are broken by lower input index, so the result is a pure
    function of the argument order. A candidate is suppressed when its IoU
    with an already-kept box strictly exceeds ``iou_threshold``.
    """
    if not (0.0 <= iou_threshold <= 1.0):
        raise ValueError(f"iou_threshold must be in [0, 1], got {iou_threshold}")
    if top_k < 1:
        raise ValueError(f"top_k must be >= 1, got {top_k}")
    order = sorted(range(len(boxes)), key=lambda i: (-scores[i], i))
    kept: list[int] = []
    for i in order:
        if all(iou(boxes[i], boxes[j]) <= iou_threshold for j in kept):
            kept.append(i)
            if len(kept) == top_k:
                break
    return kept


def nms(dets: Sequence[Detection], iou_threshold: float, top_k: int) -> list[Detection]:
    """NMS over detections by box IoU, keeping at most ``top_k`` by score."""
    kept = nms_indices([d.box for d in dets], [d.score for d in dets], iou_threshold, top_k)
    return [dets[i] for i in kept]


def bilinear_sample(feature: np.ndarray, x: float, y: float) -> np.ndarray:
    """Bilinear sample of a (C, H, W) map at continuous point (x, y).

    The value at integer cell (r, c) is located at (c + 0.5, r + 0.5); samples
    outside the outermost cell centers clamp to the border.
    """
    _, h, w = feature.shape
    u = x - 0.5
    v = y - 0.5
    c0 = int(np.floor(u))
    r0 = int(np.floor(v))
    fu = u - c0
    fv = v - r0
    c0c = min(max(c0, 0), w - 1)
    c1c = min(max(c0 + 1, 0), w - 1)
    r0c = min(max(r0, 0), h - 1)
    r1c = min(max(r0 + 1, 0), h - 1)
    top = (1.0 - fu) * feature[:, r0c, c0c] + fu * feature[:, r0c, c1c]
    bot = (1.0 - fu) * feature[:, r1c, c0c] + fu * feature[:, r1c, c1c]
    return (1.0 - fv) * top + fv * bot


def roi_align(feature: np.ndarray, box: BBox, out_h: int, out_w: int) -> np.ndarray:
    """Pool a box from a (C, H, W) feature map to (C, out_h, out_w).

    One bilinear sample per output cell, taken at the cell's center on a
    regular out_h x out_w grid inside the box. The box is in feature
    coordinates and must lie within [0, W] x [0, H].
    """
    feature = np.asarray(feature)
    if feature.ndim != 3:
        raise ValueError(f"feature must be (C, H, W), got shape {feature.shape}")
    if out_h < 1 or out_w < 1:
        raise ValueError(f"output size must be >= 1, got {out_h}x{out_w}")
    _, h, w = feature.shape
    if box.x1 < 0 or box.y1 < 0 or box.x2 > w or box.y2 > h:
        raise ValueError(f"box {box.as_tuple()} outside feature extent {w}x{h}")

    xs = box.x1 + (np.arange(out_w) + 0.5) * (box.width / out_w)
    ys = box.y1 + (np.arange(out_h) + 0.5) * (box.height / out_h)

    # Vectorized bilinear gather over the sample grid.
    u = xs - 0.5
    v = ys - 0.5
    c0 = np.floor(u).astype(int)
    r0 = np.floor(v).astype(int)
    fu = u - c0
    fv = v - r0
    c0c = np.clip(c0, 0, w - 1)
    c1c = np.clip(c0 + 1, 0, w - 1)
    r0c = np.clip(r0, 0, h - 1)
    r1c = np.clip(r0 + 1, 0, h - 1)

    f00 = feature[:, r0c[:, None], c0c[None, :]]
    f01 = feature[:, r0c[:, None], c1c[None, :]]
    f10 = feature[:, r1c[:, None], c0c[None, :]]
    f11 = feature[:, r1c[:, None], c1c[None, :]]
    wu = fu[None, :]
    wv = fv[:, None]
    top = (1.0 - wu) * f00 + wu * f01
    bot = (1.0 - wu) * f10 + wu * f11
    return (1.0 - wv) * top + wv * bot
