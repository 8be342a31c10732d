"""Two-level region proposal machinery.

High-level (building) proposals gate the low-level (damage) stage twice:
anchors whose sampling score against the building proposals does not clear a
threshold are dropped before proposal generation, and their losses are
excluded from the training objective. Sampling scores come in two flavors:
plain IoU, and the asymmetric inner intersection that lets a small anchor
fully inside a large building score highly.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import rng
from .geometry import BBox, inner_intersection, iou, nms_indices, roi_align
from .optim import Adam
from .pyramid import STRIDES, FeaturePyramid

METRICS = ("iou", "ii")
DEFAULT_THRESHOLDS = {"iou": 0.4, "ii": 0.1}

# Objectness label bands: positive at IoU >= 0.7, negative at <= 0.3.
POSITIVE_IOU = 0.7
NEGATIVE_IOU = 0.3


@dataclass(frozen=True)
class AnchorConfig:
    """Anchor template grid: one anchor per (cell, scale, ratio) per level."""

    scales: tuple[float, ...] = (16.0, 32.0, 64.0)
    aspect_ratios: tuple[float, ...] = (0.5, 1.0, 2.0)

    def __post_init__(self):
        if not self.scales or not self.aspect_ratios:
            raise ValueError("scales and aspect_ratios must be nonempty")
        if any(s <= 0 for s in self.scales) or any(r <= 0 for r in self.aspect_ratios):
            raise ValueError("scales and aspect_ratios must be positive")


@dataclass(frozen=True)
class SampledAnchor:
    box: BBox
    level: int  # 1-based pyramid level
    cell: tuple[int, int]  # (row, col)
    sampling_score: float | None = None
    retained: bool | None = None


@dataclass(frozen=True)
class HrpnLossReport:
    loss_high: float
    loss_low: float
    loss_total: float
    n_low_retained: int
    n_low_filtered: int


def generate_anchors(
    pyramid_shapes: Sequence[tuple[int, int]],
    config: AnchorConfig,
    strides: Sequence[int] = STRIDES,
    image_size: tuple[int, int] | None = None,
) -> list[SampledAnchor]:
    """Dense anchors over every feature cell of every level.

    Each anchor is centered on its cell's center in image coordinates with
    width scale/sqrt(ratio) and height scale*sqrt(ratio), then clipped to the
    image bounds (derived from the finest level unless given). Count is
    sum over levels of H_k * W_k * len(scales) * len(ratios).
    """
    if len(pyramid_shapes) != len(strides):
        raise ValueError(
            f"{len(pyramid_shapes)} shapes for {len(strides)} strides"
        )
    if image_size is None:
        h0, w0 = pyramid_shapes[0]
        image_size = (w0 * strides[0], h0 * strides[0])
    img_w, img_h = image_size
    anchors = []
    for k, ((hk, wk), stride) in enumerate(zip(pyramid_shapes, strides)):
        for row in range(hk):
            cy = (row + 0.5) * stride
            for col in range(wk):
                cx = (col + 0.5) * stride
                for scale in config.scales:
                    for ratio in config.aspect_ratios:
                        w = scale / np.sqrt(ratio)
                        h = scale * np.sqrt(ratio)
                        box = BBox(
                            max(cx - 0.5 * w, 0.0),
                            max(cy - 0.5 * h, 0.0),
                            min(cx + 0.5 * w, float(img_w)),
                            min(cy + 0.5 * h, float(img_h)),
                        )
                        anchors.append(SampledAnchor(box, k + 1, (row, col)))
    return anchors


def sampling_score(anchor: BBox, proposals: Sequence[BBox], metric: str) -> float:
    """Best overlap of the anchor against any proposal; 0 with no proposals."""
    if metric not in METRICS:
        raise ValueError(f"metric must be one of {METRICS}, got {metric!r}")
    if not proposals:
        return 0.0
    if metric == "iou":
        return float(max(iou(anchor, p) for p in proposals))
    return float(max(inner_intersection(anchor, p) for p in proposals))


def filter_anchors(
    anchors: Sequence[SampledAnchor],
    proposals: Sequence[BBox],
    metric: str,
    threshold: float | None = None,
) -> tuple[list[SampledAnchor], list[SampledAnchor]]:
    """Partition anchors by sampling score strictly above the threshold.

    Returns (retained, filtered); every returned anchor carries its score and
    retained flag. Default thresholds: 0.4 for IoU, 0.1 for inner
    intersection.
    """
    if metric not in METRICS:
        raise ValueError(f"metric must be one of {METRICS}, got {metric!r}")
    if threshold is None:
        threshold = DEFAULT_THRESHOLDS[metric]
    if not 0.0 <= threshold <= 1.0:
        raise ValueError(f"threshold must lie in [0, 1], got {threshold}")
    retained, filtered = [], []
    for anchor in anchors:
        score = sampling_score(anchor.box, proposals, metric)
        keep = bool(score > threshold)
        updated = dataclasses.replace(anchor, sampling_score=score, retained=keep)
        (retained if keep else filtered).append(updated)
    return retained, filtered


def per_anchor_objectness_loss(
    anchor: SampledAnchor, gt_boxes: Sequence[BBox], predicted_logit: float
) -> float | None:
    """Binary cross-entropy against the IoU-band label, or None when ignored.

    Positive above 0.7 best IoU, negative at or below 0.3, ignored between.
    """
    if not np.isfinite(predicted_logit):
        raise ValueError(f"logit must be finite, got {predicted_logit}")
    best = max((iou(anchor.box, g) for g in gt_boxes), default=0.0)
    if best >= POSITIVE_IOU:
        return float(np.logaddexp(0.0, -predicted_logit))
    if best <= NEGATIVE_IOU:
        return float(np.logaddexp(0.0, predicted_logit))
    return None


def hrpn_loss(
    high_losses: Sequence[float],
    low_losses: Sequence[tuple[bool, float]],
) -> HrpnLossReport:
    """Mean high loss plus mean of retained low losses, filtered ones ignored."""
    for v in high_losses:
        if not (np.isfinite(v) and v >= 0):
            raise ValueError(f"high loss must be finite and >= 0, got {v}")
    kept = []
    n_filtered = 0
    for retained, v in low_losses:
        if not (np.isfinite(v) and v >= 0):
            raise ValueError(f"low loss must be finite and >= 0, got {v}")
        if retained:
            kept.append(v)
        else:
            n_filtered += 1
    loss_high = float(sum(high_losses) / len(high_losses)) if high_losses else 0.0
    loss_low = float(sum(kept) / len(kept)) if kept else 0.0
    return HrpnLossReport(
        loss_high=loss_high,
        loss_low=loss_low,
        loss_total=loss_high + loss_low,
        n_low_retained=len(kept),
        n_low_filtered=n_filtered,
    )


def multitask_loss(
    hrpn: HrpnLossReport,
    cls_loss: float,
    box_loss: float,
    mask_loss: float,
    mcl_loss: float,
) -> float:
    """Unweighted sum of the five training terms."""
    parts = (cls_loss, box_loss, mask_loss, mcl_loss)
    if any(not (np.isfinite(v) and v >= 0) for v in parts):
        raise ValueError(f"losses must be finite and >= 0, got {parts}")
    return hrpn.loss_total + cls_loss + box_loss + mask_loss + mcl_loss


def generate_proposals(
    anchors: Sequence[SampledAnchor],
    objectness_scores: Sequence[float],
    nms_threshold: float = 0.5,
    top_k: int = 100,
) -> list[BBox]:
    """Suppress overlapping anchors, keeping the best-scored survivors."""
    if len(anchors) != len(objectness_scores):
        raise ValueError("scores not aligned with anchors")
    boxes = [a.box if isinstance(a, SampledAnchor) else a for a in anchors]
    keep = nms_indices(boxes, list(objectness_scores), nms_threshold, top_k)
    return [boxes[i] for i in keep]


def _head_level(box: BBox) -> int:
    # FPN-style assignment: bigger boxes pool from coarser levels.
    side = np.sqrt(box.area)
    return int(np.clip(np.floor(np.log2(max(side, 1.0) / 16.0)), 0, 3))


def head_features(pyramid: FeaturePyramid, box: BBox, pool: int = 2) -> np.ndarray:
    """RoI-pooled feature vector (values and their squares) for one box."""
    level = _head_level(box)
    stride = pyramid.strides[level]
    scaled = BBox(box.x1 / stride, box.y1 / stride, box.x2 / stride, box.y2 / stride)
    feat = pyramid.levels[level]
    hk, wk = feat.shape[1], feat.shape[2]
    # clamp into the level's extent so coarse levels accept border boxes
    scaled = BBox(
        min(max(scaled.x1, 0.0), wk - 1e-3),
        min(max(scaled.y1, 0.0), hk - 1e-3),
        max(min(scaled.x2, float(wk)), min(max(scaled.x1, 0.0), wk - 1e-3) + 1e-3),
        max(min(scaled.y2, float(hk)), min(max(scaled.y1, 0.0), hk - 1e-3) + 1e-3),
    )
    patch = roi_align(feat, scaled, pool, pool).ravel()
    return np.concatenate([patch, np.square(patch), [1.0]])


@dataclass
class ObjectnessHead:
    """Logistic scorer over pooled features; stands in for a conv RPN head."""

    weights: np.ndarray
    pool: int = 2

    def logit(self, pyramid: FeaturePyramid, box: BBox) -> float:
        return float(self.weights @ head_features(pyramid, box, self.pool))

    def score(self, pyramid: FeaturePyramid, box: BBox) -> float:
        z = self.logit(pyramid, box)
        return float(1.0 / (1.0 + np.exp(-z)))


def train_objectness_head(
    frames: Sequence[tuple[FeaturePyramid, Sequence[BBox]]],
    anchors: Sequence[SampledAnchor],
    seed: int,
    steps: int = 300,
    batch: int = 64,
    lr: float = 0.01,
    pool: int = 2,
) -> ObjectnessHead:
    """Fit the logistic head on anchors labeled by IoU bands against gt boxes.

    Ignored-band anchors are excluded. Deterministic per seed.
    """
    samples: list[tuple[np.ndarray, float]] = []
    for pyramid, gt_boxes in frames:
        for anchor in anchors:
            best = max((iou(anchor.box, g) for g in gt_boxes), default=0.0)
            if best >= POSITIVE_IOU:
                label = 1.0
            elif best <= NEGATIVE_IOU:
                label = 0.0
            else:
                continue
            samples.append((head_features(pyramid, anchor.box, pool), label))
    if not samples:
        raise ValueError("no labeled anchors to train on")
    positives = [s for s in samples if s[1] == 1.0]
    negatives = [s for s in samples if s[1] == 0.0]
    if not positives or not negatives:
        raise ValueError("need both positive and negative anchors")
    g = rng.stream(seed, "objectness-head")
    dim = samples[0][0].shape[0]
    weights = np.zeros(dim)
    opt = Adam(lr=lr)
    for _ in range(steps):
        # balanced half-positive batches; pure negatives would swamp the rare positives
        feats, labels = [], []
        for _ in range(batch // 2):
            feats.append(positives[int(g.integers(len(positives)))][0])
            labels.append(1.0)
            feats.append(negatives[int(g.integers(len(negatives)))][0])
            labels.append(0.0)
        xs = np.stack(feats)
        ys = np.array(labels)
        probs = 1.0 / (1.0 + np.exp(-(xs @ weights)))
        grad = xs.T @ (probs - ys) / len(ys)
        opt.step([weights], [grad])
    return ObjectnessHead(weights=weights, pool=pool)
