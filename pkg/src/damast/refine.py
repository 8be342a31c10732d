"""Cross-frame confidence calibration.

Detections in two adjacent frames are paired by appearance: the pyramid is
embedded per location by the trained encoder, each detection's box is
RoI-aligned out of every embedded level, and pairwise similarity is the mean
over levels of the mean per-location cosine between aligned patches. A
detection whose original score falls inside the closed calibration window
takes the average of its own and its best partner's original scores; nothing
else about any detection changes.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .geometry import BBox, Detection, roi_align
from .pyramid import FeaturePyramid
from .srn import EncoderParams, encode_map


@dataclass(frozen=True)
class RefineConfig:
    params: EncoderParams
    c0: float = 0.2
    c1: float = 0.7
    roi_out: tuple[int, int] = (3, 3)

    def __post_init__(self):
        if not 0.0 <= self.c0 < self.c1 <= 1.0:
            raise ValueError(
                f"window must satisfy 0 <= c0 < c1 <= 1, got [{self.c0}, {self.c1}]"
            )
        if self.roi_out[0] < 1 or self.roi_out[1] < 1:
            raise ValueError(f"pooled size must be >= 1, got {self.roi_out}")


@dataclass
class MatchReport:
    """Best partner per detection, both directions, plus the score updates."""

    pairs_p: list[dict] = field(default_factory=list)
    pairs_q: list[dict] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {"pairs_p": self.pairs_p, "pairs_q": self.pairs_q}


def _embed_pyramid(pyr: FeaturePyramid, params: EncoderParams) -> list[np.ndarray]:
    return [encode_map(level, params) for level in pyr.levels]


def _patches(
    embedded: list[np.ndarray],
    strides,
    box: BBox,
    roi_out: tuple[int, int],
) -> list[np.ndarray]:
    """Aligned (locations, E) patch per level for one detection box."""
    out = []
    for emb, stride in zip(embedded, strides):
        hk, wk = emb.shape[1], emb.shape[2]
        x1 = min(max(box.x1 / stride, 0.0), wk - 1e-3)
        y1 = min(max(box.y1 / stride, 0.0), hk - 1e-3)
        x2 = max(min(box.x2 / stride, float(wk)), x1 + 1e-3)
        y2 = max(min(box.y2 / stride, float(hk)), y1 + 1e-3)
        patch = roi_align(emb, BBox(x1, y1, x2, y2), roi_out[0], roi_out[1])
        out.append(patch.reshape(patch.shape[0], -1).T)
    return out


def _patch_similarity(a: list[np.ndarray], b: list[np.ndarray]) -> float:
    """Mean over levels of the mean per-location cosine."""
    sims = []
    for pa, pb in zip(a, b):
        na = np.linalg.norm(pa, axis=1)
        nb = np.linalg.norm(pb, axis=1)
        if (na == 0.0).any() or (nb == 0.0).any():
            raise ValueError("zero-norm embedding: cosine undefined")
        sims.append(float(((pa * pb).sum(axis=1) / (na * nb)).mean()))
    return float(np.mean(sims))


def refine_scores(
    dets_p: list[Detection],
    dets_q: list[Detection],
    pyr_p: FeaturePyramid,
    pyr_q: FeaturePyramid,
    cfg: RefineConfig,
) -> tuple[list[Detection], list[Detection], MatchReport]:
    """Calibrate both frames' scores in one pass over original values.

    Each P detection is paired with the most similar Q detection and vice
    versa (ties to the lowest index). Only detections whose original score
    lies in the closed window [c0, c1] change; the replacement is the mean of
    the two original scores, so no update feeds another. With an empty other
    frame both lists pass through untouched.
    """
    report = MatchReport()
    if not dets_p or not dets_q:
        return list(dets_p), list(dets_q), report

    emb_p = _embed_pyramid(pyr_p, cfg.params)
    emb_q = _embed_pyramid(pyr_q, cfg.params)
    patches_p = [_patches(emb_p, pyr_p.strides, d.box, cfg.roi_out) for d in dets_p]
    patches_q = [_patches(emb_q, pyr_q.strides, d.box, cfg.roi_out) for d in dets_q]

    sim = np.empty((len(dets_p), len(dets_q)))
    for i, pa in enumerate(patches_p):
        for j, pb in enumerate(patches_q):
            sim[i, j] = _patch_similarity(pa, pb)

    def calibrated(det: Detection, partner: Detection, similarity: float, row: dict):
        row["similarity"] = similarity
        if cfg.c0 <= det.score <= cfg.c1:
            new_score = 0.5 * (det.score + partner.score)
            row["score"] = [det.score, new_score]
            return det.with_score(new_score)
        row["score"] = [det.score, det.score]
        return det

    refined_p, refined_q = [], []
    for i, det in enumerate(dets_p):
        j = int(np.argmax(sim[i]))  # argmax takes the first (lowest) index on ties
        row = {"index": i, "partner": j}
        refined_p.append(calibrated(det, dets_q[j], float(sim[i, j]), row))
        report.pairs_p.append(row)
    for j, det in enumerate(dets_q):
        i = int(np.argmax(sim[:, j]))
        row = {"index": j, "partner": i}
        refined_q.append(calibrated(det, dets_p[i], float(sim[i, j]), row))
        report.pairs_q.append(row)
    return refined_p, refined_q, report
