"""Hierarchical annotation schema: videos, frames, buildings with nested damages.

Annotations live in a strict JSON file. Buildings and damages are both
instances; a damage instance carries a ``parent_id`` naming the building it
belongs to on the same image, and its rasterized mask must stay inside that
building's box. Size statistics bucket damage instances by mask-pixel area.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .geometry import DAMAGE_SCALES, BBox, BitMask, Detection

KINDS = ("building", "damage")
SIZE_BUCKETS = ("small", "medium", "large")

# Mask-pixel thresholds: 32*32 and 96*96, boundary areas fall upward.
SMALL_MAX = 1024
MEDIUM_MAX = 9216


class DatasetError(ValueError):
    """Raised for schema violations, naming the offending record."""


def area_bucket(area_pixels: int) -> str:
    """Half-open size buckets [0,1024), [1024,9216), [9216,inf)."""
    if area_pixels < 0:
        raise ValueError(f"area must be >= 0, got {area_pixels}")
    if area_pixels < SMALL_MAX:
        return "small"
    if area_pixels < MEDIUM_MAX:
        return "medium"
    return "large"


@dataclass(frozen=True)
class Video:
    id: int
    frame_rate: float
    num_frames: int

    def __post_init__(self):
        if self.frame_rate <= 0:
            raise DatasetError(f"video {self.id}: frame_rate must be > 0")
        if self.num_frames < 1:
            raise DatasetError(f"video {self.id}: num_frames must be >= 1")


@dataclass(frozen=True)
class ImageInfo:
    id: int
    video_id: int
    frame_index: int
    width: int
    height: int

    def __post_init__(self):
        if self.width < 1 or self.height < 1:
            raise DatasetError(f"image {self.id}: non-positive size")
        if self.frame_index < 0:
            raise DatasetError(f"image {self.id}: negative frame_index")


@dataclass(frozen=True)
class Instance:
    """One annotated building or damage region on one image."""

    id: int
    image_id: int
    kind: str
    box: BBox
    polygon: tuple[tuple[float, float], ...]
    scale: str | None = None
    parent_id: int | None = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise DatasetError(f"instance {self.id}: unknown kind {self.kind!r}")
        object.__setattr__(
            self, "polygon", tuple((float(x), float(y)) for x, y in self.polygon)
        )
        if len(self.polygon) < 3:
            raise DatasetError(f"instance {self.id}: polygon needs >= 3 vertices")
        if self.kind == "damage":
            if self.scale not in DAMAGE_SCALES:
                raise DatasetError(
                    f"instance {self.id}: damage requires scale in {DAMAGE_SCALES}"
                )
            if self.parent_id is None:
                raise DatasetError(f"instance {self.id}: damage requires parent_id")
        else:
            if self.scale is not None or self.parent_id is not None:
                raise DatasetError(
                    f"instance {self.id}: building must not carry scale/parent_id"
                )


@dataclass
class DatasetFile:
    videos: list[Video]
    images: list[ImageInfo]
    instances: list[Instance]

    def video_by_id(self, video_id: int) -> Video:
        for v in self.videos:
            if v.id == video_id:
                return v
        raise DatasetError(f"unknown video id {video_id}")

    def image_by_id(self, image_id: int) -> ImageInfo:
        for im in self.images:
            if im.id == image_id:
                return im
        raise DatasetError(f"unknown image id {image_id}")

    def instances_of_image(self, image_id: int) -> list[Instance]:
        return [inst for inst in self.instances if inst.image_id == image_id]


def rasterize_polygon(
    polygon: Sequence[tuple[float, float]], width: int, height: int
) -> BitMask:
    """Even-odd rasterization: a pixel is set iff its center lies in the polygon.

    Pixel (r, c) has center (c + 0.5, r + 0.5), matching the feature-map
    sampling convention elsewhere.
    """
    pts = np.asarray(polygon, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[0] < 3 or pts.shape[1] != 2:
        raise ValueError(f"polygon must be (V>=3, 2), got shape {pts.shape}")
    bits = np.zeros((height, width), dtype=bool)
    c_lo = max(int(np.floor(pts[:, 0].min() - 0.5)), 0)
    c_hi = min(int(np.ceil(pts[:, 0].max() - 0.5)) + 1, width)
    r_lo = max(int(np.floor(pts[:, 1].min() - 0.5)), 0)
    r_hi = min(int(np.ceil(pts[:, 1].max() - 0.5)) + 1, height)
    if c_lo >= c_hi or r_lo >= r_hi:
        return BitMask(bits)
    px = np.arange(c_lo, c_hi, dtype=np.float64) + 0.5
    py = (np.arange(r_lo, r_hi, dtype=np.float64) + 0.5)[:, None]
    inside = np.zeros((r_hi - r_lo, c_hi - c_lo), dtype=bool)
    x2s = np.roll(pts[:, 0], -1)
    y2s = np.roll(pts[:, 1], -1)
    for x1, y1, x2, y2 in zip(pts[:, 0], pts[:, 1], x2s, y2s):
        if y1 == y2:
            continue  # horizontal edges never cross a horizontal ray
        crosses = (y1 <= py) != (y2 <= py)
        xint = x1 + (py - y1) * (x2 - x1) / (y2 - y1)
        inside ^= crosses & (px[None, :] < xint)
    bits[r_lo:r_hi, c_lo:c_hi] = inside
    return BitMask(bits)


def instance_mask(inst: Instance, image: ImageInfo) -> BitMask:
    return rasterize_polygon(inst.polygon, image.width, image.height)


def validate_dataset(ds: DatasetFile) -> None:
    """Check all cross-record invariants, reporting ids in every message."""
    video_ids = [v.id for v in ds.videos]
    if len(set(video_ids)) != len(video_ids):
        raise DatasetError("duplicate video ids")
    image_ids = [im.id for im in ds.images]
    if len(set(image_ids)) != len(image_ids):
        raise DatasetError("duplicate image ids")
    videos = {v.id: v for v in ds.videos}
    images = {im.id: im for im in ds.images}

    for im in ds.images:
        if im.video_id not in videos:
            raise DatasetError(f"image {im.id}: dangling video_id {im.video_id}")
        if im.frame_index >= videos[im.video_id].num_frames:
            raise DatasetError(
                f"image {im.id}: frame_index {im.frame_index} >= num_frames "
                f"{videos[im.video_id].num_frames}"
            )

    by_image: dict[int, dict[int, Instance]] = {}
    for inst in ds.instances:
        if inst.image_id not in images:
            raise DatasetError(f"instance {inst.id}: dangling image_id {inst.image_id}")
        per = by_image.setdefault(inst.image_id, {})
        if inst.id in per:
            raise DatasetError(
                f"instance {inst.id}: duplicate id on image {inst.image_id}"
            )
        per[inst.id] = inst

    for inst in ds.instances:
        im = images[inst.image_id]
        xs = [p[0] for p in inst.polygon]
        ys = [p[1] for p in inst.polygon]
        if min(xs) < 0 or min(ys) < 0 or max(xs) > im.width or max(ys) > im.height:
            raise DatasetError(f"instance {inst.id}: polygon exits image bounds")
        tight = (min(xs), min(ys), max(xs), max(ys))
        got = inst.box.as_tuple()
        if any(abs(a - b) > 0.5 for a, b in zip(tight, got)):
            raise DatasetError(
                f"instance {inst.id}: box {got} not tight around polygon {tight}"
            )
        if inst.kind == "damage":
            parent = by_image[inst.image_id].get(inst.parent_id)
            if parent is None or parent.kind != "building":
                raise DatasetError(
                    f"instance {inst.id}: parent_id {inst.parent_id} does not "
                    f"resolve to a building on image {inst.image_id}"
                )
            mask = instance_mask(inst, im)
            rows, cols = np.nonzero(mask.bits)
            cx, cy = cols + 0.5, rows + 0.5
            pb = parent.box
            if len(rows) and (
                cx.min() < pb.x1 or cx.max() > pb.x2 or cy.min() < pb.y1 or cy.max() > pb.y2
            ):
                raise DatasetError(
                    f"instance {inst.id}: damage mask exits parent box of "
                    f"building {inst.parent_id}"
                )


def _require_keys(record: dict, required: set, optional: set, what: str) -> None:
    keys = set(record)
    missing = required - keys
    unknown = keys - required - optional
    if missing:
        raise DatasetError(f"{what}: missing keys {sorted(missing)}")
    if unknown:
        raise DatasetError(f"{what}: unknown keys {sorted(unknown)}")


def dataset_from_dict(data: dict) -> DatasetFile:
    if not isinstance(data, dict):
        raise DatasetError("top level must be a JSON object")
    _require_keys(data, {"videos", "images", "instances"}, set(), "dataset")
    videos = []
    for rec in data["videos"]:
        _require_keys(rec, {"id", "frame_rate", "num_frames"}, set(), "video record")
        videos.append(
            Video(int(rec["id"]), float(rec["frame_rate"]), int(rec["num_frames"]))
        )
    images = []
    for rec in data["images"]:
        _require_keys(
            rec, {"id", "video_id", "frame_index", "width", "height"}, set(), "image record"
        )
        images.append(
            ImageInfo(
                int(rec["id"]),
                int(rec["video_id"]),
                int(rec["frame_index"]),
                int(rec["width"]),
                int(rec["height"]),
            )
        )
    instances = []
    for rec in data["instances"]:
        _require_keys(
            rec,
            {"id", "image_id", "kind", "box", "polygon"},
            {"scale", "parent_id"},
            f"instance record {rec.get('id', '?')}",
        )
        box = rec["box"]
        if not (isinstance(box, list) and len(box) == 4):
            raise DatasetError(f"instance {rec['id']}: box must be [x1, y1, x2, y2]")
        parent = rec.get("parent_id")
        instances.append(
            Instance(
                id=int(rec["id"]),
                image_id=int(rec["image_id"]),
                kind=rec["kind"],
                box=BBox(*(float(v) for v in box)),
                polygon=tuple((float(x), float(y)) for x, y in rec["polygon"]),
                scale=rec.get("scale"),
                parent_id=None if parent is None else int(parent),
            )
        )
    ds = DatasetFile(videos, images, instances)
    validate_dataset(ds)
    return ds


def dataset_to_dict(ds: DatasetFile) -> dict:
    out = {
        "videos": [
            {"id": v.id, "frame_rate": v.frame_rate, "num_frames": v.num_frames}
            for v in ds.videos
        ],
        "images": [
            {
                "id": im.id,
                "video_id": im.video_id,
                "frame_index": im.frame_index,
                "width": im.width,
                "height": im.height,
            }
            for im in ds.images
        ],
        "instances": [],
    }
    for inst in ds.instances:
        rec = {
            "id": inst.id,
            "image_id": inst.image_id,
            "kind": inst.kind,
            "box": list(inst.box.as_tuple()),
            "polygon": [list(p) for p in inst.polygon],
        }
        if inst.kind == "damage":
            rec["scale"] = inst.scale
            rec["parent_id"] = inst.parent_id
        out["instances"].append(rec)
    return out


def load_dataset(path) -> DatasetFile:
    with open(path, "r", encoding="utf-8") as f:
        try:
            data = json.load(f)
        except json.JSONDecodeError as e:
            raise DatasetError(f"{path}: not valid JSON ({e})") from e
    return dataset_from_dict(data)


def save_dataset(path, ds: DatasetFile) -> None:
    validate_dataset(ds)
    with open(path, "w", encoding="utf-8") as f:
        json.dump(dataset_to_dict(ds), f, indent=1, sort_keys=True)
        f.write("\n")


@dataclass
class SizeStats:
    """Damage counts per (scale, bucket), Table-style rows and totals."""

    counts: dict = field(default_factory=dict)

    def count(self, scale: str, bucket: str) -> int:
        return self.counts.get((scale, bucket), 0)

    def row_total(self, scale: str) -> int:
        return sum(self.count(scale, b) for b in SIZE_BUCKETS)

    def bucket_total(self, bucket: str) -> int:
        return sum(self.count(s, bucket) for s in DAMAGE_SCALES)

    @property
    def total(self) -> int:
        return sum(self.row_total(s) for s in DAMAGE_SCALES)

    def to_dict(self) -> dict:
        rows = {}
        for scale in DAMAGE_SCALES:
            rows[scale] = {b: self.count(scale, b) for b in SIZE_BUCKETS}
            rows[scale]["total"] = self.row_total(scale)
        rows["total"] = {b: self.bucket_total(b) for b in SIZE_BUCKETS}
        rows["total"]["total"] = self.total
        return rows


def size_stats(ds: DatasetFile) -> SizeStats:
    """Bucket every damage instance by its rasterized mask area."""
    images = {im.id: im for im in ds.images}
    stats = SizeStats()
    for inst in ds.instances:
        if inst.kind != "damage":
            continue
        area = instance_mask(inst, images[inst.image_id]).area
        key = (inst.scale, area_bucket(area))
        stats.counts[key] = stats.counts.get(key, 0) + 1
    return stats


def format_size_stats(stats: SizeStats) -> str:
    header = ["scale", "small", "medium", "large", "total"]
    lines = ["  ".join(f"{h:>8}" for h in header)]
    for scale in DAMAGE_SCALES:
        cells = [stats.count(scale, b) for b in SIZE_BUCKETS] + [stats.row_total(scale)]
        lines.append("  ".join([f"{scale:>8}"] + [f"{c:>8}" for c in cells]))
    cells = [stats.bucket_total(b) for b in SIZE_BUCKETS] + [stats.total]
    lines.append("  ".join([f"{'total':>8}"] + [f"{c:>8}" for c in cells]))
    return "\n".join(lines)


def rle_encode(mask: BitMask) -> dict:
    """Row-major run lengths, alternating runs starting with zeros."""
    flat = mask.bits.ravel()
    if flat.size == 0:
        return {"size": [mask.height, mask.width], "counts": []}
    changes = np.nonzero(np.diff(flat))[0] + 1
    bounds = np.concatenate(([0], changes, [flat.size]))
    counts = np.diff(bounds).tolist()
    if flat[0]:
        counts = [0] + counts
    return {"size": [mask.height, mask.width], "counts": counts}


def rle_decode(rle: dict) -> BitMask:
    h, w = (int(v) for v in rle["size"])
    counts = rle["counts"]
    if sum(counts) != h * w:
        raise DatasetError(f"RLE counts sum {sum(counts)} != {h}*{w}")
    flat = np.zeros(h * w, dtype=bool)
    pos = 0
    value = False
    for run in counts:
        if run:
            flat[pos : pos + run] = value
        pos += run
        value = not value
    return BitMask(flat.reshape(h, w))


def detections_to_dict(dets: Iterable[Detection]) -> dict:
    out = []
    for d in dets:
        rec = {
            "image_id": d.frame_id,
            "box": list(d.box.as_tuple()),
            "score": d.score,
            "label": d.class_label,
            "mask": None if d.mask is None else rle_encode(d.mask),
        }
        out.append(rec)
    return {"detections": out}


def detections_from_dict(data: dict) -> list[Detection]:
    _require_keys(data, {"detections"}, set(), "detection file")
    dets = []
    for rec in data["detections"]:
        _require_keys(
            rec, {"image_id", "box", "score", "label", "mask"}, set(), "detection record"
        )
        dets.append(
            Detection(
                box=BBox(*(float(v) for v in rec["box"])),
                score=float(rec["score"]),
                class_label=rec["label"],
                frame_id=int(rec["image_id"]),
                mask=None if rec["mask"] is None else rle_decode(rec["mask"]),
            )
        )
    return dets


def save_detections(path, dets: Iterable[Detection]) -> None:
    with open(path, "w", encoding="utf-8") as f:
        json.dump(detections_to_dict(dets), f, indent=1, sort_keys=True)
        f.write("\n")


def load_detections(path) -> list[Detection]:
    with open(path, "r", encoding="utf-8") as f:
        try:
            data = json.load(f)
        except json.JSONDecodeError as e:
            raise DatasetError(f"{path}: not valid JSON ({e})") from e
    return detections_from_dict(data)
