"""Synthetic aerial-video scenes: buildings with nested damages under a
translating viewport, plus a controllable noisy stand-in detector.

World geometry is fixed once per video; each frame sees it through a viewport
shifted by the drone velocity times the frame index. Polygons are clipped to
the viewport and boxes recomputed tight, so every frame passes full dataset
validation including damage-inside-parent containment. Everything is a pure
function of the spec and seeds.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import rng
from .dataset import (
    DatasetFile,
    ImageInfo,
    Instance,
    Video,
    rasterize_polygon,
    validate_dataset,
)
from .geometry import DAMAGE_SCALES, BBox, Detection
from .pyramid import STRIDES, FeaturePyramid, synth_pyramid

# Damage side-length ranges per target size bucket. Rectangle masks land at
# roughly side*side pixels, diamonds at half that; both stay inside their
# bucket with margin for the half-pixel rasterization wobble.
_RECT_SIDES = {"small": (10.0, 26.0), "medium": (45.0, 85.0), "large": (100.0, 130.0)}
_DIAMOND_SIDES = {"small": (16.0, 36.0), "medium": (66.0, 120.0), "large": (142.0, 180.0)}
_GAP = 4.0

SPURIOUS_SCORE_MAX = 0.15


@dataclass(frozen=True)
class VideoSpec:
    image_size: tuple[int, int] = (256, 192)
    num_frames: int = 24
    frame_rate: float = 2.0
    drone_velocity: tuple[float, float] = (4.0, 0.0)
    n_buildings: int = 6
    damages_per_building: int = 2
    scale_weights: tuple[float, float, float] = (1.0, 1.0, 1.0)
    bucket_weights: tuple[float, float, float] = (0.7, 0.25, 0.05)
    building_size_range: tuple[float, float] | None = None
    exposure_drift: tuple[float, float] | None = None
    channels: int = 16
    video_id: int = 0
    seed: int = 0

    def exposure_at(self, frame_index: int) -> float:
        """Camera gain for one frame: a linear sweep across the video."""
        if self.exposure_drift is None:
            return 1.0
        lo, hi = self.exposure_drift
        if self.num_frames == 1:
            return float(lo)
        return float(lo + (hi - lo) * frame_index / (self.num_frames - 1))

    def __post_init__(self):
        w, h = self.image_size
        if w <= 0 or h <= 0:
            raise ValueError(f"image size must be positive, got {self.image_size}")
        if w % max(STRIDES) or h % max(STRIDES):
            raise ValueError(
                f"image size {self.image_size} not divisible by {max(STRIDES)}"
            )
        if self.num_frames < 1:
            raise ValueError("num_frames must be >= 1")
        if self.frame_rate <= 0:
            raise ValueError("frame_rate must be > 0")
        if not all(np.isfinite(self.drone_velocity)):
            raise ValueError("velocity must be finite")
        if self.n_buildings < 0 or self.damages_per_building < 0:
            raise ValueError("counts must be >= 0")
        for weights in (self.scale_weights, self.bucket_weights):
            if len(weights) != 3 or any(v < 0 for v in weights) or sum(weights) <= 0:
                raise ValueError(f"bad weight vector {weights}")
        if self.exposure_drift is not None:
            if len(self.exposure_drift) != 2 or any(
                v <= 0 or not np.isfinite(v) for v in self.exposure_drift
            ):
                raise ValueError(f"bad exposure drift {self.exposure_drift}")


@dataclass(frozen=True)
class DetectorNoise:
    score_jitter: float = 0.1
    drop_rate: float = 0.1
    spurious_rate: float = 0.1
    box_jitter: float = 1.0

    def __post_init__(self):
        if self.score_jitter < 0 or self.box_jitter < 0:
            raise ValueError("jitters must be >= 0")
        for p in (self.drop_rate, self.spurious_rate):
            if not 0.0 <= p <= 1.0:
                raise ValueError(f"rates must lie in [0, 1], got {p}")


def clip_polygon(
    points: Sequence[tuple[float, float]], x0: float, y0: float, x1: float, y1: float
) -> list[tuple[float, float]]:
    """Clip a polygon to an axis-aligned window, one boundary at a time."""
    edges = (
        lambda p: p[0] >= x0,
        lambda p: p[0] <= x1,
        lambda p: p[1] >= y0,
        lambda p: p[1] <= y1,
    )
    lerps = (
        lambda a, b: (x0, a[1] + (b[1] - a[1]) * (x0 - a[0]) / (b[0] - a[0])),
        lambda a, b: (x1, a[1] + (b[1] - a[1]) * (x1 - a[0]) / (b[0] - a[0])),
        lambda a, b: (a[0] + (b[0] - a[0]) * (y0 - a[1]) / (b[1] - a[1]), y0),
        lambda a, b: (a[0] + (b[0] - a[0]) * (y1 - a[1]) / (b[1] - a[1]), y1),
    )
    poly = list(points)
    for inside, cross in zip(edges, lerps):
        if not poly:
            break
        out = []
        for i, cur in enumerate(poly):
            prev = poly[i - 1]
            if inside(cur):
                if not inside(prev):
                    out.append(cross(prev, cur))
                out.append(cur)
            elif inside(prev):
                out.append(cross(prev, cur))
        poly = out
    deduped = [p for i, p in enumerate(poly) if p != poly[i - 1]]
    return deduped


def _polygon_area(points: Sequence[tuple[float, float]]) -> float:
    if len(points) < 3:
        return 0.0
    xs = np.array([p[0] for p in points])
    ys = np.array([p[1] for p in points])
    return 0.5 * abs(np.dot(xs, np.roll(ys, -1)) - np.dot(ys, np.roll(xs, -1)))


def _rect(x: float, y: float, w: float, h: float) -> list[tuple[float, float]]:
    return [(x, y), (x + w, y), (x + w, y + h), (x, y + h)]


def _diamond(x: float, y: float, w: float, h: float) -> list[tuple[float, float]]:
    return [
        (x + 0.5 * w, y),
        (x + w, y + 0.5 * h),
        (x + 0.5 * w, y + h),
        (x, y + 0.5 * h),
    ]


@dataclass
class _WorldInstance:
    id: int
    kind: str
    polygon: list[tuple[float, float]]
    scale: str | None = None
    parent_id: int | None = None


def _pick(g: np.random.Generator, options: Sequence[str], weights: Sequence[float]) -> str:
    p = np.asarray(weights, dtype=np.float64)
    return options[int(g.choice(len(options), p=p / p.sum()))]


def _build_world(spec: VideoSpec, g: np.random.Generator) -> list[_WorldInstance]:
    w_img, h_img = spec.image_size
    vx, vy = spec.drone_velocity
    span = spec.num_frames - 1
    x_lo, x_hi = min(0.0, vx * span), w_img + max(0.0, vx * span)
    y_lo, y_hi = min(0.0, vy * span), h_img + max(0.0, vy * span)

    world: list[_WorldInstance] = []
    placed_boxes: list[tuple[float, float, float, float]] = []
    next_id = 10000
    for _ in range(spec.n_buildings):
        damages = []
        need_w, need_h = _GAP, 2.0 * _GAP
        for _ in range(spec.damages_per_building):
            bucket = _pick(g, ("small", "medium", "large"), spec.bucket_weights)
            scale = _pick(g, DAMAGE_SCALES, spec.scale_weights)
            shape = "rect" if g.uniform() < 0.5 else "diamond"
            lo, hi = (_RECT_SIDES if shape == "rect" else _DIAMOND_SIDES)[bucket]
            dw, dh = g.uniform(lo, hi), g.uniform(lo, hi)
            damages.append((scale, shape, dw, dh))
            need_w += dw + _GAP
            need_h = max(need_h, dh + 2.0 * _GAP)
        if spec.building_size_range is not None:
            lo, hi = spec.building_size_range
            bw = max(g.uniform(lo, hi), need_w)
            bh = max(g.uniform(lo, hi), need_h)
        else:
            bw = need_w + g.uniform(4.0, 20.0)
            bh = need_h + g.uniform(4.0, 20.0)
        bw = min(bw, x_hi - x_lo)
        bh = min(bh, y_hi - y_lo)
        if bw < need_w or bh < need_h:
            raise ValueError(
                f"world strip {x_hi - x_lo:.0f}x{y_hi - y_lo:.0f} too small for a "
                f"building needing {need_w:.0f}x{need_h:.0f}"
            )

        bx = by = 0.0
        for _ in range(200):
            bx = g.uniform(x_lo, x_hi - bw)
            by = g.uniform(y_lo, y_hi - bh)
            clear = all(
                bx + bw + 2 <= ox or ox + ow + 2 <= bx or by + bh + 2 <= oy or oy + oh + 2 <= by
                for ox, oy, ow, oh in placed_boxes
            )
            if clear:
                break
        placed_boxes.append((bx, by, bw, bh))

        building_id = next_id
        next_id += 1
        world.append(_WorldInstance(building_id, "building", _rect(bx, by, bw, bh)))
        cursor = bx + _GAP
        for scale, shape, dw, dh in damages:
            dy = by + _GAP + g.uniform(0.0, max(bh - 2.0 * _GAP - dh, 0.0))
            maker = _rect if shape == "rect" else _diamond
            world.append(
                _WorldInstance(next_id, "damage", maker(cursor, dy, dw, dh), scale, building_id)
            )
            next_id += 1
            cursor += dw + _GAP
    return world


def generate_video(spec: VideoSpec) -> tuple[DatasetFile, list[FeaturePyramid]]:
    """Simulate one video: annotations plus one feature pyramid per frame."""
    g = rng.stream(spec.seed, "simulate-world", spec.video_id)
    world = _build_world(spec, g)
    w_img, h_img = spec.image_size
    vx, vy = spec.drone_velocity
    id_base = spec.video_id * 1000000

    images: list[ImageInfo] = []
    instances: list[Instance] = []
    pyramids: list[FeaturePyramid] = []
    for t in range(spec.num_frames):
        image_id = id_base + t
        ox, oy = vx * t, vy * t
        frame_instances: list[Instance] = []
        visible_buildings: set[int] = set()
        for item in world:
            poly = [(x - ox, y - oy) for x, y in item.polygon]
            clipped = clip_polygon(poly, 0.0, 0.0, float(w_img), float(h_img))
            if len(clipped) < 3 or _polygon_area(clipped) < 1e-9:
                continue
            xs = [p[0] for p in clipped]
            ys = [p[1] for p in clipped]
            if max(xs) - min(xs) < 1e-6 or max(ys) - min(ys) < 1e-6:
                continue
            if item.kind == "damage" and item.parent_id not in visible_buildings:
                continue  # parent fully out of view; invisible slivers drop with it
            if item.kind == "building":
                visible_buildings.add(item.id)
            frame_instances.append(
                Instance(
                    id=id_base + item.id,
                    image_id=image_id,
                    kind=item.kind,
                    box=BBox(min(xs), min(ys), max(xs), max(ys)),
                    polygon=tuple(clipped),
                    scale=item.scale,
                    parent_id=None if item.parent_id is None else id_base + item.parent_id,
                )
            )
        images.append(ImageInfo(image_id, spec.video_id, t, w_img, h_img))
        instances.extend(frame_instances)
        pyramids.append(
            synth_pyramid(
                [(inst.id, inst.box) for inst in frame_instances],
                spec.image_size,
                spec.channels,
                seed=rng.child_seed(spec.seed, "frame-pyramid", spec.video_id, t),
                signature_seed=rng.child_seed(spec.seed, "scene-signatures", spec.video_id),
                exposure=spec.exposure_at(t),
            )
        )
    ds = DatasetFile(
        videos=[Video(spec.video_id, spec.frame_rate, spec.num_frames)],
        images=images,
        instances=instances,
    )
    validate_dataset(ds)
    return ds, pyramids


def merge_datasets(parts: Sequence[DatasetFile]) -> DatasetFile:
    """Concatenate videos generated with distinct video ids."""
    merged = DatasetFile(
        videos=[v for p in parts for v in p.videos],
        images=[im for p in parts for im in p.images],
        instances=[inst for p in parts for inst in p.instances],
    )
    validate_dataset(merged)
    return merged


def synth_detector(
    ds: DatasetFile, image_id: int, noise: DetectorNoise, seed: int
) -> list[Detection]:
    """Noisy oracle detections for one frame's damage ground truth.

    Every non-dropped damage yields a detection whose score is 1 minus an
    exponential deficit (scale 2 * score_jitter, clamped to [0, 1]) and whose
    box corners are jittered; the mask stays the exact rasterized ground
    truth. Each ground-truth visit also rolls one chance of a spurious
    low-score detection. With all noise at zero the output equals the ground
    truth at score 1.
    """
    image = ds.image_by_id(image_id)
    g = rng.stream(seed, "synth-detector", image_id)
    dets: list[Detection] = []
    for inst in ds.instances_of_image(image_id):
        if inst.kind != "damage":
            continue
        dropped = g.uniform() < noise.drop_rate
        score = float(np.clip(1.0 - g.exponential(scale=2.0 * noise.score_jitter), 0.0, 1.0))
        offsets = noise.box_jitter * g.standard_normal(4)
        if not dropped:
            x1, y1, x2, y2 = (c + o for c, o in zip(inst.box.as_tuple(), offsets))
            x1, x2 = sorted((x1, x2))
            y1, y2 = sorted((y1, y2))
            x1 = float(np.clip(x1, 0.0, image.width - 0.5))
            y1 = float(np.clip(y1, 0.0, image.height - 0.5))
            x2 = float(np.clip(max(x2, x1 + 0.5), x1 + 0.25, image.width))
            y2 = float(np.clip(max(y2, y1 + 0.5), y1 + 0.25, image.height))
            dets.append(
                Detection(
                    box=BBox(x1, y1, x2, y2),
                    score=score,
                    class_label=inst.scale,
                    frame_id=image_id,
                    mask=rasterize_polygon(inst.polygon, image.width, image.height),
                )
            )
        if g.uniform() < noise.spurious_rate:
            sw, sh = g.uniform(8.0, 24.0, size=2)
            sx = g.uniform(0.0, image.width - sw)
            sy = g.uniform(0.0, image.height - sh)
            spur_score = float(g.uniform(0.0, SPURIOUS_SCORE_MAX))
            label = DAMAGE_SCALES[int(g.integers(len(DAMAGE_SCALES)))]
            dets.append(
                Detection(
                    box=BBox(sx, sy, sx + sw, sy + sh),
                    score=spur_score,
                    class_label=label,
                    frame_id=image_id,
                    mask=rasterize_polygon(
                        _rect(sx, sy, sw, sh), image.width, image.height
                    ),
                )
            )
    return dets
