"""Multi-level feature maps, a synthetic feature generator, and tensor I/O.

The pyramid stands in for a convolutional backbone: four levels of
(C, H_k, W_k) float32 maps at strides 4, 8, 16, 32. The synthetic generator
imprints an identity-keyed channel signature over every annotated instance
box, so the same physical instance looks alike wherever it appears, plus
low-amplitude seeded noise.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from typing import BinaryIO, Sequence

import numpy as np

from . import rng
from .geometry import BBox

STRIDES = (4, 8, 16, 32)
NUM_LEVELS = len(STRIDES)
SIGNAL_AMPLITUDE = 1.0
NOISE_AMPLITUDE = 0.05
# Per-channel RMS of the frame-wide drift; with the 0.05 cell noise the
# combined no-instance RMS is sqrt(0.0625^2 + 0.05^2) = 0.08 < 0.1 * signal.
AMBIENT_CHANNEL_RMS = 0.0625

MAGIC = b"MSNT"
_MAX_NDIM = 8
_MAX_ELEMENTS = 1 << 28


class TensorFormatError(ValueError):
    """Raised when a tensor file is malformed."""


@dataclass
class FeaturePyramid:
    """Four feature levels sharing a channel count, finest stride first."""

    levels: list[np.ndarray]
    strides: tuple[int, ...] = STRIDES

    def __post_init__(self):
        if len(self.levels) != len(self.strides):
            raise ValueError(
                f"expected {len(self.strides)} levels, got {len(self.levels)}"
            )
        if list(self.strides) != sorted(set(self.strides)):
            raise ValueError(f"strides must be strictly increasing, got {self.strides}")
        channels = {lvl.shape[0] for lvl in self.levels}
        if len(channels) != 1:
            raise ValueError(f"levels disagree on channel count: {sorted(channels)}")
        w0 = self.levels[0].shape[2] * self.strides[0]
        h0 = self.levels[0].shape[1] * self.strides[0]
        for lvl, s in zip(self.levels, self.strides):
            if lvl.ndim != 3:
                raise ValueError(f"level must be (C, H, W), got shape {lvl.shape}")
            if abs(lvl.shape[2] * s - w0) > s or abs(lvl.shape[1] * s - h0) > s:
                raise ValueError(
                    f"level shape {lvl.shape} at stride {s} does not cover "
                    f"the {w0}x{h0} image extent"
                )

    @property
    def channels(self) -> int:
        return int(self.levels[0].shape[0])

    @property
    def image_size(self) -> tuple[int, int]:
        """(width, height) in pixels, from the finest level."""
        return (
            self.levels[0].shape[2] * self.strides[0],
            self.levels[0].shape[1] * self.strides[0],
        )

    def level_shapes(self) -> list[tuple[int, int]]:
        return [(lvl.shape[1], lvl.shape[2]) for lvl in self.levels]


def level_shapes_for(image_size: tuple[int, int], strides: Sequence[int] = STRIDES) -> list[tuple[int, int]]:
    """(H_k, W_k) per stride for an image of (width, height) pixels."""
    w, h = image_size
    return [(h // s, w // s) for s in strides]


def instance_signature(instance_id: int, channels: int, seed: int) -> np.ndarray:
    """Unit channel signature for one instance identity.

    Keyed by (seed, id) through a counter-based generator, so the signature is
    identical in every frame of a scene without any shared generator state.
    """
    return rng.keyed_unit_vector(channels, "instance-signature", seed, instance_id)


def synth_pyramid(
    frame_annotations: Sequence[tuple[int, BBox]],
    image_size: tuple[int, int],
    channels: int,
    seed: int,
    signature_seed: int | None = None,
    exposure: float = 1.0,
) -> FeaturePyramid:
    """Deterministic backbone stand-in for one frame.

    ``frame_annotations`` is a sequence of (instance_id, box) pairs in image
    coordinates. Each instance adds its signature (amplitude 1.0) to every
    feature cell whose center falls inside its box, at every level; a box
    covering no cell center at a coarse level leaves that level untouched.
    Every cell also receives a frame-wide ambient drift vector plus Gaussian
    noise, keeping the no-instance RMS under a tenth of the signal amplitude.

    ``seed`` drives the frame-specific ambient and noise draws; signatures
    key off ``signature_seed`` (default: same as ``seed``) so one scene can
    vary the per-frame seed while every instance keeps a stable appearance.
    ``exposure`` scales the finished frame uniformly, signatures included,
    like a camera gain; it leaves every signal-to-noise ratio unchanged.
    """
    w, h = image_size
    if w <= 0 or h <= 0:
        raise ValueError(f"image size must be positive, got {image_size}")
    if w % max(STRIDES) or h % max(STRIDES):
        raise ValueError(f"image size {image_size} not divisible by stride {max(STRIDES)}")
    if channels < 4:
        raise ValueError(f"need at least 4 channels, got {channels}")
    if exposure <= 0.0 or not np.isfinite(exposure):
        raise ValueError(f"exposure must be positive and finite, got {exposure}")

    if signature_seed is None:
        signature_seed = seed
    ambient = rng.stream(seed, "pyramid-ambient").standard_normal(channels)
    ambient *= AMBIENT_CHANNEL_RMS * np.sqrt(channels) / np.linalg.norm(ambient)
    sigs = {
        instance_id: SIGNAL_AMPLITUDE
        * instance_signature(instance_id, channels, signature_seed)
        for instance_id, _ in frame_annotations
    }
    levels = []
    for k, stride in enumerate(STRIDES):
        hk, wk = h // stride, w // stride
        noise = rng.stream(seed, "pyramid-noise", k).standard_normal((channels, hk, wk))
        level = NOISE_AMPLITUDE * noise + ambient[:, None, None]
        for instance_id, box in frame_annotations:
            c_lo = max(int(np.ceil(box.x1 / stride - 0.5)), 0)
            c_hi = min(int(np.ceil(box.x2 / stride - 0.5)), wk)  # exclusive
            r_lo = max(int(np.ceil(box.y1 / stride - 0.5)), 0)
            r_hi = min(int(np.ceil(box.y2 / stride - 0.5)), hk)
            if c_lo < c_hi and r_lo < r_hi:
                level[:, r_lo:r_hi, c_lo:c_hi] += sigs[instance_id][:, None, None]
        levels.append((exposure * level).astype(np.float32))
    return FeaturePyramid(levels)


def write_tensor_record(f: BinaryIO, tensor: np.ndarray) -> None:
    """Append one tensor record: magic, u32 ndim, u32 dims, f32 row-major data."""
    tensor = np.asarray(tensor, dtype=np.float32)
    if tensor.ndim < 1 or any(d < 1 for d in tensor.shape):
        raise TensorFormatError(f"tensor dims must each be >= 1, got shape {tensor.shape}")
    if tensor.ndim > _MAX_NDIM:
        raise TensorFormatError(f"too many dimensions: {tensor.ndim}")
    f.write(MAGIC)
    f.write(struct.pack("<I", tensor.ndim))
    f.write(struct.pack(f"<{tensor.ndim}I", *tensor.shape))
    f.write(np.ascontiguousarray(tensor).tobytes())


def read_tensor_record(f: BinaryIO) -> np.ndarray:
    """Read one tensor record written by :func:`write_tensor_record`."""
    magic = f.read(4)
    if magic != MAGIC:
        raise TensorFormatError(f"bad magic {magic!r}, expected {MAGIC!r}")
    raw = f.read(4)
    if len(raw) != 4:
        raise TensorFormatError("truncated header")
    (ndim,) = struct.unpack("<I", raw)
    if ndim < 1 or ndim > _MAX_NDIM:
        raise TensorFormatError(f"unsupported ndim {ndim}")
    raw = f.read(4 * ndim)
    if len(raw) != 4 * ndim:
        raise TensorFormatError("truncated dims")
    dims = struct.unpack(f"<{ndim}I", raw)
    if any(d < 1 for d in dims):
        raise TensorFormatError(f"dims must each be >= 1, got {dims}")
    count = 1
    for d in dims:
        count *= d
        if count > _MAX_ELEMENTS:
            raise TensorFormatError(f"dim overflow: {dims}")
    raw = f.read(4 * count)
    if len(raw) != 4 * count:
        raise TensorFormatError(
            f"truncated payload: expected {4 * count} bytes, got {len(raw)}"
        )
    return np.frombuffer(raw, dtype="<f4").reshape(dims).copy()


def save_tensor(path, tensor: np.ndarray) -> None:
    with open(path, "wb") as f:
        write_tensor_record(f, tensor)


def load_tensor(path) -> np.ndarray:
    with open(path, "rb") as f:
        tensor = read_tensor_record(f)
        if f.read(1):
            raise TensorFormatError("trailing bytes after tensor payload")
    return tensor


def save_pyramid(path, pyramid: FeaturePyramid) -> None:
    """Write a pyramid as consecutive tensor records, finest level first."""
    with open(path, "wb") as f:
        for level in pyramid.levels:
            write_tensor_record(f, level)


def load_pyramid(path, strides: Sequence[int] = STRIDES) -> FeaturePyramid:
    levels = []
    with open(path, "rb") as f:
        for _ in strides:
            levels.append(read_tensor_record(f))
        if f.read(1):
            raise TensorFormatError("trailing bytes after pyramid levels")
    return FeaturePyramid(levels, tuple(strides))
