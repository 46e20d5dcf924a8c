"""Training-data augmentation: motion blur, synthetic clips from static
image/mask pairs, and conversion of instance annotations into merged masks.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np
from scipy import ndimage

from .data_io import DatasetError, VideoSample, load_frame, load_mask

DEFAULT_CLASSES = frozenset({
    "person", "dog", "cat", "horse", "sheep", "cow", "elephant", "bear",
    "zebra", "giraffe", "bird", "bicycle", "car", "motorcycle", "bus",
    "truck", "boat",
})


@dataclass(frozen=True)
class BlurKernel:
    size: int
    angle: float
    weights: np.ndarray = field(repr=False, compare=False)


@dataclass
class BlurConfig:
    probability: float = 0.3
    size_choices: Tuple[int, ...] = (3, 5, 7, 9, 11, 13, 15)
    angle_range: float = 180.0

    def __post_init__(self):
        if not 0.0 <= self.probability <= 1.0:
            raise ValueError("blur probability must lie in [0, 1]")
        if not self.size_choices:
            raise ValueError("size_choices must be non-empty")
        for s in self.size_choices:
            if s < 1 or s % 2 == 0:
                raise ValueError(f"blur sizes must be odd and positive, got {s}")
        if not 0.0 < self.angle_range <= 180.0:
            raise ValueError("angle_range must lie in (0, 180]")


@dataclass
class AffineJitter:
    max_rotation: float = 15.0
    max_shear: float = 10.0
    max_scale_delta: float = 0.1
    max_translate: float = 0.1

    def __post_init__(self):
        if min(self.max_rotation, self.max_shear, self.max_scale_delta, self.max_translate) < 0:
            raise ValueError("jitter bounds must be non-negative")


@dataclass
class InstanceRecord:
    image_id: str
    class_name: str
    binary_mask: np.ndarray


# --------------------------------------------------------------------------
# motion blur

def line_support(size: int, angle: float) -> List[Tuple[int, int]]:
    """Pixels (row, col) of a centered digital line of ``size`` pixels.

    Steps one pixel at a time along the dominant axis, so the support has
    exactly ``size`` pixels and is point-symmetric about the center.
    """
    c = size // 2
    theta = math.radians(angle)
    dx, dy = math.cos(theta), -math.sin(theta)  # image rows grow downward
    pts = []
    for step in range(-c, c + 1):
        if abs(dx) >= abs(dy):
            col = step
            row = int(np.round(step * dy / dx))
        else:
            row = step
            col = int(np.round(step * dx / dy))
        pts.append((c + row, c + col))
    return pts


def make_blur_kernel(size: int, angle: float) -> BlurKernel:
    if int(size) != size or size < 1 or size % 2 == 0:
        raise ValueError(f"kernel size must be a positive odd integer, got {size}")
    if not 0.0 <= angle < 180.0:
        raise ValueError(f"angle must lie in [0, 180), got {angle}")
    size = int(size)
    w = np.zeros((size, size), dtype=np.float64)
    for r, c in line_support(size, angle):
        w[r, c] = 1.0
    w /= w.sum()
    return BlurKernel(size, float(angle), w)


def apply_motion_blur(frame: np.ndarray, kernel: BlurKernel) -> np.ndarray:
    """Convolve each channel with ``kernel`` (reflective borders), clamp to [0, 1]."""
    frame = np.asarray(frame)
    h, w = frame.shape[:2]
    if kernel.size > min(h, w):
        raise ValueError(f"kernel size {kernel.size} exceeds image size {h}x{w}")
    if kernel.size == 1:
        return frame.copy()
    src = frame.astype(np.float64)
    out = np.empty_like(src)
    for ch in range(src.shape[2]):
        out[..., ch] = ndimage.convolve(src[..., ch], kernel.weights, mode="reflect")
    # float64 accumulation then cast keeps constant images bit-exact
    return np.clip(out, 0.0, 1.0).astype(frame.dtype)


def sample_blur(rng: np.random.Generator, config: BlurConfig) -> Optional[BlurKernel]:
    if rng.random() >= config.probability:
        return None
    size = int(rng.choice(np.asarray(config.size_choices)))
    angle = float(rng.uniform(0.0, config.angle_range)) % 180.0
    return make_blur_kernel(size, angle)


# --------------------------------------------------------------------------
# synthetic clips

def random_affine(rng: np.random.Generator, jitter: AffineJitter, shape) -> np.ndarray:
    """A 3x3 forward transform in (row, col) homogeneous coordinates, about the image center."""
    h, w = shape
    rot = math.radians(rng.uniform(-jitter.max_rotation, jitter.max_rotation))
    shear = math.radians(rng.uniform(-jitter.max_shear, jitter.max_shear))
    scale = 1.0 + rng.uniform(-jitter.max_scale_delta, jitter.max_scale_delta)
    ty = rng.uniform(-jitter.max_translate, jitter.max_translate) * h
    tx = rng.uniform(-jitter.max_translate, jitter.max_translate) * w

    cos, sin = math.cos(rot), math.sin(rot)
    lin = np.array([[cos, -sin], [sin, cos]]) @ np.array([[1.0, 0.0], [math.tan(shear), 1.0]]) * scale
    center = np.array([(h - 1) / 2.0, (w - 1) / 2.0])
    mat = np.eye(3)
    mat[:2, :2] = lin
    mat[:2, 2] = center - lin @ center + np.array([ty, tx])
    return mat


def warp_frame(frame: np.ndarray, transform: np.ndarray) -> np.ndarray:
    inv = np.linalg.inv(transform)
    out = np.empty_like(frame)
    for ch in range(frame.shape[2]):
        out[..., ch] = ndimage.affine_transform(
            frame[..., ch], inv[:2, :2], offset=inv[:2, 2], order=1, mode="nearest"
        )
    return np.clip(out, 0.0, 1.0)


def warp_mask(mask: np.ndarray, transform: np.ndarray) -> np.ndarray:
    inv = np.linalg.inv(transform)
    return ndimage.affine_transform(
        mask, inv[:2, :2], offset=inv[:2, 2], order=0, mode="constant", cval=0
    )


def synth_video(
    image: np.ndarray,
    mask: np.ndarray,
    n_frames: int,
    jitter: AffineJitter,
    rng: np.random.Generator,
    video_id: str = "synthetic",
) -> VideoSample:
    """Turn a static pair into a clip by compounding small random affine warps."""
    if n_frames < 1:
        raise ValueError("n_frames must be >= 1")
    if image.shape[:2] != mask.shape:
        raise DatasetError(f"mask {mask.shape} does not match image {image.shape[:2]}")
    frames, masks = [image], [mask]
    transform = np.eye(3)
    for _ in range(n_frames - 1):
        transform = random_affine(rng, jitter, mask.shape) @ transform
        frames.append(warp_frame(image, transform))
        masks.append(warp_mask(mask, transform))
    ids = sorted(int(v) for v in np.unique(mask) if v != 0)
    return VideoSample(video_id, frames, masks, object_ids=ids)


# --------------------------------------------------------------------------
# instance annotations

def filter_and_binarize(records: Iterable[InstanceRecord], allowed_classes) -> List[InstanceRecord]:
    allowed = set(allowed_classes)
    return [
        InstanceRecord(r.image_id, r.class_name, (np.asarray(r.binary_mask) > 0).astype(np.int32))
        for r in records
        if r.class_name in allowed
    ]


def merge_masks(records: Sequence[InstanceRecord]) -> np.ndarray:
    """Stack binary records into one label map; record k gets label k, later records win."""
    if not records:
        raise ValueError("merge_masks needs at least one record")
    shape = np.asarray(records[0].binary_mask).shape
    merged = np.zeros(shape, dtype=np.int32)
    for k, rec in enumerate(records, start=1):
        m = np.asarray(rec.binary_mask)
        if m.shape != shape:
            raise DatasetError(f"record {k} has shape {m.shape}, expected {shape}")
        merged[m > 0] = k
    return merged


def load_instance_records(root) -> Dict[str, Tuple[np.ndarray, List[InstanceRecord]]]:
    """Read ``<root>/<image_id>/{image.*, <k>_<class>.png}`` plus ``<root>/manifest.json``.

    The manifest maps each image id to its class names in ``k`` order and is
    authoritative; file names must agree with it.
    """
    root = Path(root)
    manifest_path = root / "manifest.json"
    if not manifest_path.exists():
        raise DatasetError(f"missing instance manifest {manifest_path}")
    manifest = json.loads(manifest_path.read_text())
    out = {}
    for image_id in sorted(manifest):
        idir = root / image_id
        images = [p for p in sorted(idir.glob("image.*"))]
        if not images:
            raise DatasetError(f"{idir}: no image file")
        records = []
        for k, cls in enumerate(manifest[image_id], start=1):
            path = idir / f"{k}_{cls}.png"
            if not path.exists():
                raise DatasetError(f"{path} listed in manifest but missing")
            records.append(InstanceRecord(image_id, cls, load_mask(path)))
        out[image_id] = (load_frame(images[0]), records)
    return out


# --------------------------------------------------------------------------
# cropping

def _upscale_to(frame, mask, min_side):
    h, w = mask.shape
    s = min_side / min(h, w)
    if s <= 1.0:
        return frame, mask
    nh, nw = max(min_side, math.ceil(h * s)), max(min_side, math.ceil(w * s))
    zoom = (nh / h, nw / w)
    frame = np.clip(ndimage.zoom(frame, zoom + (1,), order=1, grid_mode=True, mode="nearest"), 0, 1)
    mask = ndimage.zoom(mask, zoom, order=0, grid_mode=True, mode="nearest")
    return frame.astype(np.float32), mask


def random_crop_clip(frames, masks, crop: int, rng: np.random.Generator):
    """Crop every frame/mask of a clip at one shared random square window."""
    pairs = [_upscale_to(f, m, crop) for f, m in zip(frames, masks)]
    h, w = pairs[0][1].shape
    y0 = int(rng.integers(0, h - crop + 1))
    x0 = int(rng.integers(0, w - crop + 1))
    sl = (slice(y0, y0 + crop), slice(x0, x0 + crop))
    return [f[sl] for f, _ in pairs], [m[sl] for _, m in pairs]


def random_crop_pair(frame, mask, crop: int, rng: np.random.Generator):
    frames, masks = random_crop_clip([frame], [mask], crop, rng)
    return frames[0], masks[0]
