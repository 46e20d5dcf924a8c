"""Procedural image/mask pairs for smoke tests, demos and toy training."""

from __future__ import annotations

import numpy as np
from scipy import ndimage

from .augment import AffineJitter, synth_video
from .data_io import VideoSample


def smooth_noise(rng, shape, sigma):
    return ndimage.gaussian_filter(rng.random(shape), sigma, mode="wrap")


def toy_scene(rng: np.random.Generator, size=(96, 96), n_objects: int = 1):
    """Textured background with ``n_objects`` colored ellipses.

    Returns ``(frame (H, W, 3) float32 in [0, 1], mask (H, W) int32)``.
    """
    h, w = size
    bg = np.stack([smooth_noise(rng, (h, w), 3) for _ in range(3)], -1)
    bg = 0.25 + 0.5 * (bg - bg.min()) / (np.ptp(bg) + 1e-9)
    frame = bg.copy()
    mask = np.zeros((h, w), dtype=np.int32)
    yy, xx = np.mgrid[:h, :w]
    for k in range(1, n_objects + 1):
        cy, cx = rng.uniform(0.3, 0.7) * h, rng.uniform(0.3, 0.7) * w
        ry, rx = rng.uniform(0.12, 0.22) * h, rng.uniform(0.12, 0.22) * w
        inside = ((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2 <= 1
        color = rng.uniform(0.0, 1.0, size=3)
        stripes = 0.15 * np.sin(xx / 2.0 + k)[..., None]
        frame[inside] = np.clip(color + stripes[inside], 0, 1)
        mask[inside] = k
    return frame.astype(np.float32), mask


def toy_video(seed: int = 0, n_frames: int = 8, size=(96, 96), n_objects: int = 1,
              jitter: AffineJitter = AffineJitter(5.0, 3.0, 0.05, 0.05)) -> VideoSample:
    rng = np.random.default_rng(seed)
    frame, mask = toy_scene(rng, size, n_objects)
    video = synth_video(frame, mask, n_frames, jitter, rng, video_id=f"toy{seed}")
    video.frames = [f.astype(np.float32) for f in video.frames]
    return video
