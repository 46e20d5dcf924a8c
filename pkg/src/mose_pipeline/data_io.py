"""Dataset discovery plus frame and mask I/O for DAVIS-style trees.

Layout::

    <root>/JPEGImages/[<subdir>/]<video>/<frame>.jpg|png
    <root>/Annotations/[<subdir>/]<video>/<frame>.png

Masks are 8-bit indexed-palette PNGs where the pixel index is the object id
(0 is background). Frames are RGB and normalized to [0, 1] on load.
MOSE and YouTubeVOS use the same layout with sparse annotations; DAVIS adds
a resolution level (``subdir="480p"``).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Sequence

import numpy as np
from PIL import Image, UnidentifiedImageError

IMAGE_SUFFIXES = (".jpg", ".jpeg", ".png")


class DatasetError(ValueError):
    pass


def default_palette() -> List[int]:
    """The DAVIS color table (bit-interleaved label code), flattened to 768 ints."""
    palette = []
    for label in range(256):
        r = g = b = 0
        c = label
        for shift in range(7, -1, -1):
            r |= ((c >> 0) & 1) << shift
            g |= ((c >> 1) & 1) << shift
            b |= ((c >> 2) & 1) << shift
            c >>= 3
        palette.extend((r, g, b))
    return palette


_PALETTE = default_palette()


@dataclass
class VideoSample:
    id: str
    frames: List[np.ndarray]
    masks: List[Optional[np.ndarray]]
    object_ids: List[int] = field(default_factory=list)
    frame_names: List[str] = field(default_factory=list)

    def __post_init__(self):
        if not self.frames:
            raise DatasetError(f"video {self.id!r} has no frames")
        if len(self.masks) != len(self.frames):
            raise DatasetError(
                f"video {self.id!r}: {len(self.masks)} mask slots for {len(self.frames)} frames"
            )
        shape = self.frames[0].shape[:2]
        for f in self.frames:
            if f.shape[:2] != shape:
                raise DatasetError(f"video {self.id!r}: frames differ in size")
        if not self.object_ids:
            ids = set()
            for m in self.masks:
                if m is not None:
                    ids.update(int(v) for v in np.unique(m) if v != 0)
            self.object_ids = sorted(ids)
        allowed = set(self.object_ids) | {0}
        for m in self.masks:
            if m is None:
                continue
            if m.shape != shape:
                raise DatasetError(f"video {self.id!r}: mask size {m.shape} != frame size {shape}")
            extra = set(int(v) for v in np.unique(m)) - allowed
            if extra:
                raise DatasetError(f"video {self.id!r}: labels {sorted(extra)} not in object ids")
        if not self.frame_names:
            self.frame_names = [f"{i:05d}" for i in range(len(self.frames))]

    @property
    def size(self):
        return self.frames[0].shape[:2]

    def __len__(self):
        return len(self.frames)


@dataclass(frozen=True)
class SequenceInfo:
    video: str
    n_frames: int
    n_objects: int
    object_ids: tuple
    flagged: bool = False


@dataclass
class DatasetIndex:
    root: Path
    sequences: List[SequenceInfo]
    subdir: Optional[str] = None

    @property
    def valid(self) -> List[SequenceInfo]:
        return [s for s in self.sequences if not s.flagged]

    def __len__(self):
        return len(self.sequences)


def _image_dir(root: Path, subdir: Optional[str]) -> Path:
    return root / "JPEGImages" / subdir if subdir else root / "JPEGImages"


def _annotation_dir(root: Path, subdir: Optional[str]) -> Path:
    return root / "Annotations" / subdir if subdir else root / "Annotations"


def list_frames(video_dir: Path) -> List[Path]:
    return sorted(p for p in video_dir.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)


def scan_dataset(root, subdir: Optional[str] = None) -> DatasetIndex:
    """Index every video under ``root``.

    Videos without a first-frame annotation are kept with ``n_objects=0``
    and ``flagged=True`` so callers can report them instead of silently
    dropping them.
    """
    root = Path(root)
    if not root.is_dir():
        raise FileNotFoundError(f"dataset root not found: {root}")
    img_root = _image_dir(root, subdir)
    ann_root = _annotation_dir(root, subdir)
    videos = sorted(p for p in img_root.iterdir() if p.is_dir()) if img_root.is_dir() else []

    sequences = []
    for vdir in videos:
        frames = list_frames(vdir)
        if not frames:
            continue
        first = ann_root / vdir.name / (frames[0].stem + ".png")
        ids: tuple = ()
        if first.exists():
            labels = np.unique(load_mask(first))
            ids = tuple(int(v) for v in labels if v != 0)
        sequences.append(
            SequenceInfo(vdir.name, len(frames), len(ids), ids, flagged=not ids)
        )
    if not sequences:
        raise DatasetError(f"no sequences found under {root}")
    return DatasetIndex(root, sequences, subdir)


def load_frame(path) -> np.ndarray:
    with Image.open(path) as img:
        arr = np.asarray(img.convert("RGB"), dtype=np.float32)
    return arr / 255.0


def save_frame(frame: np.ndarray, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    arr = np.clip(np.round(np.asarray(frame) * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(arr, mode="RGB").save(path)


def load_mask(path) -> np.ndarray:
    """Read an indexed PNG; the palette index is the label."""
    try:
        with Image.open(path) as img:
            if img.mode != "P":
                raise DatasetError(f"{path}: indexed palette required (got mode {img.mode})")
            return np.asarray(img, dtype=np.uint8).astype(np.int32)
    except (UnidentifiedImageError, OSError) as exc:
        raise DatasetError(f"{path}: cannot read mask ({exc})") from exc


def save_mask(mask: np.ndarray, path) -> None:
    mask = np.asarray(mask)
    if mask.ndim != 2:
        raise DatasetError(f"mask must be 2-D, got shape {mask.shape}")
    if mask.size and mask.min() < 0:
        raise DatasetError("negative label in mask")
    if mask.size and mask.max() > 255:
        raise DatasetError(f"label exceeds 8-bit index range ({int(mask.max())})")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    img = Image.fromarray(mask.astype(np.uint8), mode="P")
    img.putpalette(_PALETTE)
    img.save(path)


def mask_to_binary_stack(mask: np.ndarray, object_ids: Sequence[int]) -> np.ndarray:
    """One-hot split of a label map: channel k is ``mask == object_ids[k]``."""
    mask = np.asarray(mask)
    known = set(int(i) for i in object_ids) | {0}
    unknown = sorted(set(int(v) for v in np.unique(mask)) - known)
    if unknown:
        raise DatasetError(f"unknown label {unknown[0]} in mask (object ids {sorted(known - {0})})")
    ids = np.asarray(list(object_ids), dtype=mask.dtype).reshape(-1, 1, 1)
    return (mask[None] == ids).astype(np.float32)


def load_video(root, video: str, subdir: Optional[str] = None) -> VideoSample:
    """Load all frames of ``video``; frames without an annotation file get ``None``."""
    root = Path(root)
    frames_p = list_frames(_image_dir(root, subdir) / video)
    if not frames_p:
        raise DatasetError(f"video {video!r} has no frames")
    ann = _annotation_dir(root, subdir) / video
    frames, masks = [], []
    for p in frames_p:
        frames.append(load_frame(p))
        mp = ann / (p.stem + ".png")
        masks.append(load_mask(mp) if mp.exists() else None)
    return VideoSample(video, frames, masks, frame_names=[p.stem for p in frames_p])


def write_video(root, video: VideoSample, subdir: Optional[str] = None) -> None:
    """Write ``video`` into a DAVIS-style tree (frames as PNG for lossless round trips)."""
    root = Path(root)
    for name, frame, mask in zip(video.frame_names, video.frames, video.masks):
        save_frame(frame, _image_dir(root, subdir) / video.id / f"{name}.png")
        if mask is not None:
            save_mask(mask, _annotation_dir(root, subdir) / video.id / f"{name}.png")


def load_result_masks(result_dir, video: str) -> dict:
    """Map frame name -> MaskMap for ``<result_dir>/<video>/*.png``."""
    vdir = Path(result_dir) / video
    if not vdir.is_dir():
        return {}
    return {p.stem: load_mask(p) for p in sorted(vdir.glob("*.png"))}
