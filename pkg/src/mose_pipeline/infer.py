"""Frame-by-frame propagation with flip / multi-scale test-time augmentation.

Probability stacks are ``(K + 1, H, W)`` arrays: channel 0 is background and
channel ``j`` is ``object_ids[j - 1]``.
"""

from __future__ import annotations

import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np
import torch
import torch.nn.functional as F

from .data_io import VideoSample, load_video, mask_to_binary_stack, save_mask, scan_dataset
from .memory import MemoryConfig, ObjectMemory, PixelMemory, read
from .network import VOSModel, downsample_probs

FULL_SCALES = (600, 720, 800)


@dataclass
class InferConfig:
    scales: Tuple[Optional[int], ...] = FULL_SCALES
    flip: bool = True
    memory: MemoryConfig = field(default_factory=lambda: MemoryConfig(t_max=18, interval=1))
    output_root: Optional[Path] = None

    def __post_init__(self):
        self.scales = tuple(self.scales)
        if not self.scales:
            raise ValueError("at least one scale is required")
        if any(s is not None and s <= 0 for s in self.scales):
            raise ValueError("scales must be positive")


# --------------------------------------------------------------------------
# aggregation

def aggregate_probs(probs: torch.Tensor) -> torch.Tensor:
    """``(K, H, W)`` independent object probabilities -> ``(K+1, H, W)`` distribution.

    Background is ``prod(1 - p_k)``; all channels are divided by
    ``background + sum(p_k)``.
    """
    bg = torch.prod(1 - probs, 0, keepdim=True)
    stacked = torch.cat([bg, probs], 0)
    return stacked / stacked.sum(0, keepdim=True)


def soft_aggregate(per_object_probs):
    if isinstance(per_object_probs, torch.Tensor):
        return aggregate_probs(per_object_probs)
    p = np.asarray(per_object_probs, dtype=np.float64)
    if p.size and (p.min() < 0 or p.max() > 1):
        raise ValueError("probabilities must lie in [0, 1]")
    return aggregate_probs(torch.from_numpy(p)).numpy()


def probs_to_mask(stack: np.ndarray, object_ids: Sequence[int]) -> np.ndarray:
    """Per-pixel argmax; ties go to background, then to the lowest channel."""
    labels = np.concatenate([[0], np.asarray(object_ids, dtype=np.int32)])
    return labels[np.argmax(stack, axis=0)].astype(np.int32)


# --------------------------------------------------------------------------
# single-branch propagation

def _to_tensor(frame: np.ndarray, dtype) -> torch.Tensor:
    return torch.from_numpy(np.ascontiguousarray(frame.transpose(2, 0, 1))).to(dtype)


class InferenceSession:
    """Memories and recurrent state for one video under one model.

    Used with gradients enabled by training, under ``no_grad`` at inference.
    """

    def __init__(self, model: VOSModel, memory_config: MemoryConfig):
        self.model = model
        # key/value sizes always follow the model
        self.pixel = PixelMemory(
            replace(memory_config, key_dim=model.cfg.key_dim, value_dim=model.cfg.value_dim)
        )
        self.objects: Optional[ObjectMemory] = None
        self.sensory = None
        self.prev_probs = None
        self.frame_index = -1

    @property
    def n_objects(self):
        return 0 if self.prev_probs is None else self.prev_probs.shape[0]

    def _memorize(self, frame, qf, probs, index):
        value = self.model.encode_mask(frame, probs, qf)
        h, w = value.shape[-2:]
        if self.sensory is None:
            self.sensory = self.model.sensory.init_state(probs.shape[0], h, w, value)
        self.sensory = self.model.sensory(self.sensory, value)
        self.objects.update(value, downsample_probs(probs, qf.pad))
        self.pixel.admit(index, qf.key, value)
        self.prev_probs = probs

    def start(self, frame: torch.Tensor, probs: torch.Tensor) -> None:
        """Seed the memories with frame 0 and its (K, H, W) object masks."""
        self.frame_index = 0
        qf = self.model.encode_query(frame)
        self.objects = ObjectMemory(probs.shape[0], self.model.cfg.value_dim, like=qf.key)
        self._memorize(frame, qf, probs, 0)

    def add_objects(self, n_new: int) -> None:
        self.pixel.add_objects(n_new)
        self.objects.add_objects(n_new)
        self.sensory = torch.cat([self.sensory, self.sensory.new_zeros((n_new,) + self.sensory.shape[1:])])
        self.prev_probs = torch.cat([self.prev_probs, self.prev_probs.new_zeros((n_new,) + self.prev_probs.shape[1:])])

    def step(self, frame: torch.Tensor, override: Optional[Callable] = None):
        """Segment the next frame; returns (object logits (K,H,W), aggregated (K+1,H,W)).

        ``override(probs) -> probs`` lets callers inject annotations before
        the frame is memorized.
        """
        self.frame_index += 1
        t = self.frame_index
        qf = self.model.encode_query(frame)
        readout = read(self.pixel, qf.key, self.sensory, self.model.fusion, qf.f16, query_index=t)
        fg = downsample_probs(self.prev_probs, qf.pad)
        readout, _ = self.model.transform(readout, self.objects.tokens, fg)
        logits = self.model.decode(readout, qf)
        agg = aggregate_probs(torch.sigmoid(logits))
        probs = agg[1:]
        if override is not None:
            probs = override(probs)
            agg = torch.cat([(1 - probs.sum(0, keepdim=True)).clamp(min=0), probs])
        self._memorize(frame, qf, probs, t)
        return logits, agg


@torch.no_grad()
def propagate_probs(video: VideoSample, model: VOSModel, memory_config: MemoryConfig) -> List[np.ndarray]:
    """Soft outputs for every frame, each ``(len(object_ids)+1, H, W)``."""
    if video.masks[0] is None:
        raise ValueError(f"video {video.id!r}: first-frame mask is required")
    dtype = next(model.parameters()).dtype
    ids = list(video.object_ids)
    first_ids = [i for i in ids if np.any(video.masks[0] == i)]
    if not first_ids:
        raise ValueError(f"video {video.id!r}: first-frame mask has no objects")
    active = list(first_ids)
    session = InferenceSession(model, memory_config)

    def full_stack(agg):
        out = np.zeros((len(ids) + 1,) + agg.shape[1:], dtype=np.float32)
        out[0] = agg[0]
        for j, oid in enumerate(active):
            out[ids.index(oid) + 1] = agg[j + 1]
        return out

    gt0 = torch.from_numpy(mask_to_binary_stack(video.masks[0], active)).to(dtype)
    session.start(_to_tensor(video.frames[0], dtype), gt0)
    results = [full_stack(aggregate_probs(gt0).numpy())]
    for t in range(1, len(video)):
        frame = _to_tensor(video.frames[t], dtype)
        gt = video.masks[t]
        new = [i for i in ids if i not in active and gt is not None and np.any(gt == i)]
        override = None
        if new:
            session.add_objects(len(new))
            active.extend(new)
            new_stack = torch.from_numpy(mask_to_binary_stack(np.where(np.isin(gt, new), gt, 0), active)).to(dtype)

            def override(p, new_stack=new_stack):
                keep = 1 - new_stack.sum(0, keepdim=True)
                return p * keep + new_stack

        _, agg = session.step(frame, override)
        results.append(full_stack(agg.numpy()))
    return results


def propagate(video: VideoSample, config: InferConfig, weights: VOSModel) -> List[np.ndarray]:
    """Single-branch propagation to label maps (no TTA)."""
    probs = propagate_probs(video, weights, config.memory)
    out = [probs_to_mask(p, video.object_ids) for p in probs]
    out[0] = np.asarray(video.masks[0], dtype=np.int32)
    return out


# --------------------------------------------------------------------------
# test-time augmentation

def _resize(arr: torch.Tensor, size, mode):
    if tuple(arr.shape[-2:]) == tuple(size):
        return arr
    kw = {"align_corners": False} if mode == "bilinear" else {}
    return F.interpolate(arr[None], size=tuple(size), mode=mode, **kw)[0]


def rescaled_size(h: int, w: int, max_shorter_side: Optional[int]) -> Tuple[int, int]:
    """Shorter side capped at the target (never upscaled); longer side keeps
    the aspect ratio, rounded to the nearest even pixel count."""
    short = min(h, w)
    if max_shorter_side is None or max_shorter_side >= short:
        return h, w
    s = max_shorter_side / short
    if h <= w:
        return max_shorter_side, 2 * int(round(w * s / 2))
    return 2 * int(round(h * s / 2)), max_shorter_side


def rescale_video(video: VideoSample, max_shorter_side: Optional[int]) -> VideoSample:
    if max_shorter_side is not None and max_shorter_side <= 0:
        raise ValueError("target size must be positive")
    h, w = video.size
    size = rescaled_size(h, w, max_shorter_side)
    if size == (h, w):
        return video
    frames = [
        np.clip(_resize(torch.from_numpy(f.transpose(2, 0, 1).copy()), size, "bilinear").numpy().transpose(1, 2, 0), 0, 1)
        for f in video.frames
    ]
    masks = [
        None if m is None
        else _resize(torch.from_numpy(np.asarray(m, dtype=np.float32))[None], size, "nearest-exact")[0].numpy().astype(np.int32)
        for m in video.masks
    ]
    return VideoSample(video.id, frames, masks, list(video.object_ids), list(video.frame_names))


def mirror_video(video: VideoSample) -> VideoSample:
    frames = [np.flip(f, 1).copy() for f in video.frames]
    masks = [None if m is None else np.flip(m, 1).copy() for m in video.masks]
    return VideoSample(video.id, frames, masks, list(video.object_ids), list(video.frame_names))


def mirror_stack(stack: np.ndarray) -> np.ndarray:
    return np.flip(stack, -1).copy()


Runner = Callable[[VideoSample], List[np.ndarray]]


def run_flip_branch(video: VideoSample, config: InferConfig, weights: Optional[VOSModel] = None,
                    runner: Optional[Runner] = None) -> List[np.ndarray]:
    """Propagate on the mirrored video and mirror the probabilities back."""
    runner = runner or (lambda v: propagate_probs(v, weights, config.memory))
    return [mirror_stack(p) for p in runner(mirror_video(video))]


def fuse_tta(branches: Sequence[Sequence[np.ndarray]], original_size, renormalize: bool = True) -> List[np.ndarray]:
    """Average branch probabilities per frame at the original resolution."""
    if not branches:
        raise ValueError("fuse_tta needs at least one branch")
    n = len(branches[0])
    if any(len(b) != n for b in branches):
        raise ValueError(f"branch frame counts differ: {[len(b) for b in branches]}")
    fused = []
    for t in range(n):
        acc = None
        for b in branches:
            p = _resize(torch.from_numpy(np.asarray(b[t], dtype=np.float64)), original_size, "bilinear").numpy()
            acc = p if acc is None else acc + p
        mean = acc / len(branches)
        if renormalize:
            mean = mean / mean.sum(0, keepdims=True)
        fused.append(mean.astype(np.float32))
    return fused


def branch_plan(config: InferConfig) -> List[Tuple[Optional[int], bool]]:
    return [(s, f) for s in config.scales for f in ((False, True) if config.flip else (False,))]


def run_tta(video: VideoSample, config: InferConfig, model: VOSModel, runner: Optional[Runner] = None,
            jobs: int = 1) -> List[np.ndarray]:
    """All flip x scale branches, each with its own memory, fused at full size."""
    runner = runner or (lambda v: propagate_probs(v, model, config.memory))

    def run(plan):
        scale, flip = plan
        scaled = rescale_video(video, scale)
        return run_flip_branch(scaled, config, runner=runner) if flip else runner(scaled)

    plans = branch_plan(config)
    if jobs > 1:
        with ThreadPoolExecutor(jobs) as pool:
            branches = list(pool.map(run, plans))
    else:
        branches = [run(p) for p in plans]
    return fuse_tta(branches, video.size)


def segment_video(video: VideoSample, config: InferConfig, model: VOSModel, jobs: int = 1):
    """TTA propagation -> (label maps, fused probability stacks)."""
    probs = run_tta(video, config, model, jobs=jobs)
    masks = [probs_to_mask(p, video.object_ids) for p in probs]
    masks[0] = np.asarray(video.masks[0], dtype=np.int32)
    return masks, probs


def infer_dataset(data_root, model: VOSModel, config: InferConfig, out_root, dump_probs: bool = False,
                  subdir: Optional[str] = None, jobs: int = 1) -> List[str]:
    """Segment every valid video under ``data_root`` into ``<out>/<video>/<frame>.png``.

    With ``dump_probs`` each frame's fused stack is also written as
    ``<frame>.npy`` (float32, ``(K+1, H, W)``, channel 0 background) next to
    an ``objects.json`` listing the object id of each channel.
    """
    out_root = Path(out_root)
    index = scan_dataset(data_root, subdir)
    done = []
    for seq in index.valid:
        video = load_video(data_root, seq.video, subdir)
        masks, probs = segment_video(video, config, model, jobs=jobs)
        vdir = out_root / video.id
        for name, m, p in zip(video.frame_names, masks, probs):
            save_mask(m, vdir / f"{name}.png")
            if dump_probs:
                np.save(vdir / f"{name}.npy", p.astype(np.float32))
        if dump_probs:
            (vdir / "objects.json").write_text(json.dumps({"channels": [0] + list(video.object_ids)}))
        done.append(video.id)
    return done
