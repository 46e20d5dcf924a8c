"""Two-stage training: synthetic clips from static pairs, then real video clips."""

from __future__ import annotations

import bisect
import csv
import logging
import os
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import List, NamedTuple, Optional, Sequence, Tuple

import numpy as np
import torch

from .augment import (
    AffineJitter,
    BlurConfig,
    apply_motion_blur,
    random_crop_clip,
    sample_blur,
    synth_video,
)
from .data_io import VideoSample, load_video, scan_dataset
from .infer import InferenceSession, aggregate_probs
from .memory import MemoryConfig
from .network import NetConfig, VOSModel

log = logging.getLogger(__name__)

STAGES = ("pretrain", "main")


@dataclass
class TrainConfig:
    stage: str = "main"
    lr: float = 1e-4
    batch: int = 16
    weight_decay: float = 1e-3
    iters: int = 175_000
    crop: int = 480
    decay_points: Tuple[int, ...] = (140_000, 160_000)
    decay_factor: float = 0.1
    seq_len: int = 8
    max_skip: int = 5
    hflip: float = 0.5
    seed: int = 0
    checkpoint_every: int = 5000
    blur: BlurConfig = field(default_factory=BlurConfig)
    jitter: AffineJitter = field(default_factory=AffineJitter)

    def __post_init__(self):
        if self.stage not in STAGES:
            raise ValueError(f"stage must be one of {STAGES}")
        self.decay_points = tuple(int(p) for p in self.decay_points)
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if any(b <= a for a, b in zip(self.decay_points, self.decay_points[1:])):
            raise ValueError("decay_points must be strictly increasing")
        if self.decay_points and self.decay_points[-1] >= self.iters:
            raise ValueError("decay_points must be < iters")
        if not 0 <= self.hflip <= 1:
            raise ValueError("hflip must be a probability")
        if self.seq_len < 2:
            raise ValueError("seq_len must be >= 2 (frame 0 is the reference)")


def full_config(stage: str, **overrides) -> TrainConfig:
    if stage == "pretrain":
        base = TrainConfig(stage="pretrain", iters=80_000, crop=384, decay_points=(), seq_len=3)
    else:
        base = TrainConfig(stage="main", iters=175_000, crop=480, decay_points=(140_000, 160_000), seq_len=8)
    return replace(base, **overrides)


def toy_config(stage: str, **overrides) -> TrainConfig:
    """Desk-scale preset: small crops and batches, a few hundred steps."""
    if stage == "pretrain":
        base = TrainConfig(stage="pretrain", iters=200, batch=4, crop=64, decay_points=(),
                           seq_len=3, checkpoint_every=100, lr=1e-3)
    else:
        base = TrainConfig(stage="main", iters=300, batch=4, crop=64, decay_points=(240, 280),
                           seq_len=4, max_skip=2, checkpoint_every=100, lr=1e-3)
    return replace(base, **overrides)


PRESETS = {"full": full_config, "toy": toy_config}


def lr_at(config: TrainConfig, iteration: int) -> float:
    if not 0 <= iteration < config.iters:
        raise ValueError(f"iteration {iteration} outside [0, {config.iters})")
    if config.stage == "pretrain":
        return config.lr
    n = bisect.bisect_right(config.decay_points, iteration)
    return config.lr * config.decay_factor ** n


# --------------------------------------------------------------------------
# data

@dataclass
class TrainingSources:
    static_pairs: List[Tuple[np.ndarray, np.ndarray]] = field(default_factory=list)
    videos: List[VideoSample] = field(default_factory=list)

    @classmethod
    def from_dirs(cls, static_roots: Sequence = (), video_roots: Sequence = ()):
        """Static pairs: every annotated frame under ``static_roots``;
        videos: every valid sequence under ``video_roots``."""
        src = cls()
        for root in static_roots:
            for seq in scan_dataset(root).valid:
                v = load_video(root, seq.video)
                src.static_pairs += [(f, m) for f, m in zip(v.frames, v.masks) if m is not None]
        for root in video_roots:
            src.videos += [load_video(root, s.video) for s in scan_dataset(root).valid]
        return src


class Batch(NamedTuple):
    frames: np.ndarray  # B, T, 3, crop, crop (float32)
    masks: np.ndarray  # B, T, crop, crop (int32)


def _sample_frames(video: VideoSample, n: int, max_skip: int, rng) -> List[int]:
    annotated = [i for i, m in enumerate(video.masks) if m is not None]
    if len(annotated) <= n:
        return annotated + [annotated[-1]] * (n - len(annotated))
    # random forward stride of 1..max_skip annotated frames, then fit the window
    gaps = rng.integers(1, max_skip + 1, size=n - 1)
    span = int(gaps.sum())
    if span > len(annotated) - 1:
        gaps = np.ones(n - 1, dtype=int)
        span = n - 1
    start = int(rng.integers(0, len(annotated) - span))
    pos = start + np.concatenate([[0], np.cumsum(gaps)])
    return [annotated[p] for p in pos]


def _make_clip(stage, sources, rng, config: TrainConfig):
    if stage == "pretrain":
        image, mask = sources.static_pairs[int(rng.integers(len(sources.static_pairs)))]
        clip = synth_video(image, mask, config.seq_len, config.jitter, rng)
        frames, masks = clip.frames, clip.masks
        kernel = sample_blur(rng, config.blur)
        kernels = [kernel] * len(frames)
    else:
        video = sources.videos[int(rng.integers(len(sources.videos)))]
        idx = _sample_frames(video, config.seq_len, config.max_skip, rng)
        frames = [video.frames[i] for i in idx]
        masks = [video.masks[i] for i in idx]
        kernels = [sample_blur(rng, config.blur) for _ in frames]

    for _ in range(10):
        cf, cm = random_crop_clip(frames, masks, config.crop, rng)
        if np.any(cm[0] > 0):
            break
    cf = [apply_motion_blur(f, k) if k is not None else f for f, k in zip(cf, kernels)]
    if rng.random() < config.hflip:
        # the whole clip is mirrored so motion stays consistent
        cf = [f[:, ::-1] for f in cf]
        cm = [m[:, ::-1] for m in cm]
    return np.stack([f.transpose(2, 0, 1) for f in cf]).astype(np.float32), np.stack(cm).astype(np.int32)


def make_batch(stage: str, sources: TrainingSources, rng: np.random.Generator, config: TrainConfig) -> Batch:
    pool = sources.static_pairs if stage == "pretrain" else sources.videos
    if not pool:
        raise ValueError(f"empty source pool for stage {stage!r}")
    clips = [_make_clip(stage, sources, rng, config) for _ in range(config.batch)]
    return Batch(np.stack([c[0] for c in clips]), np.stack([c[1] for c in clips]))


# --------------------------------------------------------------------------
# loss

def loss_terms(agg: torch.Tensor, target: torch.Tensor, eps: float = 1.0):
    """Cross-entropy and soft dice for one frame.

    ``agg`` is the (K+1, H, W) aggregated distribution, ``target`` the
    matching one-hot stack (channel 0 background).
    """
    ce = -(target * torch.log(agg.clamp_min(1e-12))).sum(0).mean()
    p, g = agg[1:], target[1:]
    inter = (p * g).sum((1, 2))
    dice = 1 - (2 * inter + eps) / (p.sum((1, 2)) + g.sum((1, 2)) + eps)
    return ce, dice.mean()


def one_hot(mask: np.ndarray, object_ids: Sequence[int], like: torch.Tensor) -> torch.Tensor:
    labels = np.concatenate([[0], np.asarray(object_ids)]).reshape(-1, 1, 1)
    hot = (np.asarray(mask)[None] == labels).astype(np.float64)
    # pixels of objects outside the tracked set count as background
    hot[0] = 1 - hot[1:].sum(0)
    return torch.from_numpy(hot).to(like.dtype)


def loss(logits_seq: Sequence[torch.Tensor], gt_masks: Sequence[np.ndarray], object_ids: Sequence[int]) -> torch.Tensor:
    """Mean over frames of 0.5 * CE + 0.5 * dice on aggregated probabilities.

    ``logits_seq`` holds per-object logits for frames 1..T-1 only; frame 0
    is the given reference and never scored.
    """
    total = 0.0
    for logits, gt in zip(logits_seq, gt_masks):
        agg = aggregate_probs(torch.sigmoid(logits))
        ce, dice = loss_terms(agg, one_hot(gt, object_ids, logits))
        total = total + 0.5 * ce + 0.5 * dice
    return total / len(logits_seq)


def clip_loss(model: VOSModel, frames: np.ndarray, masks: np.ndarray, mem_config: MemoryConfig):
    """Unroll the model over one clip; ``None`` when frame 0 has no object."""
    ids = [int(i) for i in np.unique(masks[0]) if i != 0]
    if not ids:
        return None
    dtype = next(model.parameters()).dtype
    x = torch.from_numpy(frames).to(dtype)
    session = InferenceSession(model, mem_config)
    session.start(x[0], one_hot(masks[0], ids, x)[1:])
    logits = [session.step(x[t])[0] for t in range(1, len(x))]
    return loss(logits, masks[1:], ids)


# --------------------------------------------------------------------------
# driver

class TrainingDiverged(RuntimeError):
    pass


@dataclass
class TrainResult:
    checkpoint: Path
    losses: List[Tuple[int, float, float]]  # iteration, lr, loss


def _atomic_save(obj, path: Path) -> None:
    tmp = path.with_suffix(path.suffix + ".tmp")
    torch.save(obj, tmp)
    os.replace(tmp, path)


def write_loss_csv(losses, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["iteration", "lr", "loss"])
        for it, lr, value in losses:
            w.writerow([it, repr(lr), repr(value)])


def batch_rng(config: TrainConfig, iteration: int) -> np.random.Generator:
    # one stream per (seed, stage, iteration) so resuming needs no RNG state
    return np.random.default_rng([config.seed, STAGES.index(config.stage), iteration])


def train_stage(config: TrainConfig, model: VOSModel, data: TrainingSources, out_dir,
                resume: Optional[os.PathLike] = None, stop_at: Optional[int] = None) -> TrainResult:
    """AdamW with the step schedule of ``lr_at`` for ``config.iters`` steps.

    Writes ``<out>/<stage>.pt`` every ``checkpoint_every`` steps and at the
    end, plus ``<out>/<stage>_loss.csv``. ``stop_at`` ends the run early
    (after writing a checkpoint), which is how interrupted runs are emulated.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    ckpt_path = out_dir / f"{config.stage}.pt"
    mem_config = model.cfg.memory_config(t_max=config.seq_len, interval=1)
    optimizer = torch.optim.AdamW(model.parameters(), lr=config.lr, weight_decay=config.weight_decay)
    losses: List[Tuple[int, float, float]] = []
    start = 0
    if resume is not None:
        state = torch.load(resume, map_location="cpu", weights_only=False)
        model.load_state_dict(state["model"])
        optimizer.load_state_dict(state["optimizer"])
        losses = list(state["losses"])
        start = state["iteration"] + 1

    def checkpoint(it):
        _atomic_save({
            "model": model.state_dict(), "optimizer": optimizer.state_dict(),
            "iteration": it, "losses": losses, "config": asdict(config),
            "net_config": model.cfg.to_dict(),
        }, ckpt_path)
        write_loss_csv(losses, out_dir / f"{config.stage}_loss.csv")

    end = config.iters if stop_at is None else min(stop_at, config.iters)
    model.train()
    for it in range(start, end):
        lr = lr_at(config, it)
        for group in optimizer.param_groups:
            group["lr"] = lr
        batch = make_batch(config.stage, data, batch_rng(config, it), config)
        terms = [clip_loss(model, f, m, mem_config) for f, m in zip(batch.frames, batch.masks)]
        terms = [t for t in terms if t is not None]
        if not terms:
            continue
        value = torch.stack(terms).mean()
        if not torch.isfinite(value):
            dump = out_dir / f"{config.stage}_diverged.pt"
            torch.save({"iteration": it, "batch": batch._asdict(), "model": model.state_dict()}, dump)
            raise TrainingDiverged(f"non-finite loss at iteration {it}; state dumped to {dump}")
        optimizer.zero_grad()
        value.backward()
        optimizer.step()
        losses.append((it, lr, float(value.detach())))
        if (it + 1) % config.checkpoint_every == 0 or it + 1 == end:
            checkpoint(it)
            log.info("%s iter %d lr %.2e loss %.4f", config.stage, it, lr, float(value.detach()))
    if start >= end:
        checkpoint(end - 1)
    model.eval()
    return TrainResult(ckpt_path, losses)


def load_checkpoint_model(path) -> VOSModel:
    state = torch.load(path, map_location="cpu", weights_only=False)
    model = VOSModel(NetConfig(**state["net_config"]))
    model.load_state_dict(state["model"])
    return model.eval()
