"""Pixel, object and sensory memories for the propagation model.

Shapes (stride-16 grid ``h x w``, ``K`` objects):

* key: ``(key_dim, h, w)`` -- shared by all objects of a frame
* value: ``(K, value_dim, h, w)``
* sensory hidden: ``(K, hidden_dim, h, w)``
* object tokens: ``(K, 2, value_dim)`` -- token 0 foreground, token 1 background
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import asdict, dataclass
from typing import List, Optional, Tuple

import numpy as np
import torch
from torch import nn


@dataclass
class MemoryConfig:
    t_max: int = 18
    interval: int = 1
    key_dim: int = 64
    value_dim: int = 128
    affinity: str = "neg_l2"

    def __post_init__(self):
        if self.t_max < 1:
            raise ValueError("t_max must be >= 1")
        if self.interval < 1:
            raise ValueError("interval must be >= 1")
        if self.affinity not in ("neg_l2", "dot"):
            raise ValueError(f"unknown affinity {self.affinity!r}")


class MemoryStateError(RuntimeError):
    pass


@dataclass
class MemoryEntry:
    frame_index: int
    key: torch.Tensor
    value: torch.Tensor


class PixelMemory:
    """Frame-indexed key/value store with capacity ``t_max``.

    Frame 0 is permanent; when full, the oldest other entry is evicted.
    """

    def __init__(self, config: MemoryConfig):
        self.config = config
        self.entries: List[MemoryEntry] = []
        self.last_index: Optional[int] = None
        # (query frame, frame indices read) for causality audits
        self.audit: List[Tuple[Optional[int], Tuple[int, ...]]] = []

    def __len__(self):
        return len(self.entries)

    @property
    def frame_indices(self) -> List[int]:
        return [e.frame_index for e in self.entries]

    @property
    def num_objects(self) -> int:
        return self.entries[0].value.shape[0] if self.entries else 0

    def should_admit(self, frame_index: int) -> bool:
        return frame_index == 0 or frame_index % self.config.interval == 0

    def admit(self, frame_index: int, key: torch.Tensor, value: torch.Tensor) -> "PixelMemory":
        if self.last_index is not None and frame_index <= self.last_index:
            raise MemoryStateError(
                f"frame indices must increase: got {frame_index} after {self.last_index}"
            )
        cfg = self.config
        if key.dim() != 3 or key.shape[0] != cfg.key_dim:
            raise ValueError(f"key shape {tuple(key.shape)} does not match key_dim={cfg.key_dim}")
        if value.dim() != 4 or value.shape[1] != cfg.value_dim or value.shape[2:] != key.shape[1:]:
            raise ValueError(
                f"value shape {tuple(value.shape)} does not match key {tuple(key.shape)}"
                f" / value_dim={cfg.value_dim}"
            )
        if self.entries:
            ref = self.entries[0]
            if key.shape != ref.key.shape or value.shape[0] != ref.value.shape[0]:
                raise ValueError("entry shape differs from stored entries")
        self.last_index = frame_index
        if not self.should_admit(frame_index):
            return self
        if len(self.entries) >= cfg.t_max:
            victim = next(
                (i for i, e in enumerate(self.entries) if e.frame_index != 0), None
            )
            if victim is None:  # t_max == 1 and only frame 0 stored
                return self
            del self.entries[victim]
        self.entries.append(MemoryEntry(frame_index, key, value))
        return self

    def add_objects(self, n_new: int) -> None:
        """Grow every stored value by ``n_new`` zero object slots."""
        for e in self.entries:
            pad = e.value.new_zeros((n_new,) + tuple(e.value.shape[1:]))
            e.value = torch.cat([e.value, pad], 0)

    # serialization ---------------------------------------------------------

    MAGIC = b"MOSEPXM1"

    def to_bytes(self) -> bytes:
        """Binary layout: magic, u32 header length, JSON header, then raw
        little-endian arrays (key, value per entry, in entry order)."""
        header = {
            "config": asdict(self.config),
            "last_index": self.last_index,
            "entries": [
                {
                    "frame_index": e.frame_index,
                    "key_shape": list(e.key.shape),
                    "value_shape": list(e.value.shape),
                    "dtype": str(e.key.dtype).replace("torch.", ""),
                }
                for e in self.entries
            ],
        }
        blob = json.dumps(header, sort_keys=True).encode()
        parts = [self.MAGIC, struct.pack("<I", len(blob)), blob]
        for e in self.entries:
            for t in (e.key, e.value):
                arr = t.detach().cpu().numpy()
                parts.append(arr.astype(arr.dtype.newbyteorder("<"), copy=False).tobytes())
        return b"".join(parts)

    @classmethod
    def from_bytes(cls, data: bytes) -> "PixelMemory":
        if data[:8] != cls.MAGIC:
            raise MemoryStateError("not a pixel memory checkpoint")
        (n,) = struct.unpack("<I", data[8:12])
        header = json.loads(data[12:12 + n])
        mem = cls(MemoryConfig(**header["config"]))
        mem.last_index = header["last_index"]
        pos = 12 + n
        for meta in header["entries"]:
            dt = np.dtype(meta["dtype"]).newbyteorder("<")
            tensors = []
            for shape in (meta["key_shape"], meta["value_shape"]):
                count = int(np.prod(shape))
                arr = np.frombuffer(data, dtype=dt, count=count, offset=pos).reshape(shape)
                pos += count * dt.itemsize
                tensors.append(torch.from_numpy(arr.astype(dt.newbyteorder("="))))
            mem.entries.append(MemoryEntry(meta["frame_index"], *tensors))
        return mem


def affinity(mem_keys: torch.Tensor, query: torch.Tensor, kind: str = "neg_l2") -> torch.Tensor:
    """Scaled similarity between memory keys ``(C, N)`` and queries ``(C, P)`` -> ``(N, P)``."""
    scale = 1.0 / math.sqrt(mem_keys.shape[0])
    if kind == "dot":
        return (mem_keys.t() @ query) * scale
    # -|k - q|^2 expanded; the |q|^2 term is constant per query but kept so
    # the logits are the true negative squared distances
    ab = mem_keys.t() @ query
    a2 = (mem_keys ** 2).sum(0)[:, None]
    b2 = (query ** 2).sum(0)[None, :]
    return -(a2 - 2 * ab + b2) * scale


def read_values(
    memory: PixelMemory, query_key: torch.Tensor, query_index: Optional[int] = None,
    return_weights: bool = False,
):
    """Attention readout of stored values for every query location.

    Returns ``(K, value_dim, h, w)`` (and the ``(N, P)`` weights when asked).
    """
    if not memory.entries:
        raise MemoryStateError("read before first admit")
    if query_index is not None and any(i >= query_index for i in memory.frame_indices):
        raise MemoryStateError(f"memory holds frames at or after query frame {query_index}")
    memory.audit.append((query_index, tuple(memory.frame_indices)))
    ck, h, w = query_key.shape
    keys = torch.stack([e.key for e in memory.entries], 1).reshape(ck, -1)  # C, T*h*w
    values = torch.stack([e.value for e in memory.entries], 2)  # K, Cv, T, h, w
    k_obj, cv = values.shape[:2]
    values = values.reshape(k_obj, cv, -1)
    weights = torch.softmax(affinity(keys, query_key.reshape(ck, -1), memory.config.affinity), 0)
    out = (values @ weights).reshape(k_obj, cv, h, w)
    return (out, weights) if return_weights else out


class SensoryFusion(nn.Module):
    """1x1 projection of [memory readout, sensory hidden, query features] to R_0."""

    def __init__(self, value_dim, hidden_dim, feat_dim, out_dim):
        super().__init__()
        self.proj = nn.Conv2d(value_dim + hidden_dim + feat_dim, out_dim, 1)

    def forward(self, mem_readout, sensory, query_feat):
        k = mem_readout.shape[0]
        feat = query_feat.unsqueeze(0).expand(k, -1, -1, -1)
        return self.proj(torch.cat([mem_readout, sensory, feat], 1))


def read(memory, query_key, sensory, fusion: SensoryFusion, query_feat, query_index=None):
    """Pixel readout R_0 of shape ``(K, out_dim, h, w)``."""
    return fusion(read_values(memory, query_key, query_index), sensory, query_feat)


class SensoryUpdater(nn.Module):
    """Convolutional GRU carrying a per-object hidden state between frames."""

    def __init__(self, in_dim, hidden_dim):
        super().__init__()
        self.hidden_dim = hidden_dim
        self.gates = nn.Conv2d(in_dim + hidden_dim, 2 * hidden_dim, 3, padding=1)
        self.candidate = nn.Conv2d(in_dim + hidden_dim, hidden_dim, 3, padding=1)

    def init_state(self, n_objects, h, w, like: torch.Tensor):
        return like.new_zeros((n_objects, self.hidden_dim, h, w))

    def forward(self, hidden, features, update_gate=None):
        if hidden.shape[0] != features.shape[0] or hidden.shape[2:] != features.shape[2:]:
            raise ValueError(
                f"sensory state {tuple(hidden.shape)} does not match features {tuple(features.shape)}"
            )
        x = torch.cat([features, hidden], 1)
        reset, update = torch.sigmoid(self.gates(x)).chunk(2, 1)
        if update_gate is not None:
            update = torch.as_tensor(update_gate, dtype=hidden.dtype).expand_as(hidden)
        cand = torch.tanh(self.candidate(torch.cat([features, reset * hidden], 1)))
        return (1 - update) * hidden + update * cand


def update_sensory(updater: SensoryUpdater, state, features, update_gate=None):
    return updater(state, features, update_gate)


class ObjectMemory:
    """Per-object foreground/background tokens averaged over memory frames."""

    def __init__(self, n_objects: int, dim: int, like: Optional[torch.Tensor] = None):
        like = like if like is not None else torch.zeros(())
        self.tokens = like.new_zeros((n_objects, 2, dim))
        self.counts = like.new_zeros((n_objects, 2))

    @property
    def n_tokens(self):
        return self.tokens.shape[1]

    def add_objects(self, n_new: int) -> None:
        self.tokens = torch.cat([self.tokens, self.tokens.new_zeros((n_new,) + self.tokens.shape[1:])])
        self.counts = torch.cat([self.counts, self.counts.new_zeros((n_new, 2))])

    def update(self, features: torch.Tensor, mask_probs: torch.Tensor) -> "ObjectMemory":
        """``features`` (K, C, h, w), ``mask_probs`` (K, h, w) at the same grid."""
        if features.shape[0] != mask_probs.shape[0] or features.shape[2:] != mask_probs.shape[1:]:
            raise ValueError(
                f"features {tuple(features.shape)} and masks {tuple(mask_probs.shape)} disagree"
            )
        weights = torch.stack([mask_probs, 1 - mask_probs], 1)  # K, 2, h, w
        mass = weights.sum((2, 3))  # K, 2
        pooled_sum = torch.einsum("kthw,kchw->ktc", weights, features)
        has_mass = mass > 0
        pooled = pooled_sum / torch.where(has_mass, mass, torch.ones_like(mass))[..., None]
        new_counts = self.counts + has_mass.to(self.counts.dtype)
        step = torch.where(has_mass, 1.0 / new_counts.clamp(min=1), torch.zeros_like(mass))
        self.tokens = self.tokens + step[..., None] * (pooled - self.tokens)
        self.counts = new_counts
        return self


def update_object_memory(memory: ObjectMemory, features, mask_probs) -> ObjectMemory:
    return memory.update(features, mask_probs)
