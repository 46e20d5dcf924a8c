"""Toy-scale segmentation network: query/mask encoders, object transformer
blocks and the skip-connection decoder.

Trailing numbers on variable names are strides (f16 = stride-16 features).
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import NamedTuple, Optional, Tuple

import torch
import torch.nn.functional as F
from torch import nn

from .memory import MemoryConfig, SensoryFusion, SensoryUpdater

STRIDE = 16


@dataclass
class NetConfig:
    n_blocks: int = 3
    n_queries: int = 8
    key_dim: int = 64
    value_dim: int = 128
    model_dim: int = 64
    hidden_dim: int = 64
    heads: int = 2
    query_dims: Tuple[int, ...] = (16, 32, 64, 128)
    mask_dims: Tuple[int, ...] = (8, 16, 32, 64)

    def __post_init__(self):
        self.query_dims = tuple(self.query_dims)
        self.mask_dims = tuple(self.mask_dims)
        if len(self.query_dims) != 4 or len(self.mask_dims) != 4:
            raise ValueError("encoders have exactly four stages")
        values = [self.n_queries, self.key_dim, self.value_dim, self.model_dim,
                  self.hidden_dim, self.heads, *self.query_dims, *self.mask_dims]
        if self.n_blocks < 0 or min(values) <= 0:
            raise ValueError("network sizes must be positive")
        if self.n_queries % 2:
            raise ValueError("n_queries must be even (half foreground, half background)")
        if self.model_dim % self.heads:
            raise ValueError("model_dim must be divisible by heads")

    def memory_config(self, **kw) -> MemoryConfig:
        return MemoryConfig(key_dim=self.key_dim, value_dim=self.value_dim, **kw)

    def to_dict(self):
        return asdict(self)


class QueryFeatures(NamedTuple):
    key: torch.Tensor  # key_dim, h, w
    f16: torch.Tensor  # C16, h, w
    f8: torch.Tensor  # C8, 2h, 2w
    f4: torch.Tensor  # C4, 4h, 4w
    pad: Tuple[int, int]  # bottom, right padding added to reach a multiple of 16
    size: Tuple[int, int]  # original H, W


def pad_to_stride(x: torch.Tensor, stride: int = STRIDE):
    """Replicate-pad the bottom/right of ``(C, H, W)`` up to a multiple of ``stride``."""
    h, w = x.shape[-2:]
    ph, pw = (-h) % stride, (-w) % stride
    if ph or pw:
        x = F.pad(x[None], (0, pw, 0, ph), mode="replicate")[0]
    return x, (ph, pw)


def downsample_probs(probs: torch.Tensor, pad: Tuple[int, int]) -> torch.Tensor:
    """Average-pool ``(K, H, W)`` probabilities onto the stride-16 grid."""
    ph, pw = pad
    p = F.pad(probs, (0, pw, 0, ph))
    return F.avg_pool2d(p.unsqueeze(1), STRIDE).squeeze(1)


def conv_block(cin, cout, stride):
    return nn.Sequential(
        nn.Conv2d(cin, cout, 3, stride=stride, padding=1),
        nn.GELU(),
        nn.Conv2d(cout, cout, 3, padding=1),
        nn.GELU(),
    )


class Pyramid(nn.Module):
    """Four stride-2 stages; returns features at strides 4, 8, 16."""

    def __init__(self, cin, dims):
        super().__init__()
        self.stages = nn.ModuleList()
        for d in dims:
            self.stages.append(conv_block(cin, d, 2))
            cin = d

    def forward(self, x):
        outs = []
        for stage in self.stages:
            x = stage(x)
            outs.append(x)
        return outs[1], outs[2], outs[3]


class QueryEncoder(nn.Module):
    def __init__(self, cfg: NetConfig):
        super().__init__()
        self.pyramid = Pyramid(3, cfg.query_dims)
        self.key_proj = nn.Conv2d(cfg.query_dims[3], cfg.key_dim, 1)

    def forward(self, frame: torch.Tensor) -> QueryFeatures:
        size = tuple(frame.shape[-2:])
        x, pad = pad_to_stride(frame)
        f4, f8, f16 = self.pyramid(x.unsqueeze(0))
        key = self.key_proj(f16)
        return QueryFeatures(key[0], f16[0], f8[0], f4[0], pad, size)


class MaskEncoder(nn.Module):
    """Encodes (frame, own mask, sum of other masks) per object with shared weights."""

    def __init__(self, cfg: NetConfig):
        super().__init__()
        self.pyramid = Pyramid(5, cfg.mask_dims)
        self.fuse = nn.Sequential(
            nn.Conv2d(cfg.mask_dims[3] + cfg.query_dims[3], cfg.value_dim, 3, padding=1),
            nn.GELU(),
            nn.Conv2d(cfg.value_dim, cfg.value_dim, 1),
        )

    def forward(self, frame, probs, f16, pad):
        k = probs.shape[0]
        if probs.shape[-2:] != frame.shape[-2:]:
            raise ValueError(f"probs {tuple(probs.shape)} not aligned with frame {tuple(frame.shape)}")
        others = probs.sum(0, keepdim=True) - probs
        x = torch.cat([frame.unsqueeze(0).expand(k, -1, -1, -1), probs[:, None], others[:, None]], 1)
        ph, pw = pad
        if ph or pw:
            x = F.pad(x, (0, pw, 0, ph), mode="replicate")
        _, _, m16 = self.pyramid(x)
        return self.fuse(torch.cat([m16, f16.unsqueeze(0).expand(k, -1, -1, -1)], 1))


def attention(q, k, v, heads: int, permitted: Optional[torch.Tensor] = None, return_weights=False):
    """Multi-head attention over the last two dims.

    ``q`` (B, Nq, d), ``k``/``v`` (B, Nk, d), ``permitted`` (B, Nq, Nk) bool.
    Rows with no permitted position fall back to attending everywhere.
    """
    b, nq, d = q.shape
    nk = k.shape[1]
    dh = d // heads
    qh = q.reshape(b, nq, heads, dh).transpose(1, 2)
    kh = k.reshape(b, nk, heads, dh).transpose(1, 2)
    vh = v.reshape(b, nk, heads, dh).transpose(1, 2)
    logits = qh @ kh.transpose(-1, -2) / math.sqrt(dh)  # b, heads, nq, nk
    if permitted is not None:
        empty = ~permitted.any(-1, keepdim=True)
        allowed = (permitted | empty).unsqueeze(1)
        logits = logits.masked_fill(~allowed, float("-inf"))
    weights = torch.softmax(logits, -1)
    out = (weights @ vh).transpose(1, 2).reshape(b, nq, d)
    return (out, weights) if return_weights else out


class CrossAttention(nn.Module):
    def __init__(self, dim, heads, kv_dim=None):
        super().__init__()
        kv_dim = kv_dim or dim
        self.heads = heads
        self.q = nn.Linear(dim, dim)
        self.k = nn.Linear(kv_dim, dim)
        self.v = nn.Linear(kv_dim, dim)
        self.out = nn.Linear(dim, dim)

    def forward(self, x, ctx, permitted=None):
        y = attention(self.q(x), self.k(ctx), self.v(ctx), self.heads, permitted)
        return self.out(y)


class FeedForward(nn.Sequential):
    def __init__(self, dim, mult=2):
        super().__init__(nn.LayerNorm(dim), nn.Linear(dim, dim * mult), nn.GELU(), nn.Linear(dim * mult, dim))


class ObjectTransformerBlock(nn.Module):
    """One round of query <- pixel/object-memory reading and pixel <- query feedback.

    Bottom-up: the first half of the queries may only attend to foreground
    pixels, the second half only to background pixels; then all queries
    read the object-memory tokens. Top-down: every pixel attends to the
    updated queries. All sublayers are pre-norm residual.
    """

    def __init__(self, cfg: NetConfig):
        super().__init__()
        d = cfg.model_dim
        self.n_queries = cfg.n_queries
        self.norm_q = nn.LayerNorm(d)
        self.norm_pix = nn.LayerNorm(d)
        self.read_pixels = CrossAttention(d, cfg.heads)
        self.norm_obj = nn.LayerNorm(d)
        self.read_objects = CrossAttention(d, cfg.heads)
        self.ffn_q = FeedForward(d)
        self.norm_td = nn.LayerNorm(d)
        self.norm_td_q = nn.LayerNorm(d)
        self.top_down = CrossAttention(d, cfg.heads)
        self.ffn_pix = FeedForward(d)

    def query_mask(self, fg_probs: torch.Tensor) -> torch.Tensor:
        """(K, h, w) probabilities -> (K, n_q, h*w) permitted positions."""
        fg = (fg_probs > 0.5).flatten(1)
        half = self.n_queries // 2
        return torch.cat([fg[:, None].expand(-1, half, -1), (~fg)[:, None].expand(-1, half, -1)], 1)

    def forward(self, readout, queries, obj_tokens, fg_probs):
        k, d, h, w = readout.shape
        pix = readout.flatten(2).transpose(1, 2)  # K, P, d
        permitted = self.query_mask(fg_probs)
        queries = queries + self.read_pixels(self.norm_q(queries), self.norm_pix(pix), permitted)
        queries = queries + self.read_objects(self.norm_obj(queries), obj_tokens)
        queries = queries + self.ffn_q(queries)
        pix = pix + self.top_down(self.norm_td(pix), self.norm_td_q(queries))
        pix = pix + self.ffn_pix(pix)
        return pix.transpose(1, 2).reshape(k, d, h, w), queries


class Decoder(nn.Module):
    def __init__(self, cfg: NetConfig):
        super().__init__()
        d = cfg.model_dim
        self.compress = nn.Sequential(nn.Conv2d(d, d, 3, padding=1), nn.GELU())
        self.skip8 = nn.Conv2d(cfg.query_dims[2], d, 1)
        self.up8 = nn.Sequential(nn.Conv2d(d, d // 2, 3, padding=1), nn.GELU())
        self.skip4 = nn.Conv2d(cfg.query_dims[1], d // 2, 1)
        self.up4 = nn.Sequential(nn.Conv2d(d // 2, d // 2, 3, padding=1), nn.GELU())
        self.pred = nn.Conv2d(d // 2, 1, 3, padding=1)

    def forward(self, readout, qf: QueryFeatures):
        x = self.compress(readout)
        x = F.interpolate(x, scale_factor=2, mode="bilinear", align_corners=False)
        x = self.up8(x + self.skip8(qf.f8).unsqueeze(0))
        x = F.interpolate(x, scale_factor=2, mode="bilinear", align_corners=False)
        x = self.up4(x + self.skip4(qf.f4).unsqueeze(0))
        logits = self.pred(x)
        logits = F.interpolate(logits, scale_factor=4, mode="bilinear", align_corners=False)
        h, w = qf.size
        return logits[:, 0, :h, :w]


class VOSModel(nn.Module):
    def __init__(self, cfg: Optional[NetConfig] = None):
        super().__init__()
        cfg = cfg or NetConfig()
        self.cfg = cfg
        self.query_encoder = QueryEncoder(cfg)
        self.mask_encoder = MaskEncoder(cfg)
        self.fusion = SensoryFusion(cfg.value_dim, cfg.hidden_dim, cfg.query_dims[3], cfg.model_dim)
        self.sensory = SensoryUpdater(cfg.value_dim, cfg.hidden_dim)
        self.query_bank = nn.Parameter(torch.randn(cfg.n_queries, cfg.model_dim) * 0.1)
        self.object_proj = nn.Linear(cfg.value_dim, cfg.model_dim)
        self.blocks = nn.ModuleList(ObjectTransformerBlock(cfg) for _ in range(cfg.n_blocks))
        self.decoder = Decoder(cfg)
        for m in self.modules():
            if isinstance(m, nn.Conv2d):
                # default init shrinks activations ~3x per layer; the mask path is 5 deep
                nn.init.kaiming_normal_(m.weight, nonlinearity="relu")
                nn.init.zeros_(m.bias)

    def encode_query(self, frame: torch.Tensor) -> QueryFeatures:
        return self.query_encoder(frame)

    def encode_mask(self, frame, probs, qf: QueryFeatures):
        return self.mask_encoder(frame, probs, qf.f16, qf.pad)

    def transform(self, readout, obj_tokens, fg_probs):
        """Run the block stack; returns final readout and object queries."""
        k = readout.shape[0]
        queries = self.query_bank.unsqueeze(0).expand(k, -1, -1)
        tokens = self.object_proj(obj_tokens)
        for block in self.blocks:
            readout, queries = block(readout, queries, tokens, fg_probs)
        return readout, queries

    def decode(self, readout, qf: QueryFeatures):
        return self.decoder(readout, qf)


def describe(model: nn.Module) -> str:
    """Parameter table: name, shape, count."""
    rows = [(n, "x".join(map(str, p.shape)), p.numel()) for n, p in model.named_parameters()]
    width = max(len(r[0]) for r in rows)
    lines = [f"{'parameter':<{width}}  {'shape':>16}  {'count':>9}"]
    lines += [f"{n:<{width}}  {s:>16}  {c:>9}" for n, s, c in rows]
    lines.append(f"{'total':<{width}}  {'':>16}  {sum(r[2] for r in rows):>9}")
    return "\n".join(lines)


def save_weights(model: VOSModel, path) -> None:
    torch.save({"config": model.cfg.to_dict(), "state": model.state_dict()}, path)


def load_weights(path) -> VOSModel:
    blob = torch.load(path, map_location="cpu", weights_only=True)
    model = VOSModel(NetConfig(**blob["config"]))
    model.load_state_dict(blob["state"])
    return model.eval()
