"""Compact 3D encoder-decoder with a bottleneck image/text cross-attention block."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import torch
import torch.nn as nn

from .errors import ConfigError
from .textenc import masked_attention


@dataclass
class VisionConfig:
    in_channels: int = 4
    base_channels: int = 8
    depth: int = 3
    decoder_out_channels: int = 48  # C
    fusion_heads: int = 4
    fusion_order: str = "text_first"  # or "vision_first"
    norm_groups: int = 4

    def validate(self) -> None:
        if self.depth < 1:
            raise ConfigError("depth must be >= 1", "depth")
        if self.fusion_order not in ("text_first", "vision_first"):
            raise ConfigError(f"unknown fusion_order {self.fusion_order!r}", "fusion_order")
        if (self.base_channels * 2**self.depth) % self.fusion_heads:
            raise ConfigError("bottleneck channels must be divisible by fusion_heads", "fusion_heads")
        if self.base_channels % self.norm_groups:
            raise ConfigError("base_channels must be divisible by norm_groups", "norm_groups")

    def check_grid(self, spatial) -> None:
        step = 2**self.depth
        if any(n % step for n in spatial):
            raise ConfigError(f"spatial dims {tuple(spatial)} not divisible by 2**depth={step}", "grid_size")

    def to_dict(self) -> dict:
        return asdict(self)


def conv_block(cin, cout, groups, stride=1):
    return nn.Sequential(
        nn.Conv3d(cin, cout, 3, stride=stride, padding=1),
        nn.GroupNorm(groups, cout),
        nn.LeakyReLU(0.01),
        nn.Conv3d(cout, cout, 3, padding=1),
        nn.GroupNorm(groups, cout),
        nn.LeakyReLU(0.01),
    )


class CrossAttention(nn.Module):
    """Pre-norm residual cross-attention; the output projection starts at zero."""

    def __init__(self, d_query, d_context, heads):
        super().__init__()
        self.heads = heads
        self.norm_q = nn.LayerNorm(d_query)
        self.norm_kv = nn.LayerNorm(d_context)
        self.q = nn.Linear(d_query, d_query)
        self.k = nn.Linear(d_context, d_query)
        self.v = nn.Linear(d_context, d_query)
        self.out = nn.Linear(d_query, d_query)
        nn.init.zeros_(self.out.weight)
        nn.init.zeros_(self.out.bias)

    def _split(self, x):
        b, n, d = x.shape
        return x.view(b, n, self.heads, d // self.heads).transpose(1, 2)

    def forward(self, x, context, context_mask=None):
        b, n, d = x.shape
        q = self._split(self.q(self.norm_q(x)))
        c = self.norm_kv(context)
        att = masked_attention(q, self._split(self.k(c)), self._split(self.v(c)), context_mask)
        delta = self.out(att.transpose(1, 2).reshape(b, n, d))
        if context_mask is not None:
            # samples with no attendable key keep their residual input
            delta = delta * context_mask.bool().any(-1).to(delta.dtype)[:, None, None]
        return x + delta


class BottleneckFusion(nn.Module):
    """Two sequential cross-attention sub-blocks between bottleneck voxels and text tokens."""

    def __init__(self, channels, d_text, heads, order="text_first"):
        super().__init__()
        self.order = order
        self.text_in = nn.Linear(d_text, channels)
        self.text_attends_vision = CrossAttention(channels, channels, heads)
        self.vision_attends_text = CrossAttention(channels, channels, heads)

    def forward(self, bottleneck, T_shared, text_mask):
        B, C = bottleneck.shape[:2]
        spatial = bottleneck.shape[2:]
        v = bottleneck.flatten(2).transpose(1, 2)  # [B, N, C]
        t = self.text_in(T_shared)
        if self.order == "text_first":
            t = self.text_attends_vision(t, v)
            v = self.vision_attends_text(v, t, text_mask)
        else:
            v = self.vision_attends_text(v, t, text_mask)
        return v.transpose(1, 2).reshape(B, C, *spatial)


class VisionNet(nn.Module):
    def __init__(self, cfg: VisionConfig, d_text: int):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        ch = [cfg.base_channels * 2**i for i in range(cfg.depth + 1)]
        g = cfg.norm_groups
        self.enc = nn.ModuleList(
            [conv_block(cfg.in_channels, ch[0], g)] + [conv_block(ch[i - 1], ch[i], g, stride=2) for i in range(1, cfg.depth + 1)]
        )
        self.fuse = BottleneckFusion(ch[-1], d_text, cfg.fusion_heads, cfg.fusion_order)
        self.dec = nn.ModuleDict(
            {
                "up": nn.ModuleList(nn.ConvTranspose3d(ch[i], ch[i - 1], 2, stride=2) for i in range(cfg.depth, 0, -1)),
                "block": nn.ModuleList(conv_block(2 * ch[i - 1], ch[i - 1], g) for i in range(cfg.depth, 0, -1)),
                "proj": nn.Conv3d(ch[0], cfg.decoder_out_channels, 1),
            }
        )

    def encode(self, volume):
        self.cfg.check_grid(volume.shape[2:])
        feats = []
        x = volume
        for stage in self.enc:
            x = stage(x)
            feats.append(x)
        return feats

    def fuse_bottleneck(self, bottleneck, T_shared, text_mask):
        return self.fuse(bottleneck, T_shared, text_mask)

    def decode(self, pyramid, fused):
        x = fused
        skips = pyramid[-2::-1]
        for up, block, skip in zip(self.dec["up"], self.dec["block"], skips):
            x = block(torch.cat([up(x), skip], dim=1))
        return self.dec["proj"](x)

    def forward(self, volume, T_shared, text_mask):
        pyramid = self.encode(volume)
        fused = self.fuse_bottleneck(pyramid[-1], T_shared, text_mask)
        return self.decode(pyramid, fused)
