"""Miniature BERT-style text encoder with LoRA on q/v and sub-region soft prompts.

The encoder is a stand-in for a pretrained biomedical language model: all of
its own weights are frozen; only the LoRA factors and the three prompt
matrices train.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ConfigError

SUBREGIONS = ("WT", "TC", "ET")


@dataclass
class TextEncoderConfig:
    vocab_size: int = 64
    d: int = 64
    layers: int = 2
    heads: int = 4
    max_length: int = 32  # L
    prompt_length: int = 4  # K
    ffn_mult: int = 4
    lora_rank: int = 8
    lora_alpha: float = 16.0

    def validate(self) -> None:
        if self.d % self.heads:
            raise ConfigError(f"d={self.d} not divisible by heads={self.heads}", "heads")
        if self.prompt_length < 1:
            raise ConfigError("prompt_length (K) must be >= 1", "prompt_length")
        if self.max_length < 2:
            raise ConfigError("max_length (L) must be >= 2", "max_length")
        if not 0 < self.lora_rank <= self.d:
            raise ConfigError(f"lora_rank {self.lora_rank} must be in [1, d={self.d}]", "lora_rank")

    def to_dict(self) -> dict:
        return asdict(self)


def masked_attention(q, k, v, key_mask=None):
    """Scaled dot-product attention over ``[B, heads, N, dh]`` tensors.

    ``key_mask`` is ``[B, M]`` with 1 for attendable keys. Query rows with no
    attendable key produce exact zeros instead of NaN.
    """
    scores = q @ k.transpose(-2, -1) / math.sqrt(q.shape[-1])
    if key_mask is None:
        return torch.softmax(scores, dim=-1) @ v
    valid = key_mask[:, None, None, :].bool()
    scores = scores.masked_fill(~valid, torch.finfo(scores.dtype).min)
    weights = torch.softmax(scores, dim=-1) * valid
    return weights @ v


class LoRALinear(nn.Module):
    """Frozen ``nn.Linear`` plus a trainable low-rank delta scaled by ``alpha / r``.

    With ``enabled=False`` the factors are not created and the layer is the
    plain frozen projection.
    """

    def __init__(self, base: nn.Linear, r: int = 8, alpha: float = 16.0, enabled: bool = True):
        super().__init__()
        d_out, d_in = base.weight.shape
        if r < 1 or r > min(d_in, d_out):
            raise ConfigError(f"LoRA rank {r} exceeds projection dim {min(d_in, d_out)}", "lora_rank")
        self.base = base
        self.base.requires_grad_(False)
        self.r = r
        self.alpha = alpha
        self.scale = alpha / r
        self.enabled = enabled
        if enabled:
            self.A = nn.Parameter(torch.randn(r, d_in) * 0.02)
            self.B = nn.Parameter(torch.zeros(d_out, r))

    def forward(self, x):
        out = self.base(x)
        if self.enabled:
            out = out + self.scale * F.linear(F.linear(x, self.A), self.B)
        return out


def lora_forward(adapter: LoRALinear, x):
    return adapter(x)


class SelfAttention(nn.Module):
    def __init__(self, d, heads, r, alpha, lora_on):
        super().__init__()
        self.heads = heads
        self.q = LoRALinear(nn.Linear(d, d), r, alpha, enabled=lora_on)
        self.k = nn.Linear(d, d)
        self.v = LoRALinear(nn.Linear(d, d), r, alpha, enabled=lora_on)
        self.o = nn.Linear(d, d)

    def _split(self, x):
        b, n, d = x.shape
        return x.view(b, n, self.heads, d // self.heads).transpose(1, 2)

    def forward(self, x, mask):
        b, n, d = x.shape
        out = masked_attention(self._split(self.q(x)), self._split(self.k(x)), self._split(self.v(x)), mask)
        return self.o(out.transpose(1, 2).reshape(b, n, d))


class EncoderLayer(nn.Module):
    def __init__(self, d, heads, ffn_mult, r, alpha, lora_on):
        super().__init__()
        self.norm1 = nn.LayerNorm(d)
        self.attn = SelfAttention(d, heads, r, alpha, lora_on)
        self.norm2 = nn.LayerNorm(d)
        self.ffn = nn.Sequential(nn.Linear(d, ffn_mult * d), nn.GELU(), nn.Linear(ffn_mult * d, d))

    def forward(self, x, mask):
        x = x + self.attn(self.norm1(x), mask)
        return x + self.ffn(self.norm2(x))


@dataclass
class TextRepresentation:
    T: dict  # sub-region -> [B, L, d]
    T_shared: torch.Tensor  # [B, L, d]
    pooled: dict  # sub-region -> [B, d]
    mask: torch.Tensor  # [B, L]


def pool_sentence(T, attention_mask):
    """Mean over real-token positions; all-pad rows give the zero vector."""
    m = attention_mask.to(T.dtype).unsqueeze(-1)
    count = m.sum(dim=1)
    return (T * m).sum(dim=1) / count.clamp_min(1.0)


class TextEncoder(nn.Module):
    """Shared encoder run once per sub-region with that sub-region's prompts.

    ``prompts_on=False`` encodes the words alone once and reuses the result
    for all three sub-regions (the single-global-embedding baseline).
    """

    def __init__(self, cfg: TextEncoderConfig, prompts_on: bool = True, lora_on: bool = True):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        self.prompts_on = prompts_on
        self.lora_on = lora_on
        d, K = cfg.d, cfg.prompt_length
        self.word_embed = nn.Embedding(cfg.vocab_size, d)
        # prompt positions take the first K learned positions
        self.pos_embed = nn.Parameter(torch.randn(K + cfg.max_length, d) * 0.02)
        self.embed_norm = nn.LayerNorm(d)
        self.layers = nn.ModuleList(
            EncoderLayer(d, cfg.heads, cfg.ffn_mult, cfg.lora_rank, cfg.lora_alpha, lora_on)
            for _ in range(cfg.layers)
        )
        self.final_norm = nn.LayerNorm(d)
        self._freeze_base()
        if prompts_on:
            self.prompts = nn.ParameterDict({s: nn.Parameter(torch.randn(K, d) * 0.02) for s in SUBREGIONS})

    def _freeze_base(self):
        for name, p in self.named_parameters():
            if not name.endswith((".A", ".B")):
                p.requires_grad_(False)

    def encoder(self, embeddings, mask, pos_offset: int = 0):
        """Run the transformer stack on already-embedded ``[B, N, d]`` input."""
        pos = self.pos_embed[pos_offset : pos_offset + embeddings.shape[1]]
        x = self.embed_norm(embeddings + pos)
        for layer in self.layers:
            x = layer(x, mask)
        return self.final_norm(x)

    def encode_words(self, token_ids, attention_mask):
        """Prompt-free pass; words keep positions K..K+L-1 as in prompted passes."""
        return self.encoder(self.word_embed(token_ids), attention_mask, pos_offset=self.cfg.prompt_length)

    def encode_subregion(self, token_ids, attention_mask, s: str, prompt=None):
        if s not in SUBREGIONS:
            raise ConfigError(f"unknown sub-region {s!r}", "subregion")
        if prompt is None:
            if not self.prompts_on:
                return self.encode_words(token_ids, attention_mask)
            prompt = self.prompts[s]
        B, L = token_ids.shape
        K = prompt.shape[0]
        E = torch.cat([prompt.unsqueeze(0).expand(B, -1, -1), self.word_embed(token_ids)], dim=1)
        M = torch.cat([attention_mask.new_ones(B, K), attention_mask], dim=1)
        out = self.encoder(E, M)
        return out[:, K:]

    def encode_all(self, token_ids, attention_mask) -> TextRepresentation:
        if self.prompts_on:
            T = {s: self.encode_subregion(token_ids, attention_mask, s) for s in SUBREGIONS}
        else:
            shared = self.encode_words(token_ids, attention_mask)
            T = {s: shared for s in SUBREGIONS}
        T_shared = (T["WT"] + T["TC"] + T["ET"]) / 3
        pooled = {s: pool_sentence(T[s], attention_mask) for s in SUBREGIONS}
        return TextRepresentation(T, T_shared, pooled, attention_mask)

    forward = encode_all
