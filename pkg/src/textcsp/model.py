"""Full text-guided segmentation network: text encoder + vision backbone + soft cascade."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import torch.nn as nn

from .cascade import CascadeOutput, SoftCascade
from .textenc import TextEncoder, TextEncoderConfig
from .visionnet import VisionConfig, VisionNet


@dataclass
class ModelConfig:
    text: TextEncoderConfig = field(default_factory=TextEncoderConfig)
    vision: VisionConfig = field(default_factory=VisionConfig)
    reduction: int = 4

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "ModelConfig":
        data = dict(data)
        return cls(
            text=TextEncoderConfig(**data.pop("text", {})),
            vision=VisionConfig(**data.pop("vision", {})),
            **data,
        )


class TextCSP(nn.Module):
    def __init__(
        self,
        cfg: ModelConfig,
        topology: str = "full",
        prompts_on: bool = True,
        lora_on: bool = True,
        modulators_on: bool = True,
    ):
        super().__init__()
        self.cfg = cfg
        self.text = TextEncoder(cfg.text, prompts_on=prompts_on, lora_on=lora_on)
        self.vision = VisionNet(cfg.vision, d_text=cfg.text.d)
        self.cascade = SoftCascade(
            channels=cfg.vision.decoder_out_channels,
            d_text=cfg.text.d,
            reduction=cfg.reduction,
            topology=topology,
            modulators_on=modulators_on,
        )

    def forward(self, volume, token_ids, attention_mask) -> CascadeOutput:
        rep = self.text.encode_all(token_ids, attention_mask)
        F_dec = self.vision(volume, rep.T_shared, attention_mask)
        return self.cascade.forward_pooled(F_dec, rep.pooled["TC"], rep.pooled["ET"])
