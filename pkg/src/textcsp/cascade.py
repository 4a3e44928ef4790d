"""Soft cascade head: WT -> TC -> ET with residual spatial gates and text channel gates."""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

import torch
import torch.nn as nn

from .errors import ConfigError
from .textenc import pool_sentence


class CascadeTopology(str, Enum):
    PARALLEL = "parallel"  # WT+TC+ET
    PARTIAL = "partial"  # WT->TC+ET
    FULL = "full"  # WT->TC->ET

    @classmethod
    def parse(cls, value) -> "CascadeTopology":
        try:
            return cls(value)
        except ValueError:
            raise ConfigError(
                f"unknown topology {value!r}; expected one of {[t.value for t in cls]}", "topology"
            ) from None


@dataclass
class CascadeOutput:
    y_WT: torch.Tensor
    y_TC: torch.Tensor
    y_ET: torch.Tensor
    A_WT: torch.Tensor
    A_TC: torch.Tensor
    G_TC: torch.Tensor | None
    G_ET: torch.Tensor | None

    def logits(self) -> torch.Tensor:
        """Stack the branch logits as ``[B, 3, D, H, W]`` in WT, TC, ET order."""
        return torch.cat([self.y_WT, self.y_TC, self.y_ET], dim=1)


def spatial_gate(F, A):
    """``F * (1 + A)`` with ``A`` broadcast over channels."""
    if A.dim() != F.dim() or A.shape[0] != F.shape[0] or A.shape[1] != 1 or A.shape[2:] != F.shape[2:]:
        raise ValueError(f"gate shape {tuple(A.shape)} incompatible with features {tuple(F.shape)}")
    return F * (1 + A)


class ChannelModulator(nn.Module):
    """SE-style excitation driven by a pooled sentence embedding instead of spatial pooling."""

    def __init__(self, d_text: int, channels: int, reduction: int = 4):
        super().__init__()
        if reduction < 1 or channels % reduction:
            raise ConfigError(f"channels {channels} not divisible by reduction {reduction}", "reduction")
        self.reduction = reduction
        self.fc1 = nn.Linear(d_text, channels // reduction)
        self.fc2 = nn.Linear(channels // reduction, channels)
        nn.init.zeros_(self.fc1.bias)
        nn.init.zeros_(self.fc2.bias)

    def forward(self, t_bar):
        return torch.sigmoid(self.fc2(torch.relu(self.fc1(t_bar))))


def modulate_channels(mod: ChannelModulator, t_bar):
    return mod(t_bar)


def _broadcast(G, F):
    return G.view(*G.shape, *([1] * (F.dim() - 2)))


class SoftCascade(nn.Module):
    def __init__(
        self,
        channels: int = 48,
        d_text: int = 64,
        reduction: int = 4,
        topology="full",
        modulators_on: bool = True,
    ):
        super().__init__()
        self.channels = channels
        self.topology = CascadeTopology.parse(topology)
        self.modulators_on = modulators_on
        self.head_WT = nn.Conv3d(channels, 1, 1)
        self.head_TC = nn.Conv3d(channels, 1, 1)
        self.head_ET = nn.Conv3d(channels, 1, 1)
        if modulators_on:
            self.mod_TC = ChannelModulator(d_text, channels, reduction)
            self.mod_ET = ChannelModulator(d_text, channels, reduction)

    def gates(self, t_TC, t_ET):
        if not self.modulators_on:
            return None, None
        return self.mod_TC(t_TC), self.mod_ET(t_ET)

    def forward_pooled(self, F_dec, t_TC, t_ET) -> CascadeOutput:
        """Cascade on decoder features given already-pooled ``[B, d_text]`` embeddings."""
        if F_dec.shape[1] != self.channels:
            raise ConfigError(f"decoder gives {F_dec.shape[1]} channels, cascade expects {self.channels}", "channels")
        G_TC, G_ET = self.gates(t_TC, t_ET)

        y_WT = self.head_WT(F_dec)
        A_WT = torch.sigmoid(y_WT)

        F_TC = F_dec if self.topology is CascadeTopology.PARALLEL else spatial_gate(F_dec, A_WT)
        if G_TC is not None:
            F_TC = F_TC * _broadcast(G_TC, F_TC)
        y_TC = self.head_TC(F_TC)
        A_TC = torch.sigmoid(y_TC)

        if self.topology is CascadeTopology.FULL:
            F_ET = spatial_gate(F_dec, A_TC)
        elif self.topology is CascadeTopology.PARTIAL:
            F_ET = spatial_gate(F_dec, A_WT)
        else:
            F_ET = F_dec
        if G_ET is not None:
            F_ET = F_ET * _broadcast(G_ET, F_ET)
        y_ET = self.head_ET(F_ET)

        return CascadeOutput(y_WT, y_TC, y_ET, A_WT, A_TC, G_TC, G_ET)

    def forward(self, F_dec, T_TC, T_ET, mask) -> CascadeOutput:
        return self.forward_pooled(F_dec, pool_sentence(T_TC, mask), pool_sentence(T_ET, mask))


def cascade_forward(cascade: SoftCascade, F_dec, T_TC, T_ET, mask) -> CascadeOutput:
    return cascade(F_dec, T_TC, T_ET, mask)
