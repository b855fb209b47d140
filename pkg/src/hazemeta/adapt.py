"""Adaptation network: hazy image -> preliminary parameter.

Two context-gated conv blocks (stride 2, BN, ReLU) followed by a plain 3x3
conv, also stride 2, so a 240x240 input yields a 64x30x30 feature map.

The gate is a channel-wise sigmoid computed from the globally pooled block
input, which lets every output channel see whole-image context. This is a
lighter variant of kernel-modulating context-gated convolution.
"""

from __future__ import annotations

import torch
import torch.nn as nn
import torch.nn.functional as F

from hazemeta import NumericalError

KERNEL = 3


class ContextGate(nn.Module):
    """Global average pool -> 2-layer MLP -> sigmoid, one gate per output channel."""

    def __init__(self, in_channels: int, out_channels: int, reduction: int = 4):
        super().__init__()
        hidden = max(in_channels // reduction, 8)
        self.fc1 = nn.Linear(in_channels, hidden)
        self.fc2 = nn.Linear(hidden, out_channels)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        pooled = x.mean(dim=(-2, -1))
        return torch.sigmoid(self.fc2(F.relu(self.fc1(pooled))))


def context_gate(features: torch.Tensor, gate: ContextGate) -> torch.Tensor:
    """Gate vector(s) in (0, 1) for a (C, H, W) or (B, C, H, W) feature map."""
    if features.shape[-3] != gate.fc1.in_features:
        raise ValueError(f"gate expects {gate.fc1.in_features} channels, got {features.shape[-3]}")
    return gate(features)


class CGConvBlock(nn.Module):
    """ReLU(BN(Conv(x) * gate(x))) with stride-2 downsampling.

    With ``gated=False`` this is a plain Conv+BN+ReLU block (the CNN-only
    adaptation network of the ablation).
    """

    def __init__(self, in_channels: int, out_channels: int, gated: bool = True):
        super().__init__()
        self.conv = nn.Conv2d(in_channels, out_channels, KERNEL, stride=2, padding=KERNEL // 2)
        self.gate = ContextGate(in_channels, out_channels) if gated else None
        self.bn = nn.BatchNorm2d(out_channels)

    def forward(self, x: torch.Tensor, gate: torch.Tensor | None = None) -> torch.Tensor:
        if x.shape[-1] < KERNEL or x.shape[-2] < KERNEL:
            raise ValueError(f"spatial size {tuple(x.shape[-2:])} is smaller than the {KERNEL}x{KERNEL} kernel")
        y = self.conv(x)
        if gate is None and self.gate is not None:
            gate = self.gate(x)
        if gate is not None:
            y = y * gate[..., None, None]
        return F.relu(self.bn(y))


class AdaptationNet(nn.Module):
    def __init__(self, channels=(32, 64), out_channels: int = 64, gated: bool = True):
        super().__init__()
        c1, c2 = channels
        self.block1 = CGConvBlock(3, c1, gated)
        self.block2 = CGConvBlock(c1, c2, gated)
        self.head = nn.Conv2d(c2, out_channels, KERNEL, stride=2, padding=KERNEL // 2)
        self.out_channels = out_channels
        self.gated = gated

    stride = 8

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if not torch.isfinite(x).all():
            raise NumericalError("adaptation network input contains non-finite values")
        return self.head(self.block2(self.block1(x)))


def encode_preliminary(x: torch.Tensor, net: AdaptationNet) -> torch.Tensor:
    """Preliminary parameters for a batch (B, 3, H, W) or a single image (3, H, W)."""
    single = x.dim() == 3
    phi = net(x[None] if single else x)
    return phi[0] if single else phi
