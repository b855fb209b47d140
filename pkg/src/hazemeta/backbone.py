"""Conditional dehazing network: a small MSBDN-style encoder/decoder.

Three stride-2 encoder stages, residual blocks at the bottleneck, and three
decoder stages that fuse encoder skips with the strengthen-operate-subtract
boosting rule

    j = G(skip + up(j_prev)) - up(j_prev)

The task parameter enters once, at the bottleneck: it is resized to the
bottleneck grid, concatenated, projected back by a 1x1 conv and added
residually. The network predicts a correction added to its input.
"""

from __future__ import annotations

import torch
import torch.nn as nn
import torch.nn.functional as F

from hazemeta import NumericalError


def _finite(x: torch.Tensor, where: str) -> torch.Tensor:
    if not torch.isfinite(x).all():
        raise NumericalError(f"non-finite activations after {where}")
    return x


class ResBlock(nn.Module):
    def __init__(self, ch: int):
        super().__init__()
        self.conv1 = nn.Conv2d(ch, ch, 3, padding=1)
        self.conv2 = nn.Conv2d(ch, ch, 3, padding=1)

    def forward(self, x):
        return x + self.conv2(F.relu(self.conv1(x)))


class ConditionFusion(nn.Module):
    def __init__(self, bottleneck_channels: int, phi_channels: int):
        super().__init__()
        self.proj = nn.Conv2d(bottleneck_channels + phi_channels, bottleneck_channels, 1)

    def forward(self, bottleneck: torch.Tensor, phi: torch.Tensor) -> torch.Tensor:
        if phi.dim() == 3:
            phi = phi[None].expand(bottleneck.shape[0], -1, -1, -1)
        if phi.shape[0] != bottleneck.shape[0]:
            raise ValueError(f"batch mismatch: bottleneck {bottleneck.shape[0]} vs phi {phi.shape[0]}")
        if phi.shape[-2:] != bottleneck.shape[-2:]:
            phi = F.interpolate(phi, size=bottleneck.shape[-2:], mode="bilinear", align_corners=False)
        return bottleneck + self.proj(torch.cat([bottleneck, phi], dim=1))


def condition_fuse(bottleneck: torch.Tensor, phi, fusion: ConditionFusion) -> torch.Tensor:
    feats = phi.features if hasattr(phi, "features") else phi
    return fusion(bottleneck, feats)


class DecoderStage(nn.Module):
    def __init__(self, cin: int, cout: int, light: bool = False):
        super().__init__()
        self.up = nn.ConvTranspose2d(cin, cout, 4, stride=2, padding=1)
        # the full-resolution stage uses a single conv to keep CPU training cheap
        self.refine = nn.Sequential(nn.Conv2d(cout, cout, 3, padding=1), nn.ReLU(inplace=True)) if light else ResBlock(cout)

    def forward(self, x, skip):
        up = self.up(x)
        return self.refine(skip + up) - up


class DehazeNet(nn.Module):
    stride = 8

    def __init__(self, widths=(32, 48, 64, 96), n_res: int = 4, phi_channels: int | None = 64):
        super().__init__()
        w0, w1, w2, w3 = widths
        self.head = nn.Sequential(nn.Conv2d(3, w0, 3, padding=1), nn.ReLU(inplace=True))
        self.enc1 = nn.Sequential(nn.Conv2d(w0, w1, 3, stride=2, padding=1), nn.ReLU(inplace=True), ResBlock(w1))
        self.enc2 = nn.Sequential(nn.Conv2d(w1, w2, 3, stride=2, padding=1), nn.ReLU(inplace=True), ResBlock(w2))
        self.enc3 = nn.Sequential(nn.Conv2d(w2, w3, 3, stride=2, padding=1), nn.ReLU(inplace=True))
        self.bottleneck = nn.Sequential(*[ResBlock(w3) for _ in range(n_res)])
        self.dec3 = DecoderStage(w3, w2)
        self.dec2 = DecoderStage(w2, w1)
        self.dec1 = DecoderStage(w1, w0, light=True)
        self.tail = nn.Conv2d(w0, 3, 3, padding=1)
        # created last so conditioned and unconditioned nets share the other initial weights
        self.fusion = ConditionFusion(w3, phi_channels) if phi_channels else None

    def forward(self, x: torch.Tensor, phi: torch.Tensor | None = None, clamp: bool = False) -> torch.Tensor:
        h, w = x.shape[-2:]
        ph, pw = (-h) % self.stride, (-w) % self.stride
        xp = F.pad(x, (0, pw, 0, ph), mode="reflect") if (ph or pw) else x

        e0 = _finite(self.head(xp), "head")
        e1 = _finite(self.enc1(e0), "enc1")
        e2 = _finite(self.enc2(e1), "enc2")
        b = self.bottleneck(self.enc3(e2))
        if self.fusion is not None:
            if phi is None:
                raise ValueError("this network is conditioned and needs a task parameter")
            b = self.fusion(b, phi)
        _finite(b, "bottleneck")
        d2 = _finite(self.dec3(b, e2), "dec3")
        d1 = _finite(self.dec2(d2, e1), "dec2")
        d0 = _finite(self.dec1(d1, e0), "dec1")
        out = xp + self.tail(d0)
        out = out[..., :h, :w]
        return out.clamp(0.0, 1.0) if clamp else out


def dehaze(x: torch.Tensor, phi, net: DehazeNet, clamp: bool = True) -> torch.Tensor:
    feats = phi.features if hasattr(phi, "features") else phi
    single = x.dim() == 3
    out = net(x[None] if single else x, feats, clamp=clamp)
    return out[0] if single else out


def count_parameters(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters())
