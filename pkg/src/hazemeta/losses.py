"""Training losses for the dehazing pipeline and their weighted combination."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, fields

import torch
import torch.nn as nn
import torch.nn.functional as F

from hazemeta import NumericalError

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_C1 = 0.01 ** 2
SSIM_C2 = 0.03 ** 2
CR_EPS = 1e-7
CE_CLAMP = 1e-12
CR_LEVEL_WEIGHTS = (1 / 32, 1 / 16, 1 / 8, 1 / 4, 1.0)


@dataclass(frozen=True)
class LossWeights:
    lambda1: float = 0.5  # ssim
    lambda2: float = 0.1  # contrastive regularization (perceptual ratio)
    lambda3: float = 1.0  # domain cross entropy
    lambda4: float = 0.5  # domain-relevant contrastive regularization

    def __post_init__(self):
        for f in fields(self):
            v = getattr(self, f.name)
            if not math.isfinite(v) or v < 0:
                raise ValueError(f"{f.name} must be finite and >= 0, got {v}")


COMPONENTS = ("pixel", "ssim", "cr", "ce", "dcr")


@dataclass(frozen=True)
class LossBreakdown:
    pixel: float
    ssim: float
    cr: float
    ce: float
    dcr: float
    total: float

    def as_dict(self) -> dict:
        return asdict(self)


def _check_pair(preds: torch.Tensor, targets: torch.Tensor):
    if preds.shape != targets.shape:
        raise ValueError(f"shape mismatch: {tuple(preds.shape)} vs {tuple(targets.shape)}")
    if preds.dim() == 3:
        preds, targets = preds[None], targets[None]
    return preds, targets


def pixel_loss(preds: torch.Tensor, targets: torch.Tensor, reduction: str = "mean") -> torch.Tensor:
    """Mean over samples of per-sample L1; per-sample reduction 'mean' or 'sum'."""
    preds, targets = _check_pair(preds, targets)
    per = (preds - targets).abs().flatten(1)
    per = per.mean(dim=1) if reduction == "mean" else per.sum(dim=1)
    return per.mean()


def gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA, dtype=torch.float32) -> torch.Tensor:
    x = torch.arange(size, dtype=torch.float64) - (size - 1) / 2
    g = torch.exp(-(x ** 2) / (2 * sigma ** 2))
    g = g / g.sum()
    return torch.outer(g, g).to(dtype)


def ssim_map(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Local SSIM over valid 11x11 Gaussian windows, per channel; (B, C, h, w)."""
    a, b = _check_pair(a, b)
    if a.shape[-1] < SSIM_WINDOW or a.shape[-2] < SSIM_WINDOW:
        raise ValueError(f"SSIM needs images of at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {tuple(a.shape[-2:])}")
    C = a.shape[1]
    win = gaussian_window(dtype=a.dtype).to(a.device).expand(C, 1, SSIM_WINDOW, SSIM_WINDOW)

    def filt(x):
        return F.conv2d(x, win, groups=C)

    mu_a, mu_b = filt(a), filt(b)
    var_a = filt(a * a) - mu_a ** 2
    var_b = filt(b * b) - mu_b ** 2
    cov = filt(a * b) - mu_a * mu_b
    num = (2 * mu_a * mu_b + SSIM_C1) * (2 * cov + SSIM_C2)
    den = (mu_a ** 2 + mu_b ** 2 + SSIM_C1) * (var_a + var_b + SSIM_C2)
    return num / den


def ssim(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Per-sample mean SSIM, shape (B,)."""
    return ssim_map(a, b).flatten(1).mean(dim=1)


def ssim_loss(preds: torch.Tensor, targets: torch.Tensor) -> torch.Tensor:
    return (1.0 - ssim(preds, targets)).mean()


class FrozenPyramid(nn.Module):
    """Five-level conv feature pyramid with frozen, fixed-seed random weights.

    Stand-in for a pretrained classification backbone; pretrained weights can
    be loaded with :meth:`load_weights`.
    """

    def __init__(self, widths=(16, 32, 64, 64, 128), seed: int = 1234):
        super().__init__()
        gen = torch.Generator().manual_seed(seed)
        layers = []
        cin = 3
        for i, w in enumerate(widths):
            conv = nn.Conv2d(cin, w, 3, stride=1 if i == 0 else 2, padding=1)
            fan_in = cin * 9
            with torch.no_grad():
                conv.weight.copy_(torch.randn(conv.weight.shape, generator=gen) * math.sqrt(2.0 / fan_in))
                conv.bias.zero_()
            layers.append(conv)
            cin = w
        self.levels = nn.ModuleList(layers)
        self.requires_grad_(False)
        self.eval()

    def train(self, mode: bool = True):
        # always frozen
        return super().train(False)

    def forward(self, x: torch.Tensor) -> list[torch.Tensor]:
        feats = []
        for conv in self.levels:
            x = F.relu(conv(x))
            feats.append(x)
        return feats

    def load_weights(self, path) -> None:
        from hazemeta.checkpoint import load_container
        blob = load_container(path)
        self.load_state_dict(blob["weights"])
        self.requires_grad_(False)


def cr_loss(preds: torch.Tensor, targets: torch.Tensor, hazys: torch.Tensor, extractor: nn.Module,
            level_weights=CR_LEVEL_WEIGHTS, eps: float = CR_EPS) -> torch.Tensor:
    """sum_s alpha_s * |V_s(y) - V_s(y_hat)|_1 / (|V_s(x) - V_s(y_hat)|_1 + eps), mean over samples.

    Norms are per-sample means over feature elements.
    """
    preds, targets = _check_pair(preds, targets)
    if hazys.dim() == 3:
        hazys = hazys[None]
    n = preds.shape[0]
    with torch.no_grad():
        f_clear = extractor(targets)
        f_hazy = extractor(hazys)
    f_pred = extractor(preds)
    if len(f_pred) != len(level_weights):
        raise ValueError(f"extractor gives {len(f_pred)} levels but {len(level_weights)} weights were supplied")
    total = preds.new_zeros(n)
    for alpha, fy, fx, fp in zip(level_weights, f_clear, f_hazy, f_pred):
        pos = (fy - fp).abs().flatten(1).mean(dim=1)
        neg = (fx - fp).abs().flatten(1).mean(dim=1)
        total = total + alpha * pos / (neg + eps)
    return total.mean()


def ce_loss(probs: torch.Tensor, labels) -> torch.Tensor:
    """Cross entropy from probabilities (not logits), natural log."""
    labels = torch.as_tensor(labels, dtype=torch.long, device=probs.device)
    if probs.dim() == 1:
        probs, labels = probs[None], labels.reshape(1)
    if labels.min() < 0 or labels.max() >= probs.shape[-1]:
        raise ValueError(f"labels must lie in [0, {probs.shape[-1]})")
    picked = probs.gather(1, labels[:, None]).squeeze(1)
    return -(picked.clamp_min(CE_CLAMP).log()).mean()


def weighted_total(components: dict, weights: LossWeights):
    """pixel + l1*ssim + l2*cr + l3*ce + l4*dcr; accepts tensors or floats.

    Tensor components are promoted to float64 before summation.
    """
    for name in COMPONENTS:
        v = components[name]
        val = float(v.detach()) if isinstance(v, torch.Tensor) else float(v)
        if not math.isfinite(val):
            raise NumericalError(f"loss component {name!r} is not finite ({val})")

    def cast(v):
        return v.double() if isinstance(v, torch.Tensor) else float(v)

    c = {k: cast(components[k]) for k in COMPONENTS}
    return (c["pixel"] + weights.lambda1 * c["ssim"] + weights.lambda2 * c["cr"]
            + weights.lambda3 * c["ce"] + weights.lambda4 * c["dcr"])


def total_loss(components: dict, weights: LossWeights = LossWeights()) -> LossBreakdown:
    total = weighted_total(components, weights)
    vals = {k: float(components[k].detach()) if isinstance(components[k], torch.Tensor) else float(components[k])
            for k in COMPONENTS}
    return LossBreakdown(total=float(total.detach()) if isinstance(total, torch.Tensor) else float(total), **vals)
