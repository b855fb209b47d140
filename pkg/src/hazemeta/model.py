"""Full pipeline: adaptation network + aggregator + conditioned dehazer + domain classifier."""

from __future__ import annotations

import logging
from typing import Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from hazemeta.adapt import AdaptationNet
from hazemeta.aggregate import aggregate
from hazemeta.backbone import DehazeNet
from hazemeta.dcr import DomainClassifier

logger = logging.getLogger(__name__)

ADAPT_CHOICES = ("cg_conv", "plain_conv", "none")
AGGREGATOR_CHOICES = ("average", "distance_aware")


def to_tensor(img: np.ndarray) -> torch.Tensor:
    """(..., H, W, 3) array -> (..., 3, H, W) float32 tensor."""
    t = torch.from_numpy(np.ascontiguousarray(img, dtype=np.float32))
    return t.movedim(-1, -3)


def to_image(t: torch.Tensor) -> np.ndarray:
    return t.detach().movedim(-3, -1).cpu().numpy()


class HazeMetaModel(nn.Module):
    def __init__(self, adapt_net: str = "cg_conv", aggregator: str = "distance_aware",
                 num_domains: int = 2, phi_channels: int = 64, distance_reduction: str = "mean",
                 backbone_widths=(32, 48, 64, 96), n_res: int = 4):
        super().__init__()
        if adapt_net not in ADAPT_CHOICES:
            raise ValueError(f"adapt_net must be one of {ADAPT_CHOICES}, got {adapt_net!r}")
        if aggregator not in AGGREGATOR_CHOICES:
            raise ValueError(f"aggregator must be one of {AGGREGATOR_CHOICES}, got {aggregator!r}")
        self.aggregator = aggregator
        self.distance_reduction = distance_reduction
        # backbone first: every variant seeded alike starts from the same dehazer weights
        if adapt_net == "none":
            self.backbone = DehazeNet(backbone_widths, n_res, phi_channels=None)
            self.adapt = None
            self.classifier = None
        else:
            self.backbone = DehazeNet(backbone_widths, n_res, phi_channels=phi_channels)
            self.adapt = AdaptationNet(out_channels=phi_channels, gated=adapt_net == "cg_conv")
            self.classifier = DomainClassifier(phi_channels, num_domains)

    @property
    def conditioned(self) -> bool:
        return self.adapt is not None

    def task_params(self, hazy: torch.Tensor):
        """(N, K, 3, H, W) -> task parameters (N, C, h, w) and aggregation weights (N, K)."""
        N, K = hazy.shape[:2]
        prelim = self.adapt(hazy.reshape(N * K, *hazy.shape[2:]))
        prelim = prelim.reshape(N, K, *prelim.shape[1:])
        params = [aggregate(prelim[i], self.aggregator, self.distance_reduction) for i in range(N)]
        return torch.stack([p.features for p in params]), torch.stack([p.source_weights for p in params])

    def forward(self, hazy: torch.Tensor):
        """Dehaze every image of every task with its own task parameter.

        Returns (preds (N*K, 3, H, W), phi (N, C, h, w) or None).
        """
        N, K = hazy.shape[:2]
        x = hazy.reshape(N * K, *hazy.shape[2:])
        if not self.conditioned:
            return self.backbone(x), None
        phi, _ = self.task_params(hazy)
        return self.backbone(x, phi.repeat_interleave(K, dim=0)), phi

    @torch.inference_mode()
    def restore(self, hazy: np.ndarray, context: Sequence[np.ndarray] = ()) -> np.ndarray:
        """Dehaze one (H, W, 3) image, optionally using unlabeled same-domain context images."""
        was_training = self.training
        self.eval()
        try:
            x = to_tensor(hazy)
            phi = None
            if self.conditioned:
                imgs = [x]
                for c in context:
                    ct = to_tensor(c)
                    if ct.shape != x.shape:
                        logger.warning("resizing context image from %s to %s", tuple(ct.shape[-2:]), tuple(x.shape[-2:]))
                        ct = F.interpolate(ct[None], size=x.shape[-2:], mode="bilinear", align_corners=False)[0]
                    imgs.append(ct)
                phi, _ = self.task_params(torch.stack(imgs)[None])
            out = self.backbone(x[None], phi, clamp=True)[0]
        finally:
            self.train(was_training)
        return to_image(out)
