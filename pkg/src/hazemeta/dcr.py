"""Domain-relevant contrastive regularization.

Task parameters are compared as sets of channel feature maps with the
contextual loss. Of the two tasks drawn from the same domain, the one the
domain classifier is more confident about acts as the (gradient-detached)
positive guide for the other; tasks from other domains are negatives:

    L = cx(anchor, pos) / (cx(anchor, pos) + sum_neg cx(anchor, neg) + sigma)
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import torch
import torch.nn as nn
import torch.nn.functional as F

CX_EPS = 1e-5
DEFAULT_BANDWIDTH = 0.5
DEFAULT_SIGMA = 1e-7


def _features(phi) -> torch.Tensor:
    return phi.features if hasattr(phi, "features") else phi


def contextual_similarity(phi_a, phi_b, h: float = DEFAULT_BANDWIDTH, eps: float = CX_EPS) -> torch.Tensor:
    """Row-stochastic (U, V) similarity between the channels of two feature maps.

    Each channel's H'xW' map is one feature vector. Vectors are centred on the
    mean of ``phi_b``'s vectors, L2-normalised, and compared by cosine distance;
    distances are normalised by each row's minimum before the softmax over v.
    """
    a, b = _features(phi_a), _features(phi_b)
    if a.shape[0] != b.shape[0]:
        raise ValueError(f"channel counts differ: {a.shape[0]} vs {b.shape[0]}")
    x = a.reshape(a.shape[0], -1)
    y = b.reshape(b.shape[0], -1)
    mu = y.mean(dim=0, keepdim=True)
    x = x - mu
    y = y - mu
    x = x / (x.norm(dim=1, keepdim=True) + eps)
    y = y / (y.norm(dim=1, keepdim=True) + eps)
    dist = (1.0 - x @ y.t()).clamp_min(0.0)
    rel = dist / (dist.min(dim=1, keepdim=True).values + eps)
    return torch.softmax((1.0 - rel) / h, dim=1)


def contextual_loss(phi_a, phi_b, h: float = DEFAULT_BANDWIDTH, normalize: bool = True) -> torch.Tensor:
    """-log of the mean (or, with ``normalize=False``, the sum) over u of max_v A_uv.

    The normalised form is always >= 0. Not symmetric in its arguments.
    """
    A = contextual_similarity(phi_a, phi_b, h)
    best = A.max(dim=1).values
    s = best.mean() if normalize else best.sum()
    return -torch.log(s)


class DomainClassifier(nn.Module):
    """Two stride-2 convs -> global average pool -> linear over domains."""

    def __init__(self, in_channels: int = 64, num_domains: int = 2, width: int = 32):
        super().__init__()
        self.conv1 = nn.Conv2d(in_channels, width, 3, stride=2, padding=1)
        self.conv2 = nn.Conv2d(width, width, 3, stride=2, padding=1)
        self.fc = nn.Linear(width, num_domains)
        self.num_domains = num_domains

    def logits(self, phi: torch.Tensor) -> torch.Tensor:
        x = F.relu(self.conv1(phi))
        x = F.relu(self.conv2(x))
        return self.fc(x.mean(dim=(-2, -1)))

    def forward(self, phi: torch.Tensor) -> torch.Tensor:
        return torch.softmax(self.logits(phi), dim=-1)


@dataclass
class DomainPrediction:
    probs: torch.Tensor
    confidence: float | None = None


def classify_domain(phi, classifier: DomainClassifier, true_domain: int | None = None) -> DomainPrediction:
    feats = _features(phi)
    single = feats.dim() == 3
    probs = classifier(feats[None] if single else feats)
    if single:
        probs = probs[0]
    conf = None
    if true_domain is not None and single:
        conf = float(probs[true_domain].detach())
    return DomainPrediction(probs, conf)


@dataclass(frozen=True)
class ContrastSelection:
    anchor_index: int
    positive_index: int
    negative_indices: tuple[int, ...]


def select_positive(domain_ids: Sequence[int], confidences: Sequence[float]) -> ContrastSelection:
    """Pick anchor/positive from the same-domain pair by classifier confidence.

    The pair is the first domain (in batch order) that occurs more than once;
    its first two occurrences are used. The more confident one becomes the
    positive, ties going to the lower index. Every task from another domain is
    a negative.
    """
    domain_ids = [int(d) for d in domain_ids]
    if len(confidences) != len(domain_ids):
        raise ValueError("need one confidence per task")
    seen: dict[int, int] = {}
    pair = None
    for i, d in enumerate(domain_ids):
        if d in seen:
            pair = (seen[d], i)
            break
        seen[d] = i
    if pair is None:
        raise ValueError(f"no same-domain pair in batch with domains {domain_ids}; sampling bug")
    i, j = pair
    if confidences[j] > confidences[i]:
        pos, anchor = j, i
    else:
        pos, anchor = i, j
    negatives = tuple(k for k, d in enumerate(domain_ids) if d != domain_ids[anchor])
    return ContrastSelection(anchor, pos, negatives)


def dcr_from_terms(positive_term, negative_terms, sigma: float = DEFAULT_SIGMA):
    neg = sum(negative_terms) if len(negative_terms) else 0.0
    return positive_term / (positive_term + neg + sigma)


def dcr_loss(selection: ContrastSelection, params: Sequence, h: float = DEFAULT_BANDWIDTH,
             sigma: float = DEFAULT_SIGMA, normalize: bool = True) -> torch.Tensor:
    if sigma <= 0:
        raise ValueError("sigma must be > 0")
    feats = [_features(p) for p in params]
    anchor = feats[selection.anchor_index]
    positive = feats[selection.positive_index].detach()
    pos_term = contextual_loss(anchor, positive, h, normalize)
    neg_terms = [contextual_loss(anchor, feats[k], h, normalize) for k in selection.negative_indices]
    return dcr_from_terms(pos_term, neg_terms, sigma)
