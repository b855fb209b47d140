"""Set aggregation of a task's preliminary parameters.

Two permutation-invariant rules:

* average: phi = mean_k phi_k
* distance-aware: d_k = mean_{s != k} ||phi_k - phi_s||_1,
  w = softmax(-d), phi = sum_k w_k phi_k

Samples far from the rest of the task get exponentially smaller weight, which
keeps a single outlier from dragging the task parameter away.

By default the L1 norm is reduced by its mean over elements rather than the sum:
with sum, d grows with the feature size and the softmax collapses to one-hot for
realistic feature maps. ``reduction="sum"`` gives the literal L1 norm.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import torch

REDUCTIONS = ("mean", "sum")


@dataclass
class TaskParam:
    features: torch.Tensor
    source_weights: torch.Tensor
    domain_id: int | None = None


def _stack(prelims) -> torch.Tensor:
    if isinstance(prelims, torch.Tensor):
        if prelims.shape[0] == 0:
            raise ValueError("cannot aggregate an empty set")
        return prelims
    if len(prelims) == 0:
        raise ValueError("cannot aggregate an empty set")
    shapes = {tuple(p.shape) for p in prelims}
    if len(shapes) != 1:
        raise ValueError(f"preliminary parameters differ in shape: {sorted(shapes)}")
    return torch.stack(list(prelims))


def average_aggregate(prelims: Sequence[torch.Tensor] | torch.Tensor) -> TaskParam:
    phis = _stack(prelims)
    K = phis.shape[0]
    w = torch.full((K,), 1.0 / K, dtype=phis.dtype, device=phis.device)
    return TaskParam(phis.mean(dim=0), w)


def pairwise_mean_distance(prelims, reduction: str = "mean") -> torch.Tensor:
    """Mean L1 distance from each element to the others, shape (K,)."""
    if reduction not in REDUCTIONS:
        raise ValueError(f"reduction must be one of {REDUCTIONS}, got {reduction!r}")
    phis = _stack(prelims)
    K = phis.shape[0]
    if K < 2:
        raise ValueError("pairwise distances need at least two elements")
    flat = phis.reshape(K, -1)
    diff = (flat[:, None, :] - flat[None, :, :]).abs()
    dist = diff.mean(dim=-1) if reduction == "mean" else diff.sum(dim=-1)
    # diagonal is exactly zero, so summing every column gives the off-diagonal sum
    return dist.sum(dim=1) / (K - 1)


def distance_weights(prelims, reduction: str = "mean") -> torch.Tensor:
    phis = _stack(prelims)
    if phis.shape[0] == 1:
        return torch.ones(1, dtype=phis.dtype, device=phis.device)
    neg = -pairwise_mean_distance(phis, reduction)
    # softmax with the max subtracted first
    neg = neg - neg.max().detach()
    e = neg.exp()
    return e / e.sum()


def distance_aware_aggregate(prelims, reduction: str = "mean") -> TaskParam:
    phis = _stack(prelims)
    if phis.shape[0] == 1:
        return TaskParam(phis[0], distance_weights(phis))
    w = distance_weights(phis, reduction)
    phi = torch.tensordot(w, phis, dims=([0], [0]))
    return TaskParam(phi, w)


AGGREGATORS = {
    "average": average_aggregate,
    "distance_aware": distance_aware_aggregate,
}


def aggregate(prelims, method: str = "distance_aware", reduction: str = "mean") -> TaskParam:
    if method == "average":
        return average_aggregate(prelims)
    if method == "distance_aware":
        return distance_aware_aggregate(prelims, reduction)
    raise ValueError(f"unknown aggregator {method!r}; expected one of {sorted(AGGREGATORS)}")
