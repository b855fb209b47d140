"""Central finite-difference gradient checks at float64.

The oracle perturbs one input element at a time and never touches autograd,
so it stays independent of the backward passes it verifies.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import torch

DEFAULT_STEP = 1e-6
DEFAULT_TOL = 1e-4


def finite_difference_grad(f: Callable[[], torch.Tensor], x: torch.Tensor, step: float = DEFAULT_STEP) -> torch.Tensor:
    """d f() / d x by central differences; ``f`` reads ``x`` in place."""
    grad = torch.zeros_like(x)
    flat, gflat = x.data.view(-1), grad.view(-1)
    with torch.no_grad():
        for i in range(flat.numel()):
            orig = flat[i].item()
            flat[i] = orig + step
            fp = float(f())
            flat[i] = orig - step
            fm = float(f())
            flat[i] = orig
            gflat[i] = (fp - fm) / (2 * step)
    return grad


def relative_error(analytic: torch.Tensor, numeric: torch.Tensor) -> float:
    diff = (analytic - numeric).norm().item()
    scale = max(analytic.norm().item(), numeric.norm().item(), 1e-12)
    return diff / scale


def check(f: Callable[[], torch.Tensor], inputs: list[torch.Tensor], step: float = DEFAULT_STEP) -> float:
    """Worst relative error over ``inputs`` between autograd and central differences."""
    for x in inputs:
        x.grad = None
    out = f()
    analytic = torch.autograd.grad(out, inputs, allow_unused=True)
    worst = 0.0
    for x, ga in zip(inputs, analytic):
        if ga is None:
            ga = torch.zeros_like(x)
        worst = max(worst, relative_error(ga, finite_difference_grad(f, x, step)))
    return worst


@dataclass
class GradResult:
    name: str
    rel_error: float
    tol: float = DEFAULT_TOL

    @property
    def passed(self) -> bool:
        return self.rel_error < self.tol


def _leaf(*shape, gen, scale=1.0, offset=0.0):
    return (torch.rand(*shape, generator=gen, dtype=torch.float64) * scale + offset).requires_grad_(True)


def suite(seed: int = 0) -> list[GradResult]:
    """The standard set of checks on toy shapes (C=4, 3x3 feature maps; 1x16x16 images)."""
    from hazemeta.adapt import AdaptationNet
    from hazemeta.aggregate import distance_aware_aggregate
    from hazemeta.dcr import ContrastSelection, contextual_loss, dcr_loss
    from hazemeta.losses import FrozenPyramid, cr_loss, ssim_loss

    gen = torch.Generator().manual_seed(seed)
    results = []

    phis = _leaf(3, 4, 3, 3, gen=gen, scale=2.0)
    probe = torch.randn(4, 3, 3, generator=gen, dtype=torch.float64)
    results.append(GradResult("distance_aware_aggregate",
                              check(lambda: (distance_aware_aggregate(phis).features * probe).sum(), [phis])))

    a = _leaf(4, 3, 3, gen=gen)
    b = _leaf(4, 3, 3, gen=gen)
    results.append(GradResult("contextual_loss", check(lambda: contextual_loss(a, b), [a, b])))

    params = [_leaf(4, 3, 3, gen=gen) for _ in range(4)]
    sel = ContrastSelection(anchor_index=1, positive_index=0, negative_indices=(2, 3))
    results.append(GradResult("dcr_loss", check(lambda: dcr_loss(sel, params), [params[1], params[2], params[3]])))

    pred = _leaf(1, 1, 16, 16, gen=gen)
    target = torch.rand(1, 1, 16, 16, generator=gen, dtype=torch.float64)
    results.append(GradResult("ssim_loss", check(lambda: ssim_loss(pred, target), [pred])))

    ext = FrozenPyramid(widths=(4, 4, 4, 4, 4), seed=seed).double()
    y_hat = _leaf(1, 3, 16, 16, gen=gen)
    y = torch.rand(1, 3, 16, 16, generator=gen, dtype=torch.float64)
    x = torch.rand(1, 3, 16, 16, generator=gen, dtype=torch.float64)
    results.append(GradResult("cr_loss", check(lambda: cr_loss(y_hat, y, x, ext), [y_hat])))

    torch.manual_seed(seed)
    net = AdaptationNet(channels=(4, 4), out_channels=4).double().eval()
    img = torch.rand(1, 3, 16, 16, generator=gen, dtype=torch.float64)
    weights = list(net.parameters())
    results.append(GradResult("adaptation_network", check(lambda: net(img).sum(), weights)))
    return results
