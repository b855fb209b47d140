import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.ndimage import gaussian_filter

from hazemeta import NumericalError
from hazemeta.losses import (COMPONENTS, FrozenPyramid, LossWeights, ce_loss, cr_loss, gaussian_window,
                             pixel_loss, ssim, ssim_loss, total_loss, weighted_total)


def rand(*shape, seed=0):
    return torch.rand(*shape, generator=torch.Generator().manual_seed(seed), dtype=torch.float64)


class TestPixel:
    def test_zero(self):
        x = rand(2, 3, 8, 8)
        assert pixel_loss(x, x) == 0

    def test_offset(self):
        x = rand(2, 3, 8, 8) * 0.5
        assert pixel_loss(x + 0.1, x).item() == pytest.approx(0.1, abs=1e-12)

    def test_symmetric(self):
        a, b = rand(1, 3, 8, 8), rand(1, 3, 8, 8, seed=1)
        assert pixel_loss(a, b) == pixel_loss(b, a)

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            pixel_loss(rand(1, 3, 8, 8), rand(1, 3, 8, 9))


def ssim_oracle(a, b):
    """Per-channel gaussian-window SSIM with scipy filters, averaged over the valid region."""
    r = 5
    vals = []
    for c in range(a.shape[0]):
        x, y = a[c], b[c]

        def f(z):
            return gaussian_filter(z, 1.5, mode="constant", truncate=r / 1.5)[r:-r, r:-r]

        mx, my = f(x), f(y)
        sxx = f(x * x) - mx ** 2
        syy = f(y * y) - my ** 2
        sxy = f(x * y) - mx * my
        c1, c2 = 0.01 ** 2, 0.03 ** 2
        m = ((2 * mx * my + c1) * (2 * sxy + c2)) / ((mx ** 2 + my ** 2 + c1) * (sxx + syy + c2))
        vals.append(m)
    return float(np.mean(vals))


class TestSSIM:
    def test_window(self):
        w = gaussian_window(dtype=torch.float64)
        assert w.shape[-2:] == (11, 11)
        assert w.sum().item() == pytest.approx(1.0)

    def test_identity(self):
        x = rand(2, 3, 16, 16)
        torch.testing.assert_close(ssim_loss(x, x), torch.tensor(0.0, dtype=torch.float64))

    def test_perturbed_constant(self):
        x = torch.full((1, 1, 16, 16), 0.5, dtype=torch.float64)
        y = x + 0.05 * (rand(1, 1, 16, 16) - 0.5)
        assert ssim_loss(x, y) > 0

    @pytest.mark.parametrize("seed", range(3))
    def test_matches_scipy(self, seed):
        a, b = rand(3, 24, 20, seed=seed), rand(3, 24, 20, seed=seed + 10)
        ours = ssim(a[None], b[None]).item()
        assert ours == pytest.approx(ssim_oracle(a.numpy(), b.numpy()), abs=1e-10)


@pytest.fixture(scope="module")
def ext():
    return FrozenPyramid().double()


class TestCR:
    def test_frozen(self, ext):
        assert all(not p.requires_grad for p in ext.parameters())
        ext.train()
        assert not ext.training

    def test_seeded(self):
        a, b = FrozenPyramid(seed=5), FrozenPyramid(seed=5)
        for p, q in zip(a.parameters(), b.parameters()):
            assert torch.equal(p, q)

    def test_pred_equals_clear(self, ext):
        y, x = rand(2, 3, 32, 32), rand(2, 3, 32, 32, seed=1)
        assert cr_loss(y, y, x, ext).item() == 0

    def test_all_equal(self, ext):
        y = rand(1, 3, 32, 32)
        assert cr_loss(y, y, y, ext).item() == 0

    def test_levels_sum(self, ext):
        # hazy == clear makes every numerator equal its denominator
        y, y_hat = rand(2, 3, 32, 32), rand(2, 3, 32, 32, seed=2)
        assert cr_loss(y_hat, y, y, ext, eps=0.0).item() == pytest.approx(47 / 32, abs=1e-12)
        # the stabiliser only shifts each ratio by eps / numerator
        assert cr_loss(y_hat, y, y, ext).item() == pytest.approx(1.46875, abs=1e-5)

    def test_weight_count_mismatch(self, ext):
        y = rand(1, 3, 16, 16)
        with pytest.raises(ValueError):
            cr_loss(y, y, y, ext, level_weights=(1.0, 1.0))

    def test_load_weights(self, tmp_path):
        from hazemeta.checkpoint import save_container

        src = FrozenPyramid(seed=9)
        save_container({"weights": src.state_dict()}, tmp_path / "ext.pt")
        dst = FrozenPyramid(seed=1)
        dst.load_weights(tmp_path / "ext.pt")
        assert torch.equal(dst.levels[0].weight, src.levels[0].weight)
        assert not dst.levels[0].weight.requires_grad


class TestCE:
    def test_one_hot(self):
        assert ce_loss(torch.eye(3), [0, 1, 2]).item() == 0

    @pytest.mark.parametrize("n", [2, 4])
    def test_uniform(self, n):
        assert ce_loss(torch.full((5, n), 1 / n), [0] * 5).item() == pytest.approx(math.log(n), abs=1e-6)

    def test_zero_prob_finite(self):
        assert math.isfinite(ce_loss(torch.tensor([[0.0, 1.0]]), [0]).item())

    def test_bad_label(self):
        with pytest.raises(ValueError):
            ce_loss(torch.full((1, 2), 0.5), [2])


class TestTotal:
    def test_zero(self):
        assert total_loss(dict.fromkeys(COMPONENTS, 0.0)).total == 0

    def test_ones(self):
        assert total_loss(dict.fromkeys(COMPONENTS, 1.0)).total == pytest.approx(3.1, abs=1e-12)

    def test_default_weights(self):
        w = LossWeights()
        assert (w.lambda1, w.lambda2, w.lambda3, w.lambda4) == (0.5, 0.1, 1.0, 0.5)

    def test_lambda4_zero_drops_dcr(self):
        comps = dict(pixel=0.2, ssim=0.3, cr=0.4, ce=0.5, dcr=0.9)
        w = LossWeights(lambda4=0.0)
        assert weighted_total(comps, w) == weighted_total({**comps, "dcr": 0.0}, w)

    def test_non_finite_named(self):
        comps = dict.fromkeys(COMPONENTS, 0.0)
        comps["cr"] = torch.tensor(float("nan"))
        with pytest.raises(NumericalError, match="cr"):
            weighted_total(comps, LossWeights())

    def test_negative_weight(self):
        with pytest.raises(ValueError):
            LossWeights(lambda2=-1.0)

    @settings(max_examples=50, deadline=None)
    @given(vals=st.lists(st.floats(0, 10), min_size=5, max_size=5),
           lams=st.lists(st.floats(0, 2), min_size=4, max_size=4))
    def test_identity(self, vals, lams):
        comps = dict(zip(COMPONENTS, [torch.tensor(v, dtype=torch.float32) for v in vals]))
        w = LossWeights(*lams)
        br = total_loss(comps, w)
        expected = br.pixel + w.lambda1 * br.ssim + w.lambda2 * br.cr + w.lambda3 * br.ce + w.lambda4 * br.dcr
        assert br.total == pytest.approx(expected, abs=1e-6)


def test_losses_nonnegative_random():
    ext = FrozenPyramid(widths=(4, 4, 4, 4, 4)).double()
    for seed in range(10):
        a, b, x = rand(2, 3, 16, 16, seed=seed), rand(2, 3, 16, 16, seed=seed + 50), rand(2, 3, 16, 16, seed=seed + 99)
        for v in (pixel_loss(a, b), ssim_loss(a, b), cr_loss(a, b, x, ext)):
            assert torch.isfinite(v) and v >= 0
