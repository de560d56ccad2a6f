import numpy as np
import pytest
import torch

from onedatum.distillery.mixing import apply_mix, cutmix, mixup
from onedatum.errors import UnsupportedMixError


def rng(seed=0):
    return np.random.default_rng(seed)


class TestMixup:
    def test_lambda_one_is_identity(self):
        x = torch.rand(8, 3, 32, 32)
        assert torch.equal(mixup(x, rng(), lam=1.0).inputs, x)

    def test_constant_images(self):
        x = torch.cat([torch.zeros(1, 3, 4, 4), torch.full((1, 3, 4, 4), 2.0)])
        out = mixup(x, np.random.default_rng(0), lam=0.5)
        assert torch.all(out.inputs == 1.0)

    def test_elementwise_identity(self):
        g = rng(5)
        for _ in range(20):
            x = torch.from_numpy(g.normal(size=(16, 3, 8, 8))).float()
            m = mixup(x, g)
            lam = m.lam.float().view(-1, 1, 1, 1)
            resid = m.inputs - lam * x - (1 - lam) * x[m.pairing]
            assert resid.abs().max().item() <= 1e-6

    def test_shape_and_dtype(self):
        x = torch.rand(6, 1, 98, 64)
        out = mixup(x, rng()).inputs
        assert out.shape == x.shape and out.dtype == x.dtype


class TestCutmix:
    def test_lam0_one_is_empty_box(self):
        x = torch.rand(4, 3, 32, 32)
        m = cutmix(x, 0.25, 0.25, rng(), lam0=1.0)
        assert torch.equal(m.inputs, x)
        assert m.lam[0].item() == 1.0

    def test_sixteen_box_lambda(self):
        x = torch.rand(4, 3, 32, 32)
        # with the center far from the borders the box is exactly 16 x 16
        for seed in range(200):
            m = cutmix(x, 0.25, 0.25, rng(seed), lam0=0.75)
            y1, y2, x1, x2 = m.box
            if (y2 - y1, x2 - x1) == (16, 16):
                assert m.lam[0].item() == 1 - 256 / 1024 == 0.75
                return
        pytest.fail("no unclamped box drawn")

    def test_partition_and_lambda(self):
        g = rng(11)
        for _ in range(256):
            x = torch.from_numpy(g.random((8, 3, 32, 32))).float()
            m = cutmix(x, 0.25, 0.25, g)
            y1, y2, x1, x2 = m.box
            inside = torch.zeros(32, 32, dtype=torch.bool)
            inside[y1:y2, x1:x2] = True
            partner = x[m.pairing]
            assert torch.equal(m.inputs[..., inside], partner[..., inside])
            assert torch.equal(m.inputs[..., ~inside], x[..., ~inside])
            assert m.lam[0].item() == 1 - inside.sum().item() / 1024

    def test_rejects_non_spatial(self):
        with pytest.raises(UnsupportedMixError):
            cutmix(torch.rand(8, 10), 0.25, 0.25, rng())
        with pytest.raises(UnsupportedMixError):
            cutmix(torch.rand(8, 1, 98, 64), 0.25, 0.25, rng())


def test_apply_mix_none_is_identity():
    x = torch.rand(4, 3, 8, 8)
    assert apply_mix("none", x, rng()) is x
