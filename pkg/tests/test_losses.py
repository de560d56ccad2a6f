import math

import numpy as np
import pytest
import torch

from onedatum.distillery.losses import (SignalMode, degrade_signal, kd_loss, kd_loss_from_probs,
                                        logit_regression_loss, soften)
from onedatum.errors import ConfigError, PreconditionError


def softmax_oracle(logits, tau):
    e = [math.exp(v / tau) for v in logits]
    z = sum(e)
    return [v / z for v in e]


def kl_oracle(t, s, tau):
    p, q = softmax_oracle(t, tau), softmax_oracle(s, tau)
    return sum(pi * math.log(pi / qi) for pi, qi in zip(p, q) if pi > 0)


def central_diff(f, x, h=1e-6):
    g = torch.zeros_like(x)
    flat = x.view(-1)
    for i in range(flat.numel()):
        orig = flat[i].item()
        flat[i] = orig + h
        up = f(x).item()
        flat[i] = orig - h
        down = f(x).item()
        flat[i] = orig
        g.view(-1)[i] = (up - down) / (2 * h)
    return g


class TestSoften:
    def test_uniform_logits(self):
        out = soften(torch.zeros(3), 5.0)
        np.testing.assert_allclose(out.numpy(), [1 / 3] * 3, atol=1e-7)

    def test_two_class_value(self):
        out = soften(torch.tensor([2.0, 0.0], dtype=torch.float64), 1.0)
        np.testing.assert_allclose(out.numpy(), softmax_oracle([2, 0], 1), atol=1e-12)
        np.testing.assert_allclose(out.numpy(), [0.880797, 0.119203], atol=1e-6)

    def test_argmax_preserved(self):
        assert int(soften(torch.tensor([5.0, 1.0, 3.0]), 8).argmax()) == 0

    @pytest.mark.parametrize("tau", [0.0, -1.0])
    def test_bad_temperature(self, tau):
        with pytest.raises(ConfigError):
            soften(torch.zeros(3), tau)

    def test_argmax_independent_of_tau(self):
        rng = np.random.default_rng(3)
        logits = torch.from_numpy(rng.normal(0, 5, size=(500, 10)))
        ref = soften(logits, 1.0).argmax(-1)
        for tau in (0.5, 8, 64):
            assert torch.equal(soften(logits, tau).argmax(-1), ref)


class TestKdLoss:
    def test_identical_is_exactly_zero(self):
        t = torch.randn(16, 10, dtype=torch.float64)
        for tau in (0.5, 1.0, 8.0):
            assert kd_loss(t, t.clone(), tau).item() == 0.0

    def test_two_class_closed_form(self):
        val = kd_loss(torch.tensor([2.0, 0.0], dtype=torch.float64),
                      torch.tensor([0.0, 2.0], dtype=torch.float64), 1.0).item()
        p = softmax_oracle([2, 0], 1)[0]
        closed = (p - (1 - p)) * math.log(p / (1 - p))
        assert val == pytest.approx(closed, abs=1e-12)
        assert val == pytest.approx(1.523188, abs=1e-5)

    def test_higher_temperature_lowers_loss(self):
        t = torch.tensor([2.0, 0.0], dtype=torch.float64)
        s = torch.tensor([0.0, 2.0], dtype=torch.float64)
        assert kd_loss(t, s, 8.0).item() == pytest.approx(kl_oracle([2, 0], [0, 2], 8), abs=1e-12)
        assert kd_loss(t, s, 8.0).item() < kd_loss(t, s, 1.0).item()

    def test_matches_summation_oracle(self):
        rng = np.random.default_rng(0)
        for _ in range(20):
            t, s = rng.normal(0, 3, 7), rng.normal(0, 3, 7)
            got = kd_loss(torch.from_numpy(t), torch.from_numpy(s), 2.5).item()
            assert got == pytest.approx(kl_oracle(t, s, 2.5), rel=1e-10)

    def test_nonnegative(self):
        t, s = torch.randn(200, 10, dtype=torch.float64), torch.randn(200, 10, dtype=torch.float64)
        assert (kd_loss(t, s, 4.0, reduction="none") >= 0).all()

    def test_gradient_against_finite_differences(self):
        rng = np.random.default_rng(1)
        for _ in range(10):
            t = torch.from_numpy(rng.normal(0, 3, 10))
            s = torch.from_numpy(rng.normal(0, 3, 10)).requires_grad_(True)
            kd_loss(t, s, 8.0).backward()
            fd = central_diff(lambda x: kd_loss(t, x, 8.0), s.detach().clone())
            rel = (s.grad - fd).norm() / fd.norm()
            assert rel.item() <= 1e-5

    def test_gradient_has_no_tau_squared_factor(self):
        tau = 8.0
        t = torch.randn(10, dtype=torch.float64)
        s = torch.randn(10, dtype=torch.float64, requires_grad=True)
        kd_loss(t, s, tau).backward()
        expected = (soften(s.detach(), tau) - soften(t, tau)) / tau
        torch.testing.assert_close(s.grad, expected, rtol=1e-10, atol=1e-14)

    def test_shape_mismatch(self):
        with pytest.raises(PreconditionError):
            kd_loss(torch.zeros(3), torch.zeros(4), 1.0)

    def test_probs_with_zeros(self):
        probs = torch.tensor([[1.0, 0.0, 0.0]], dtype=torch.float64)
        s = torch.tensor([[1.0, 0.5, -1.0]], dtype=torch.float64)
        expected = -torch.log_softmax(s, -1)[0, 0]
        assert kd_loss_from_probs(probs, s, 1.0).item() == pytest.approx(expected.item(), abs=1e-12)


class TestLogitRegression:
    def test_equal_logits(self):
        t = torch.randn(4, 10)
        for kind in ("l1", "l2"):
            assert logit_regression_loss(t, t, 3.0, kind).item() == 0.0

    def test_l1_arithmetic(self):
        val = logit_regression_loss(torch.tensor([2.0, 0.0]), torch.tensor([0.0, 2.0]), 1.0, "l1")
        assert val.item() == pytest.approx(2.0)

    def test_l2_arithmetic(self):
        val = logit_regression_loss(torch.tensor([2.0, 0.0]), torch.tensor([0.0, 2.0]), 2.0, "l2")
        assert val.item() == pytest.approx(1.0)

    def test_unknown_kind(self):
        with pytest.raises(ConfigError):
            logit_regression_loss(torch.zeros(2), torch.zeros(2), 1.0, "huber")


class TestDegradeSignal:
    def test_full_unchanged(self):
        p = torch.tensor([0.5, 0.3, 0.2])
        assert torch.equal(degrade_signal(p, "full").probs, p)

    def test_hard(self):
        out = degrade_signal(torch.tensor([0.7, 0.2, 0.1]), "hard").probs
        assert out.tolist() == [1.0, 0.0, 0.0]

    def test_top2_renormalized(self):
        out = degrade_signal(torch.tensor([0.5, 0.3, 0.2], dtype=torch.float64), ("top_k", 2)).probs
        np.testing.assert_allclose(out.numpy(), [0.625, 0.375, 0.0], atol=1e-12)

    def test_top_k_without_renormalization(self):
        out = degrade_signal(torch.tensor([0.5, 0.3, 0.2]), "top2", renormalize=False).probs
        np.testing.assert_allclose(out.numpy(), [0.5, 0.3, 0.0], atol=1e-7)

    def test_k_larger_than_classes(self):
        with pytest.raises(ConfigError):
            degrade_signal(torch.tensor([0.5, 0.5]), "top5")

    def test_simplex_and_hard_entropy(self):
        p = torch.softmax(torch.randn(100, 10, dtype=torch.float64), -1)
        for mode in ("full", "top5", "hard"):
            out = degrade_signal(p, mode).probs
            assert (out >= 0).all()
            torch.testing.assert_close(out.sum(-1), torch.ones(100, dtype=torch.float64))
        hard = degrade_signal(p, "hard").probs
        entropy = -(torch.xlogy(hard, hard)).sum(-1)
        assert (entropy == 0).all()

    def test_ties_go_to_lower_index(self):
        out = degrade_signal(torch.tensor([0.25, 0.25, 0.25, 0.25]), "top2").probs
        assert out.tolist() == [0.5, 0.5, 0.0, 0.0]

    @pytest.mark.parametrize("text,expected", [("full", SignalMode("full")), ("top5", SignalMode("top_k", 5)),
                                               ("top_5", SignalMode("top_k", 5)), ("hard", SignalMode("hard"))])
    def test_parse(self, text, expected):
        assert SignalMode.parse(text) == expected

    def test_parse_rejects_garbage(self):
        with pytest.raises(ConfigError):
            SignalMode.parse("soft-ish")
