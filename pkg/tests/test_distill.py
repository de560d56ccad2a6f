import copy
import math

import numpy as np
import pytest
import torch

from onedatum.distillery import (DistillConfig, LabeledSet, distill, distillation_loss, evaluate, flip_crop,
                                 preset, read_metrics)
from onedatum.distillery.optim import build_optimizer, build_scheduler, lr_multiplier
from onedatum.errors import ConfigError, PreconditionError, TrainingDivergedError
from onedatum.modelzoo import build_model, spec_from_name, state_digest


def patches(n=64, size=32, seed=0):
    return np.random.default_rng(seed).integers(0, 256, (n, size, size, 3), dtype=np.uint8)


def small(seed=0, classes=10):
    return build_model(spec_from_name("resnet8", num_classes=classes), seed=seed)


def cfg(**kw):
    base = dict(epochs=1, batch_size=16, mix="cutmix", seed=0)
    base.update(kw)
    return DistillConfig(**base)


def params_digest(model):
    return [p.detach().clone() for p in model.parameters()]


class TestConfig:
    def test_defaults(self):
        c = DistillConfig()
        assert (c.temperature, c.optimizer, c.lr, c.batch_size, c.mix) == (8.0, "adam", 1e-3, 512, "cutmix")
        assert (c.cutmix_alpha, c.cutmix_beta) == (0.25, 0.25)

    def test_presets(self):
        large = preset("large-scale")
        assert (large.optimizer, large.lr, large.weight_decay, large.schedule) == ("adamw", 0.01, 1e-4, "cosine")
        assert (large.cutmix_alpha, large.cutmix_beta) == (1.0, 1.0)
        assert preset("audio").mix == "mixup"
        with pytest.raises(ConfigError):
            preset("huge")

    @pytest.mark.parametrize("kw", [{"temperature": 0}, {"loss_kind": "ce"}, {"mix": "mosaic"},
                                    {"loss_kind": "l2", "signal_mode": "top5"}, {"optimizer": "lion"},
                                    {"cutmix_alpha": 0.0}, {"batch_size": 0}, {"signal_mode": "top0"}])
    def test_invalid(self, kw):
        with pytest.raises(ConfigError):
            DistillConfig(**kw)

    def test_round_trip(self):
        c = DistillConfig(schedule="piecewise", lr_milestones=(5,), lr_values=(0.1, 0.01))
        assert DistillConfig.from_dict(c.to_dict()) == c
        with pytest.raises(ConfigError):
            DistillConfig.from_dict({"bogus": 1})


class TestLoss:
    def test_copy_of_teacher_has_zero_loss(self):
        teacher = small().eval()
        student = copy.deepcopy(teacher).eval()
        x = torch.rand(8, 3, 32, 32)
        with torch.no_grad():
            assert distillation_loss(teacher(x), student(x), cfg()).item() == 0.0
            # a degraded target differs from the copy's full distribution
            assert distillation_loss(teacher(x), student(x), cfg(signal_mode="hard")).item() > 0
            assert distillation_loss(teacher(x), student(x), cfg(loss_kind="l2")).item() == 0.0

    def test_copy_of_teacher_first_step_loss(self):
        # no mixing, no batch-statistic drift: first training loss is the eval-mode KL
        teacher = build_model(spec_from_name("audio-cnn", num_classes=4)).eval()
        student = copy.deepcopy(teacher)
        for m in student.modules():
            if isinstance(m, torch.nn.Dropout2d):
                m.p = 0.0
        data = torch.randn(16, 1, 98, 64)
        res = distill(teacher, student, data, cfg(mix="none", lr=0.0, standard_aug=False))
        assert res.history[0]["train_loss"] == pytest.approx(0.0, abs=1e-7)


class TestLoop:
    def test_zero_lr_keeps_weights(self):
        teacher, student = small(0), small(1)
        before = params_digest(student)
        distill(teacher, student, patches(), cfg(lr=0.0))
        for a, b in zip(before, student.parameters()):
            assert torch.equal(a, b)

    def test_teacher_untouched(self):
        teacher, student = small(0), small(1)
        teacher.train()  # the loop must freeze it regardless
        digest = state_digest(teacher)
        res = distill(teacher, student, patches(), cfg(epochs=2))
        assert state_digest(teacher) == digest == res.teacher_digest
        assert not teacher.training
        assert all(not p.requires_grad for p in teacher.parameters())

    def test_student_learns(self):
        teacher, student = small(0), small(1)
        x = patches(128, seed=1)
        res = distill(teacher, student, x, cfg(epochs=4, batch_size=32, mix="none", standard_aug=False))
        losses = [r["train_loss"] for r in res.history]
        assert losses[-1] < losses[0]

    def test_head_mismatch(self):
        with pytest.raises(PreconditionError):
            distill(small(classes=10), small(classes=5), patches(), cfg())

    def test_empty_data(self):
        with pytest.raises(PreconditionError):
            distill(small(), small(1), patches(0), cfg())

    def test_divergence_is_reported(self, tmp_path):
        class Broken(torch.nn.Module):
            def __init__(self):
                super().__init__()
                self.inner = small()

            def forward(self, x):
                return self.inner(x) * float("nan")

        with pytest.raises(TrainingDivergedError):
            distill(Broken(), small(1), patches(), cfg(), sink=tmp_path)
        records = read_metrics(tmp_path)
        assert records[-1]["event"] == "diverged"
        assert math.isnan(records[-1]["loss"])

    def test_same_tensor_to_both(self):
        seen = {}

        def hook(name):
            def f(module, args):
                seen.setdefault(name, []).append(args[0].detach().clone())
            return f

        teacher, student = small(0), small(1)
        teacher.register_forward_pre_hook(hook("t"))
        student.register_forward_pre_hook(hook("s"))
        distill(teacher, student, patches(32), cfg(max_steps=2))
        # the first pair is the head-compatibility probe; the rest are training steps
        assert len(seen["t"]) == len(seen["s"]) == 3
        for a, b in zip(seen["t"], seen["s"]):
            assert torch.equal(a, b)

    def test_max_steps(self):
        res = distill(small(), small(1), patches(), cfg(epochs=10, max_steps=3))
        assert res.steps == 3

    def test_small_dataset_single_batch(self):
        res = distill(small(), small(1), patches(5), cfg(batch_size=16, epochs=2))
        assert res.steps == 2

    def test_metrics_and_checkpoints(self, tmp_path):
        labels = np.arange(20) % 10
        ev = LabeledSet(patches(20, seed=3), labels, 10)
        distill(small(), small(1), patches(), cfg(epochs=2, log_per_class=True), sink=tmp_path, eval_set=ev)
        records = read_metrics(tmp_path / "metrics.log")
        assert [r["epoch"] for r in records] == [0, 1]
        for r in records:
            assert {"train_loss", "val_top1", "lr", "step", "wall_seconds", "per_class_top1"} <= set(r)
            assert 0 <= r["val_top1"] <= 1 and len(r["per_class_top1"]) == 10
        for name in ("last.pt", "best.pt", "student.pt"):
            assert (tmp_path / "checkpoints" / name).exists()

    def test_resume_matches_uninterrupted(self, tmp_path):
        data = patches(48)
        full = small(1)
        distill(small(0), full, data, cfg(epochs=3), sink=tmp_path / "a")

        part = small(1)
        distill(small(0), part, data, cfg(epochs=1), sink=tmp_path / "b")
        resumed = small(1)
        res = distill(small(0), resumed, data, cfg(epochs=3), sink=tmp_path / "b")
        assert state_digest(resumed) == state_digest(full)
        assert [r["epoch"] for r in res.history] == [0, 1, 2]
        a = [r["train_loss"] for r in read_metrics(tmp_path / "a")]
        b = [r["train_loss"] for r in read_metrics(tmp_path / "b")]
        assert a == b

    def test_reproducible(self):
        data = patches(48)
        a, b = small(1), small(1)
        distill(small(0), a, data, cfg(epochs=2, mix="mixup"))
        distill(small(0), b, data, cfg(epochs=2, mix="mixup"))
        assert state_digest(a) == state_digest(b)


class TestAugmentAndEval:
    def test_flip_crop_shape_and_content(self):
        x = torch.rand(6, 3, 8, 8)
        out = flip_crop(x, np.random.default_rng(0))
        assert out.shape == x.shape
        # a crop of the zero-padded image: every output value is 0 or present in the source
        for i in range(6):
            vals = set(x[i].flatten().tolist()) | {0.0}
            assert set(out[i].flatten().tolist()) <= vals

    def test_evaluate_per_class(self):
        class Fixed(torch.nn.Module):
            def forward(self, x):
                out = torch.zeros(len(x), 3)
                out[:, 1] = 1.0
                return out

        ev = LabeledSet(torch.zeros(6, 2), np.array([0, 1, 1, 2, 2, 2]), 3)
        res = evaluate(Fixed(), ev)
        assert res["top1"] == pytest.approx(2 / 6)
        assert res["per_class"] == [0.0, 1.0, 0.0]


class TestSchedules:
    def _lrs(self, schedule, steps, base=0.1, **kw):
        opt = build_optimizer([torch.nn.Parameter(torch.zeros(1))], "sgd", base)
        sched = build_scheduler(opt, schedule, steps, base, **kw)
        out = []
        for _ in range(steps):
            out.append(opt.param_groups[0]["lr"])
            opt.step()
            sched.step()
        return out

    def test_piecewise(self):
        lrs = self._lrs("piecewise", 8, 0.01, milestones=(2, 5), values=(0.01, 0.1, 0.001))
        np.testing.assert_allclose(lrs, [0.01, 0.01, 0.1, 0.1, 0.1, 0.001, 0.001, 0.001])

    def test_cosine_endpoints(self):
        lrs = self._lrs("cosine", 11)
        assert lrs[0] == pytest.approx(0.1)
        assert lrs[5] == pytest.approx(0.1 * 0.5 * (1 + math.cos(math.pi * 5 / 11)))
        assert lrs[-1] < lrs[1]

    def test_warmup(self):
        lrs = self._lrs("constant", 6, warmup_steps=4)
        np.testing.assert_allclose(lrs, [0.025, 0.05, 0.075, 0.1, 0.1, 0.1])

    def test_bad_piecewise(self):
        with pytest.raises(ConfigError):
            lr_multiplier("piecewise", 10, 0.1, milestones=(5,), values=(0.1,))
        with pytest.raises(ConfigError):
            lr_multiplier("step", 10, 0.1)
        with pytest.raises(ConfigError):
            build_optimizer([torch.nn.Parameter(torch.zeros(1))], "rmsprop", 0.1)
