"""Acceptance criteria 1-11, each at its stated tolerance.

Criteria 6, 7 and 11 need CIFAR-10 and a pilot teacher; the runs are cached
under the data root (``ONEDATUM_DATA``) so an interrupted overnight session
resumes. Without the data they fail with the missing prerequisite named.
"""
import hashlib
import math
import os
import socket
from pathlib import Path

import numpy as np
import pytest
import torch

from onedatum.audioforge.spectrogram import SpectrogramConfig, compute_logmel
from onedatum.cli import datasets, runs
from onedatum.cli.teacher import TeacherConfig, SupervisedImages, train_supervised
from onedatum.compress import (CompressionPlan, compress_with_self_distillation, dequantize, prunable,
                               quantize_tensor)
from onedatum.distillery import DistillConfig, cutmix, kd_loss, mixup, soften
from onedatum.errors import MissingPrerequisiteError
from onedatum.lens import linear_cka
from onedatum.lens.gist import count_modes, gist_descriptor, gist_distance_histogram
from onedatum.modelzoo import build_model, load_checkpoint, save_checkpoint, spec_from_name, state_digest
from onedatum.patchforge import PatchConfig, generate_records, stock_image

pytestmark = pytest.mark.acceptance

GOLDEN_CITY_P32_S0 = "5332ebbe6a8a512f8d71c3689c24684f5a2904241a0a71193907ca07bbd5b21b"

# student top-1 floor for the City pilot run; no oracle pilot has been run to recalibrate it yet
PILOT_TOP1_FLOOR = 0.50
NOISE_MARGIN = 0.20
ORDER_SLACK = 0.01
TEACHER_FLOOR = 0.88
PILOT_TEACHER_ENV = "ONEDATUM_PILOT_TEACHER"


def _softmax(v, tau):
    e = [math.exp(x / tau) for x in v]
    return [x / sum(e) for x in e]


def _kl_oracle(t, s, tau):
    p, q = _softmax(t, tau), _softmax(s, tau)
    return sum(a * math.log(a / b) for a, b in zip(p, q))


# -- 1 ------------------------------------------------------------------------------

@pytest.mark.criterion(1)
def test_kd_gradient_matches_finite_differences():
    rng = np.random.default_rng(0)
    h = 1e-6
    worst = 0.0
    for _ in range(100):
        tau = float(rng.choice([1.0, 2.0, 4.0, 8.0]))
        t = torch.from_numpy(rng.normal(0, 3, 10))
        s = torch.from_numpy(rng.normal(0, 3, 10)).requires_grad_(True)
        kd_loss(t, s, tau).backward()
        fd = torch.zeros(10, dtype=torch.float64)
        base = s.detach().clone()
        for i in range(10):
            up, down = base.clone(), base.clone()
            up[i] += h
            down[i] -= h
            fd[i] = (kd_loss(t, up, tau) - kd_loss(t, down, tau)) / (2 * h)
        worst = max(worst, ((s.grad - fd).norm() / fd.norm()).item())
    assert worst <= 1e-5


@pytest.mark.criterion(1)
def test_kd_identical_logits_exactly_zero():
    rng = np.random.default_rng(1)
    for _ in range(100):
        t = torch.from_numpy(rng.normal(0, 5, (4, 10)))
        for tau in (0.5, 1.0, 8.0, 64.0):
            assert kd_loss(t, t.clone(), tau).item() == 0.0


@pytest.mark.criterion(1)
def test_kd_two_class_closed_form():
    got = kd_loss(torch.tensor([2.0, 0.0], dtype=torch.float64), torch.tensor([0.0, 2.0], dtype=torch.float64),
                  1.0).item()
    assert abs(got - _kl_oracle([2, 0], [0, 2], 1.0)) <= 1e-12
    assert abs(got - 1.523188) <= 1e-5


# -- 2 ------------------------------------------------------------------------------

@pytest.mark.criterion(2)
def test_argmax_invariant_to_temperature():
    logits = torch.from_numpy(np.random.default_rng(2).normal(0, 4, (1000, 10)))
    ref = soften(logits, 1.0).argmax(-1)
    for tau in (0.5, 1.0, 8.0, 64.0):
        assert torch.equal(soften(logits, tau).argmax(-1), ref)


# -- 3 ------------------------------------------------------------------------------

@pytest.mark.criterion(3)
def test_city_patches_reproducible_and_golden():
    city = stock_image("city")
    cfg = PatchConfig(patch_size=32, count=1000, global_seed=0)
    first = generate_records(city, cfg, workers=1)
    second = generate_records(city, cfg, workers=1)
    four = generate_records(city, cfg, workers=4)
    assert first.shape == (1000, 32, 32, 3) and first.dtype == np.uint8
    assert np.array_equal(first, second)
    assert np.array_equal(first, four)
    assert hashlib.sha256(first[0].tobytes()).hexdigest() == GOLDEN_CITY_P32_S0


# -- 4 ------------------------------------------------------------------------------

@pytest.mark.criterion(4)
def test_cutmix_partition_and_lambda():
    g = np.random.default_rng(4)
    for _ in range(256):
        x = torch.from_numpy(g.random((16, 3, 32, 32))).float()
        m = cutmix(x, 0.25, 0.25, g)
        y1, y2, x1, x2 = m.box
        inside = torch.zeros(32, 32, dtype=torch.bool)
        inside[y1:y2, x1:x2] = True
        assert torch.equal(m.inputs[..., inside], x[m.pairing][..., inside])
        assert torch.equal(m.inputs[..., ~inside], x[..., ~inside])
        assert m.lam[0].item() == 1 - ((y2 - y1) * (x2 - x1)) / (32 * 32)


@pytest.mark.criterion(4)
def test_mixup_elementwise_identity():
    g = np.random.default_rng(5)
    for _ in range(256):
        x = torch.from_numpy(g.normal(size=(16, 3, 32, 32))).float()
        m = mixup(x, g)
        lam = m.lam.double().view(-1, 1, 1, 1)
        oracle = lam * x.double() + (1 - lam) * x[m.pairing].double()
        assert (m.inputs.double() - oracle).abs().max().item() <= 1e-6


# -- 5 ------------------------------------------------------------------------------

@pytest.mark.criterion(5)
def test_logmel_shape_and_silence():
    cfg = SpectrogramConfig(sample_rate=16_000, window_ms=25, hop_ms=10, mel_bins=64)
    frames = (16_000 - 400) // 160 + 1
    tone = np.sin(2 * np.pi * 440 * np.arange(16_000) / 16_000).astype(np.float32)
    assert compute_logmel(tone, cfg).shape == (frames, 64) == (98, 64)
    silence = compute_logmel(np.zeros(16_000, np.float32), cfg)
    assert np.all(silence == np.float32(math.log(cfg.eps)))


# -- 6, 7, 11: pilot distillation on CIFAR-10 ---------------------------------------

def _pilot_teacher(root: Path) -> Path:
    explicit = os.environ.get(PILOT_TEACHER_ENV)
    if explicit:
        return Path(explicit)
    shipped = root / "teachers" / "resnet20-cifar10.pt"
    if shipped.exists():
        return shipped
    # no shipped teacher: train the pilot-budget ResNet-20 once and cache it
    out = root / "runs" / "pilot-teacher"
    runs.run_train_teacher({"dataset": "cifar10", "arch": "resnet20", "budget": "pilot", "out": str(out)})
    return out / "checkpoints" / "teacher.pt"


def _pilot_patches(root: Path, image: str) -> Path:
    out = root / "patches" / f"{image}-32-50000"
    if not (out / "records.sid").exists():
        runs.run_gen_patches({"image": f"stock:{image}", "size": 32, "count": 50_000, "seed": 0, "out": str(out)})
    return out


@pytest.fixture(scope="module")
def pilot():
    root = datasets.data_root()
    old = socket.getdefaulttimeout()
    socket.setdefaulttimeout(30)
    try:
        datasets.load_cifar("cifar10", "test")
    except MissingPrerequisiteError as exc:
        pytest.fail(f"CIFAR-10 unavailable, pilot runs cannot start: {exc}")
    finally:
        socket.setdefaulttimeout(old)

    teacher_path = _pilot_teacher(root)
    teacher, _ = load_checkpoint(teacher_path)
    from onedatum.distillery import evaluate
    teacher_top1 = evaluate(teacher, datasets.labeled_set("cifar10", "test"))["top1"]
    if teacher_top1 < TEACHER_FLOOR:
        pytest.fail(f"pilot teacher {teacher_path} reaches {teacher_top1:.3f} < {TEACHER_FLOOR}")

    results = {"teacher_digest": state_digest(teacher)}
    cells = {"city-full": ("city", "full"), "city-top5": ("city", "top5"),
             "city-hard": ("city", "hard"), "noise-full": ("noise", "full")}
    for name, (image, signal) in cells.items():
        results[name] = runs.run_distill({
            "teacher": str(teacher_path), "data": str(_pilot_patches(root, image)),
            "out": str(root / "runs" / f"pilot-{name}"), "dataset": "cifar10", "budget": "pilot",
            "temperature": 8.0, "mix": "cutmix", "signal": signal})
    return results


@pytest.mark.slow
@pytest.mark.criterion(6)
def test_pilot_city_beats_floor_and_noise(pilot):
    city, noise = pilot["city-full"]["val_top1"], pilot["noise-full"]["val_top1"]
    assert city > PILOT_TOP1_FLOOR
    assert city - noise >= NOISE_MARGIN


@pytest.mark.slow
@pytest.mark.criterion(7)
def test_signal_degradation_ordering(pilot):
    full, top5, hard = (pilot[f"city-{s}"]["val_top1"] for s in ("full", "top5", "hard"))
    assert full >= top5 - ORDER_SLACK
    assert top5 >= hard - ORDER_SLACK


@pytest.mark.slow
@pytest.mark.criterion(11)
def test_teacher_unchanged_by_pilot_runs(pilot):
    for name in ("city-full", "city-top5", "city-hard", "noise-full"):
        m = pilot[name]
        assert m["teacher_digest_before"] == m["teacher_digest_after"] == pilot["teacher_digest"]


# -- 8 ------------------------------------------------------------------------------

@pytest.fixture(scope="module")
def trained_checkpoint(tmp_path_factory):
    """A ResNet-20 given 60 supervised SGD steps on colour-coded toy images."""
    g = np.random.default_rng(8)
    labels = np.arange(512) % 10
    images = g.integers(0, 120, (512, 32, 32, 3))
    images[..., 0] += (labels * 13)[:, None, None]
    images = np.clip(images, 0, 255).astype(np.uint8)
    cfg = TeacherConfig(total_steps=60, steps_per_epoch=60, batch_size=32, lr_milestones=(), lr_values=(0.05,))
    model = build_model(spec_from_name("resnet20"), seed=0)
    train_supervised(model, SupervisedImages(images, labels, cfg), cfg)
    path = save_checkpoint(tmp_path_factory.mktemp("ckpt") / "trained.pt", model)
    return path, images


@pytest.mark.criterion(8)
@pytest.mark.parametrize("sparsity", [0.25, 0.5, 0.75, 0.85])
def test_pruning_exact_and_persistent(trained_checkpoint, sparsity):
    path, images = trained_checkpoint
    model, _ = load_checkpoint(path)
    plan = CompressionPlan("prune", sparsity, finetune=DistillConfig(epochs=100, batch_size=32, max_steps=100))
    student, info = compress_with_self_distillation(model, plan, images)
    assert info["history"][-1]["step"] == 100
    for name, mod in prunable(student):
        mask = info["masks"][name]
        n = mask.numel()
        assert abs(int((mask == 0).sum()) - sparsity * n) <= 1
        assert torch.all(mod.weight.detach()[mask == 0] == 0)


@pytest.mark.criterion(8)
def test_quantization_error_bound(trained_checkpoint):
    model, _ = load_checkpoint(trained_checkpoint[0])
    tensors = [mod.weight.detach() for _, mod in prunable(model)]
    assert tensors
    for w in tensors:
        q, scale = quantize_tensor(w)
        err = (dequantize(q, scale, torch.float64) - w.double()).abs()
        # float32 weights: allow one unit of rounding in the comparison itself
        assert err.max().item() <= scale / 2 * (1 + 1e-6)


# -- 9 ------------------------------------------------------------------------------

@pytest.mark.criterion(9)
def test_cka_invariances():
    from scipy.stats import ortho_group

    g = np.random.default_rng(9)
    x = g.normal(size=(500, 64))
    y = x[:, :32] @ g.normal(size=(32, 48)) + g.normal(size=(500, 48))
    assert abs(linear_cka(x, x) - 1) <= 1e-6
    base = linear_cka(x, y)
    q = ortho_group.rvs(64, random_state=9)
    assert abs(linear_cka(x @ q, y) - base) <= 1e-6
    assert abs(linear_cka(x * 123.4, y) - base) <= 1e-6
    assert abs(linear_cka(x, y) - linear_cka(y, x)) <= 1e-9


# -- 10 -----------------------------------------------------------------------------

@pytest.mark.slow
@pytest.mark.criterion(10)
def test_gist_on_city_patches(tmp_path):
    records = generate_records(stock_image("city"), PatchConfig(patch_size=32, count=1000))
    assert gist_descriptor(records[0]).shape == (512,)
    a = gist_descriptor(records[0], normalize=True)
    assert np.linalg.norm(a - gist_descriptor(records[0].copy(), normalize=True)) == 0.0
    counts, edges, d = gist_distance_histogram(list(records))
    assert counts.sum() == len(d) == 1000 * 999 // 2
    np.savez(tmp_path / "gist_hist.npz", counts=counts, edges=edges)
    assert (tmp_path / "gist_hist.npz").exists()
    assert count_modes(counts) == 1
    flat = sum(int(r.std() == 0) for r in records)
    assert d.max() < 2
    assert d.min() > 0, (f"{int((d == 0).sum())} zero distances: {flat} patches are a single flat colour "
                         f"(bright crops saturated by colour jitter), so their descriptors coincide")
