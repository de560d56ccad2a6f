import pytest
import torch

from onedatum.errors import ConfigError
from onedatum.modelzoo import (ModelSpec, build_audio_cnn, build_model, count_parameters, load_checkpoint,
                               read_checkpoint, save_checkpoint, spec_from_name, state_digest)

GOLDEN_PARAMS = {
    "resnet20": 269_722,
    "resnet56": 853_018,
    "wrn16-2": 691_674,
    "wrn16-4": 2_748_890,
    "wrn40-4": 8_949_210,
    "vgg11": 9_231_114,
    "vgg19": 20_040_522,
}


def wrn_param_oracle(depth, k, classes=10):
    """Closed-form parameter count of a pre-activation wide ResNet."""
    n = (depth - 4) // 6
    total = 3 * 16 * 9
    cin = 16
    for cout in (16 * k, 32 * k, 64 * k):
        for j in range(n):
            total += 2 * cin + 9 * cin * cout + 2 * cout + 9 * cout * cout
            if cin != cout or j == 0 and cout != 16 * k:
                total += cin * cout
            cin = cout
    return total + 2 * cin + cin * classes + classes


def resnet_param_oracle(depth, classes=10):
    n = (depth - 2) // 6
    total = 3 * 16 * 9 + 2 * 16
    cin = 16
    for cout in (16, 32, 64):
        for _ in range(n):
            total += 9 * cin * cout + 2 * cout + 9 * cout * cout + 2 * cout
            cin = cout
    return total + 64 * classes + classes


@pytest.mark.parametrize("name,count", GOLDEN_PARAMS.items())
def test_parameter_counts(name, count):
    assert count_parameters(build_model(spec_from_name(name))) == count


@pytest.mark.parametrize("depth,k", [(16, 2), (16, 4), (40, 4), (28, 10)])
def test_wrn_matches_closed_form(depth, k):
    assert count_parameters(build_model(spec_from_name(f"wrn{depth}-{k}"))) == wrn_param_oracle(depth, k)


@pytest.mark.parametrize("depth", [8, 20, 32, 56])
def test_resnet_matches_closed_form(depth):
    assert count_parameters(build_model(spec_from_name(f"resnet{depth}"))) == resnet_param_oracle(depth)


@pytest.mark.parametrize("name", ["resnet57", "wrn17-2", "vgg12", "alexnet"])
def test_invalid_names(name):
    with pytest.raises(ConfigError):
        build_model(spec_from_name(name))


def test_bad_family_and_classes():
    with pytest.raises(ConfigError):
        build_model(ModelSpec("mlp"))
    with pytest.raises(ConfigError):
        build_model(spec_from_name("resnet20", num_classes=0))
    with pytest.raises(ConfigError):
        build_audio_cnn(1)


@pytest.mark.parametrize("name", ["resnet20", "wrn16-2", "vgg11"])
def test_image_output_shape(name):
    model = build_model(spec_from_name(name, num_classes=100)).eval()
    assert model(torch.rand(2, 3, 32, 32)).shape == (2, 100)


def test_audio_cnn_shapes():
    model = build_audio_cnn(35).eval()
    assert count_parameters(model) == 138_171
    x = torch.randn(3, 1, 98, 64)
    assert model.backbone.features(x).shape == (3, 128, 7, 4)
    assert model(x).shape == (3, 35)
    assert model(x[:, 0]).shape == (3, 35)
    assert model.regularization_loss().item() > 0


def test_seeded_determinism():
    spec = spec_from_name("resnet20")
    assert state_digest(build_model(spec, seed=3)) == state_digest(build_model(spec, seed=3))
    assert state_digest(build_model(spec, seed=3)) != state_digest(build_model(spec, seed=4))


def test_build_does_not_touch_global_rng():
    torch.manual_seed(0)
    expected = torch.rand(3)
    torch.manual_seed(0)
    build_model(spec_from_name("resnet8"), seed=9)
    assert torch.equal(torch.rand(3), expected)


def test_normalization_inside_model():
    model = build_model(spec_from_name("resnet8"))
    x = torch.full((1, 3, 2, 2), 0.4914)
    assert model.normalize(x)[0, 0].abs().max().item() < 1e-6


def test_digest_sees_buffers():
    model = build_model(spec_from_name("resnet8"))
    before = state_digest(model)
    model.train()
    model(torch.rand(4, 3, 32, 32))
    assert state_digest(model) != before


def test_checkpoint_round_trip(tmp_path):
    model = build_model(spec_from_name("wrn16-2", num_classes=7), seed=1)
    model.train()
    model(torch.rand(4, 3, 32, 32))  # move batch-norm statistics off their init
    save_checkpoint(tmp_path / "m.pt", model, {"note": "x"})
    loaded, payload = load_checkpoint(tmp_path / "m.pt")
    assert state_digest(loaded) == state_digest(model)
    assert loaded.spec == model.spec and payload["metadata"] == {"note": "x"}
    x = torch.rand(2, 3, 32, 32)
    assert torch.equal(loaded.eval()(x), model.eval()(x))


def test_checkpoint_rejects_foreign_files(tmp_path):
    torch.save({"weights": 1}, tmp_path / "x.pt")
    with pytest.raises(ConfigError):
        read_checkpoint(tmp_path / "x.pt")


def test_spec_round_trip():
    spec = spec_from_name("wrn40-4", num_classes=100)
    assert ModelSpec.from_dict(spec.to_dict()) == spec
    assert spec.name == "wrn40-4"
