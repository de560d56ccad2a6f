"""Teacher and student architectures, plus the checkpoint format.

Image models take float inputs in ``[0, 1]`` laid out ``N x C x H x W`` and
normalize internally, so a teacher and a student always consume the very
same tensor. The audio model takes ``N x 1 x T x F`` log-Mel spectrograms.
"""
from __future__ import annotations

import dataclasses
import hashlib
import re
from dataclasses import dataclass, field
from pathlib import Path

import torch
import torch.nn as nn
import torch.nn.functional as F

from onedatum.errors import ConfigError

CIFAR10_MEAN = (0.4914, 0.4822, 0.4465)
CIFAR10_STD = (0.2470, 0.2435, 0.2616)
CHECKPOINT_FORMAT = "onedatum-checkpoint"
CHECKPOINT_VERSION = 1

FAMILIES = ("cifar-resnet", "vgg", "wideresnet", "audio-cnn")
VGG_LAYERS = {
    11: [64, "M", 128, "M", 256, 256, "M", 512, 512, "M", 512, 512, "M"],
    13: [64, 64, "M", 128, 128, "M", 256, 256, "M", 512, 512, "M", 512, 512, "M"],
    16: [64, 64, "M", 128, 128, "M", 256, 256, 256, "M", 512, 512, 512, "M", 512, 512, 512, "M"],
    19: [64, 64, "M", 128, 128, "M", 256, 256, 256, 256, "M", 512, 512, 512, 512, "M",
         512, 512, 512, 512, "M"],
}
AUDIO_CHANNELS = (24, 32, 64, 128)


@dataclass(frozen=True)
class ModelSpec:
    family: str
    num_classes: int = 10
    depth: int = 20
    width: int = 1
    input_shape: tuple[int, ...] = (3, 32, 32)
    dropout: float = 0.0
    mean: tuple[float, ...] | None = CIFAR10_MEAN
    std: tuple[float, ...] | None = CIFAR10_STD
    extra: dict = field(default_factory=dict, compare=False)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelSpec":
        d = dict(d)
        for key in ("input_shape", "mean", "std"):
            if d.get(key) is not None:
                d[key] = tuple(d[key])
        return cls(**d)

    @property
    def name(self) -> str:
        if self.family == "cifar-resnet":
            return f"resnet{self.depth}"
        if self.family == "wideresnet":
            return f"wrn{self.depth}-{self.width}"
        if self.family == "vgg":
            return f"vgg{self.depth}"
        return self.family


def spec_from_name(name: str, num_classes: int = 10, input_shape=None, **kw) -> ModelSpec:
    """Parse preset names such as ``resnet20``, ``wrn16-4``, ``vgg11`` or ``audio-cnn``."""
    name = name.lower()
    if name == "audio-cnn":
        return ModelSpec("audio-cnn", num_classes=num_classes, depth=4,
                         input_shape=tuple(input_shape or (1, 98, 64)), mean=None, std=None, **kw)
    shape = tuple(input_shape or (3, 32, 32))
    if m := re.fullmatch(r"resnet(\d+)", name):
        return ModelSpec("cifar-resnet", num_classes, int(m[1]), 1, shape, **kw)
    if m := re.fullmatch(r"wrn-?(\d+)-(\d+)", name):
        return ModelSpec("wideresnet", num_classes, int(m[1]), int(m[2]), shape, **kw)
    if m := re.fullmatch(r"vgg(\d+)", name):
        return ModelSpec("vgg", num_classes, int(m[1]), 1, shape, **kw)
    raise ConfigError(f"unknown architecture {name!r}")


class Normalize(nn.Module):
    def __init__(self, mean, std):
        super().__init__()
        self.register_buffer("mean", torch.tensor(mean).view(1, -1, 1, 1))
        self.register_buffer("std", torch.tensor(std).view(1, -1, 1, 1))

    def forward(self, x):
        return (x - self.mean) / self.std


# -- CIFAR ResNet (6n+2, identity shortcuts with zero-padded channels) --------

class _ResBlock(nn.Module):
    def __init__(self, cin, cout, stride):
        super().__init__()
        self.conv1 = nn.Conv2d(cin, cout, 3, stride, 1, bias=False)
        self.bn1 = nn.BatchNorm2d(cout)
        self.conv2 = nn.Conv2d(cout, cout, 3, 1, 1, bias=False)
        self.bn2 = nn.BatchNorm2d(cout)
        self.stride = stride
        self.pad = cout - cin

    def shortcut(self, x):
        if self.stride == 1 and self.pad == 0:
            return x
        x = x[:, :, ::self.stride, ::self.stride]
        return F.pad(x, (0, 0, 0, 0, self.pad // 2, self.pad - self.pad // 2))

    def forward(self, x):
        out = F.relu(self.bn1(self.conv1(x)))
        out = self.bn2(self.conv2(out))
        return F.relu(out + self.shortcut(x))


class CifarResNet(nn.Module):
    def __init__(self, depth, num_classes, in_channels=3):
        super().__init__()
        if depth < 8 or (depth - 2) % 6:
            raise ConfigError(f"cifar-resnet depth must be 6n+2 (>= 8), got {depth}")
        n = (depth - 2) // 6
        self.conv1 = nn.Conv2d(in_channels, 16, 3, 1, 1, bias=False)
        self.bn1 = nn.BatchNorm2d(16)
        layers, cin = [], 16
        for i, cout in enumerate((16, 32, 64)):
            blocks = []
            for j in range(n):
                blocks.append(_ResBlock(cin, cout, 2 if (i > 0 and j == 0) else 1))
                cin = cout
            layers.append(nn.Sequential(*blocks))
        self.layer1, self.layer2, self.layer3 = layers
        self.fc = nn.Linear(64, num_classes)

    def forward(self, x):
        x = F.relu(self.bn1(self.conv1(x)))
        x = self.layer3(self.layer2(self.layer1(x)))
        return self.fc(torch.flatten(F.adaptive_avg_pool2d(x, 1), 1))


# -- Wide ResNet ---------------------------------------------------------------

class _WideBlock(nn.Module):
    def __init__(self, cin, cout, stride, dropout):
        super().__init__()
        self.bn1 = nn.BatchNorm2d(cin)
        self.conv1 = nn.Conv2d(cin, cout, 3, stride, 1, bias=False)
        self.bn2 = nn.BatchNorm2d(cout)
        self.conv2 = nn.Conv2d(cout, cout, 3, 1, 1, bias=False)
        self.dropout = dropout
        self.shortcut = None
        if cin != cout or stride != 1:
            self.shortcut = nn.Conv2d(cin, cout, 1, stride, 0, bias=False)

    def forward(self, x):
        o = F.relu(self.bn1(x))
        y = self.conv1(o)
        y = F.relu(self.bn2(y))
        if self.dropout > 0:
            y = F.dropout(y, self.dropout, self.training)
        y = self.conv2(y)
        return y + (x if self.shortcut is None else self.shortcut(o))


class WideResNet(nn.Module):
    def __init__(self, depth, widen, num_classes, dropout=0.0, in_channels=3):
        super().__init__()
        if depth < 10 or (depth - 4) % 6:
            raise ConfigError(f"wideresnet depth must be 6n+4 (>= 10), got {depth}")
        if widen < 1:
            raise ConfigError("wideresnet width must be >= 1")
        n = (depth - 4) // 6
        widths = [16, 16 * widen, 32 * widen, 64 * widen]
        self.conv1 = nn.Conv2d(in_channels, widths[0], 3, 1, 1, bias=False)
        stages, cin = [], widths[0]
        for i, cout in enumerate(widths[1:]):
            blocks = []
            for j in range(n):
                blocks.append(_WideBlock(cin, cout, 2 if (i > 0 and j == 0) else 1, dropout))
                cin = cout
            stages.append(nn.Sequential(*blocks))
        self.block1, self.block2, self.block3 = stages
        self.bn = nn.BatchNorm2d(cin)
        self.fc = nn.Linear(cin, num_classes)

    def forward(self, x):
        x = self.block3(self.block2(self.block1(self.conv1(x))))
        x = F.relu(self.bn(x))
        return self.fc(torch.flatten(F.adaptive_avg_pool2d(x, 1), 1))


# -- VGG with batch norm -------------------------------------------------------

class VGG(nn.Module):
    def __init__(self, depth, num_classes, in_channels=3):
        super().__init__()
        if depth not in VGG_LAYERS:
            raise ConfigError(f"vgg depth must be one of {sorted(VGG_LAYERS)}, got {depth}")
        layers, cin = [], in_channels
        for v in VGG_LAYERS[depth]:
            if v == "M":
                layers.append(nn.MaxPool2d(2, 2))
            else:
                layers += [nn.Conv2d(cin, v, 3, padding=1), nn.BatchNorm2d(v), nn.ReLU(inplace=True)]
                cin = v
        self.features = nn.Sequential(*layers)
        self.fc = nn.Linear(512, num_classes)

    def forward(self, x):
        x = F.adaptive_avg_pool2d(self.features(x), 1)
        return self.fc(torch.flatten(x, 1))


# -- audio CNN -------------------------------------------------------------

class _AudioBlock(nn.Module):
    """Parallel time (4x1) and frequency (1x4) convolutions fused by a 1x1 convolution."""

    def __init__(self, cin, cout):
        super().__init__()
        # length-preserving padding for an even kernel: 1 before, 2 after
        self.conv_time = nn.Sequential(nn.ZeroPad2d((0, 0, 1, 2)), nn.Conv2d(cin, cout, (4, 1)))
        self.conv_freq = nn.Sequential(nn.ZeroPad2d((1, 2, 0, 0)), nn.Conv2d(cin, cout, (1, 4)))
        self.fuse = nn.Conv2d(2 * cout, cout, 1)
        self.norm = nn.GroupNorm(min(8, cout), cout)

    def forward(self, x):
        y = torch.cat([F.relu(self.conv_time(x)), F.relu(self.conv_freq(x))], dim=1)
        return F.relu(self.norm(self.fuse(y)))


class AudioCNN(nn.Module):
    l2_rate = 1e-4

    def __init__(self, num_classes, channels=AUDIO_CHANNELS, dropout=0.2):
        super().__init__()
        blocks, cin = [], 1
        for c in channels:
            blocks += [_AudioBlock(cin, c), nn.MaxPool2d(2, ceil_mode=True), nn.Dropout2d(dropout)]
            cin = c
        self.features = nn.Sequential(*blocks)
        self.fc = nn.Linear(cin, num_classes)

    def forward(self, x):
        if x.dim() == 3:
            x = x.unsqueeze(1)
        x = self.features(x)
        return self.fc(torch.amax(x, dim=(2, 3)))

    def regularization_loss(self):
        convs = [m.weight for m in self.modules() if isinstance(m, nn.Conv2d)]
        return self.l2_rate * sum(w.pow(2).sum() for w in convs)


class Classifier(nn.Module):
    """Input normalization followed by a backbone; carries its :class:`ModelSpec`."""

    def __init__(self, spec: ModelSpec, backbone: nn.Module):
        super().__init__()
        self.spec = spec
        self.normalize = Normalize(spec.mean, spec.std) if spec.mean is not None else nn.Identity()
        self.backbone = backbone

    def forward(self, x):
        return self.backbone(self.normalize(x))

    def regularization_loss(self):
        reg = getattr(self.backbone, "regularization_loss", None)
        return reg() if reg is not None else None


def _init_weights(model: nn.Module, head: nn.Linear) -> None:
    for m in model.modules():
        if isinstance(m, nn.Conv2d):
            nn.init.kaiming_normal_(m.weight, mode="fan_out", nonlinearity="relu")
            if m.bias is not None:
                nn.init.zeros_(m.bias)
        elif isinstance(m, (nn.BatchNorm2d, nn.GroupNorm)):
            nn.init.ones_(m.weight)
            nn.init.zeros_(m.bias)
    nn.init.zeros_(head.bias)


def build_model(spec: ModelSpec, seed: int = 0) -> Classifier:
    """Instantiate ``spec`` with a seeded initialization."""
    if spec.family not in FAMILIES:
        raise ConfigError(f"unknown model family {spec.family!r}; choose from {FAMILIES}")
    if spec.num_classes < 1:
        raise ConfigError("num_classes must be positive")
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        in_ch = spec.input_shape[0]
        if spec.family == "cifar-resnet":
            backbone = CifarResNet(spec.depth, spec.num_classes, in_ch)
        elif spec.family == "wideresnet":
            backbone = WideResNet(spec.depth, spec.width, spec.num_classes, spec.dropout, in_ch)
        elif spec.family == "vgg":
            backbone = VGG(spec.depth, spec.num_classes, in_ch)
        else:
            if spec.num_classes < 2:
                raise ConfigError("audio-cnn needs at least 2 classes")
            backbone = AudioCNN(spec.num_classes)
        _init_weights(backbone, backbone.fc)
    return Classifier(spec, backbone)


def build_audio_cnn(num_classes: int, seed: int = 0) -> Classifier:
    return build_model(spec_from_name("audio-cnn", num_classes), seed)


def count_parameters(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters())


def state_digest(model: nn.Module) -> str:
    """SHA-256 over every parameter and buffer (incl. normalization statistics)."""
    h = hashlib.sha256()
    for name, t in sorted(model.state_dict().items()):
        t = t.detach().cpu().contiguous()
        h.update(name.encode())
        h.update(str(t.dtype).encode())
        h.update(str(tuple(t.shape)).encode())
        h.update(t.numpy().tobytes() if t.dtype != torch.bfloat16 else t.float().numpy().tobytes())
    return h.hexdigest()


def save_checkpoint(path, model: Classifier, metadata: dict | None = None, **extra) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "spec": model.spec.to_dict() if hasattr(model, "spec") else None,
        "state_dict": model.state_dict(),
        "metadata": metadata or {},
        **extra,
    }
    tmp = path.with_name(path.name + ".tmp")
    torch.save(payload, tmp)
    tmp.replace(path)
    return path


def read_checkpoint(path) -> dict:
    payload = torch.load(Path(path), map_location="cpu", weights_only=False)
    if not isinstance(payload, dict) or payload.get("format") != CHECKPOINT_FORMAT:
        raise ConfigError(f"{path} is not an onedatum checkpoint")
    if payload.get("version", 0) > CHECKPOINT_VERSION:
        raise ConfigError(f"{path}: checkpoint version {payload['version']} is newer than supported")
    return payload


def load_checkpoint(path) -> tuple[Classifier, dict]:
    """Rebuild the model stored at ``path``; returns ``(model, payload)``."""
    payload = read_checkpoint(path)
    model = build_model(ModelSpec.from_dict(payload["spec"]))
    model.load_state_dict(payload["state_dict"])
    return model, payload
