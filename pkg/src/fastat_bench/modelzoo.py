"""Benchmark architectures: CIFAR-style ResNet-18, PreActResNet-18, and a desk-scale CNN.

Every model starts with a fixed normalization layer so inputs stay in raw
pixel space.
"""
from collections import OrderedDict
from pathlib import Path

import torch
import torch.nn as nn
import torch.nn.functional as F

ARCHS = ("resnet18", "preactresnet18", "tiny-cnn")


class Normalize(nn.Module):
    def __init__(self, mean, std):
        super().__init__()
        self.register_buffer("mean", torch.tensor(mean, dtype=torch.float32).view(1, -1, 1, 1))
        self.register_buffer("std", torch.tensor(std, dtype=torch.float32).view(1, -1, 1, 1))

    def forward(self, x):
        return (x - self.mean) / self.std


class BasicBlock(nn.Module):
    expansion = 1

    def __init__(self, in_planes, planes, stride=1):
        super().__init__()
        self.conv1 = nn.Conv2d(in_planes, planes, 3, stride, 1, bias=False)
        self.bn1 = nn.BatchNorm2d(planes)
        self.conv2 = nn.Conv2d(planes, planes, 3, 1, 1, bias=False)
        self.bn2 = nn.BatchNorm2d(planes)
        self.shortcut = nn.Sequential()
        if stride != 1 or in_planes != planes:
            self.shortcut = nn.Sequential(
                nn.Conv2d(in_planes, planes, 1, stride, bias=False),
                nn.BatchNorm2d(planes),
            )

    def forward(self, x):
        out = F.relu(self.bn1(self.conv1(x)))
        out = self.bn2(self.conv2(out))
        return F.relu(out + self.shortcut(x))


class PreActBlock(nn.Module):
    expansion = 1

    def __init__(self, in_planes, planes, stride=1):
        super().__init__()
        self.bn1 = nn.BatchNorm2d(in_planes)
        self.conv1 = nn.Conv2d(in_planes, planes, 3, stride, 1, bias=False)
        self.bn2 = nn.BatchNorm2d(planes)
        self.conv2 = nn.Conv2d(planes, planes, 3, 1, 1, bias=False)
        self.shortcut = None
        if stride != 1 or in_planes != planes:
            self.shortcut = nn.Sequential(nn.Conv2d(in_planes, planes, 1, stride, bias=False))

    def forward(self, x):
        out = F.relu(self.bn1(x))
        shortcut = self.shortcut(out) if self.shortcut is not None else x
        out = self.conv1(out)
        out = self.conv2(F.relu(self.bn2(out)))
        return out + shortcut


class _ResNet(nn.Module):
    def __init__(self, block, num_blocks, num_classes, width, preact, norm):
        super().__init__()
        widths = [max(1, int(round(c * width))) for c in (64, 128, 256, 512)]
        self.norm = Normalize(*norm)
        self.conv1 = nn.Conv2d(3, widths[0], 3, 1, 1, bias=False)
        self.preact = preact
        self.bn1 = None if preact else nn.BatchNorm2d(widths[0])
        self.in_planes = widths[0]
        layers = []
        for i, (planes, n) in enumerate(zip(widths, num_blocks)):
            stride = 1 if i == 0 else 2
            blocks = []
            for s in [stride] + [1] * (n - 1):
                blocks.append(block(self.in_planes, planes, s))
                self.in_planes = planes
            layers.append(nn.Sequential(*blocks))
        self.layer1, self.layer2, self.layer3, self.layer4 = layers
        self.bn_final = nn.BatchNorm2d(widths[3]) if preact else None
        self.linear = nn.Linear(widths[3], num_classes)

    def forward(self, x):
        out = self.conv1(self.norm(x))
        if self.bn1 is not None:
            out = F.relu(self.bn1(out))
        out = self.layer4(self.layer3(self.layer2(self.layer1(out))))
        if self.bn_final is not None:
            out = F.relu(self.bn_final(out))
        out = F.adaptive_avg_pool2d(out, 1).flatten(1)
        return self.linear(out)


class TinyCNN(nn.Module):
    """Four 3x3 conv layers and a linear head; no batch norm."""

    def __init__(self, num_classes, width, norm, in_channels=3):
        super().__init__()
        chans = [max(1, int(round(c * width))) for c in (32, 64, 128, 128)]
        self.norm = Normalize(*norm)
        convs, prev = [], in_channels
        for c, stride in zip(chans, (1, 2, 1, 2)):
            convs.append(nn.Conv2d(prev, c, 3, stride, 1))
            prev = c
        self.convs = nn.ModuleList(convs)
        self.linear = nn.Linear(prev, num_classes)

    def forward(self, x):
        out = self.norm(x)
        for conv in self.convs:
            out = F.relu(conv(out))
        return self.linear(F.adaptive_avg_pool2d(out, 1).flatten(1))


def build_model(arch, num_classes, width_multiplier=1.0, seed=0, normalization=None, in_channels=3):
    """Construct an architecture with a seeded, reproducible initialization."""
    if arch not in ARCHS:
        raise ValueError(f"unknown arch {arch!r}; choose from {ARCHS}")
    if width_multiplier <= 0:
        raise ValueError("width_multiplier must be > 0")
    if normalization is None:
        normalization = ((0.0,) * in_channels, (1.0,) * in_channels)
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        if arch == "resnet18":
            model = _ResNet(BasicBlock, [2, 2, 2, 2], num_classes, width_multiplier, False, normalization)
        elif arch == "preactresnet18":
            model = _ResNet(PreActBlock, [2, 2, 2, 2], num_classes, width_multiplier, True, normalization)
        else:
            model = TinyCNN(num_classes, width_multiplier, normalization, in_channels)
    model.arch = arch
    model.num_classes = num_classes
    model.width_multiplier = width_multiplier
    return model


def count_parameters(model) -> int:
    return sum(p.numel() for p in model.parameters())


def clone_parameters(model) -> "OrderedDict[str, torch.Tensor]":
    """Deep copy of parameters and buffers, detached from the model."""
    return OrderedDict((k, v.detach().clone()) for k, v in model.state_dict().items())


def load_parameters(model, params) -> None:
    model.load_state_dict(params)


def save_checkpoint(path, model, config_hash, epoch, **meta) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save(
        {
            "state_dict": clone_parameters(model),
            "arch": model.arch,
            "num_classes": model.num_classes,
            "width_multiplier": model.width_multiplier,
            "config_hash": config_hash,
            "epoch": epoch,
            "meta": meta,
        },
        path,
    )
    return path


def load_checkpoint(path) -> dict:
    return torch.load(Path(path), map_location="cpu", weights_only=False)


def restore_model(ckpt, arch, num_classes, width_multiplier, normalization=None):
    """Build the architecture named by the config and load ``ckpt`` into it."""
    if ckpt["arch"] != arch or ckpt["num_classes"] != num_classes:
        raise ValueError(
            f"checkpoint/arch mismatch: checkpoint is {ckpt['arch']}/{ckpt['num_classes']}, "
            f"config expects {arch}/{num_classes}"
        )
    model = build_model(arch, num_classes, width_multiplier, 0, normalization)
    try:
        model.load_state_dict(ckpt["state_dict"])
    except RuntimeError as exc:
        raise ValueError(f"checkpoint/arch mismatch: {exc}") from exc
    return model
