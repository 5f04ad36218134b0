"""Target classifiers: CNN-small plus 32x32-adapted standard backbones.

All forwards take [0,1] pixel batches and return logits. Any internal
normalization would belong to the model itself; these models use none, so
input gradients and perturbation budgets live directly in pixel space.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import torch
from torch import nn
from torchvision.models import resnet18

from ..core import ConfigurationError

BACKBONES = ("cnn_small", "resnet18", "vgg9", "alexnet")


@dataclass
class TargetSpec:
    """Which classifier to build and for what input."""

    backbone: str
    input_shape: tuple[int, int, int]
    num_classes: int = 10

    def __post_init__(self):
        if self.backbone not in BACKBONES:
            raise ConfigurationError(f"unknown backbone {self.backbone!r}")

    def to_dict(self) -> dict:
        return {
            "backbone": self.backbone,
            "input_shape": list(self.input_shape),
            "num_classes": self.num_classes,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "TargetSpec":
        return cls(d["backbone"], tuple(d["input_shape"]), int(d["num_classes"]))


class CnnSmall(nn.Module):
    """Conv(32)x2 / pool / Conv(64)x2 / pool / FC200 / FC200 / 10 logits.

    3x3 kernels, no padding, ReLU throughout. The flatten width adapts to
    the input size so the same layer list serves 28x28x1 and 32x32x3.
    """

    def __init__(self, input_shape: tuple[int, int, int], num_classes: int = 10):
        super().__init__()
        c, h, w = input_shape
        self.input_shape = tuple(input_shape)
        self.num_classes = num_classes
        self.features = nn.Sequential(
            nn.Conv2d(c, 32, 3), nn.ReLU(inplace=True),
            nn.Conv2d(32, 32, 3), nn.ReLU(inplace=True),
            nn.MaxPool2d(2),
            nn.Conv2d(32, 64, 3), nn.ReLU(inplace=True),
            nn.Conv2d(64, 64, 3), nn.ReLU(inplace=True),
            nn.MaxPool2d(2),
        )
        with torch.no_grad():
            flat = self.features(torch.zeros(1, c, h, w)).numel()
        self.classifier = nn.Sequential(
            nn.Flatten(),
            nn.Linear(flat, 200), nn.ReLU(inplace=True),
            nn.Linear(200, 200), nn.ReLU(inplace=True),
            nn.Linear(200, num_classes),
        )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.classifier(self.features(x))


def _resnet18_32(input_shape, num_classes):
    c, h, w = input_shape
    if c != 3:
        raise ConfigurationError("resnet18 backbone expects RGB input")
    net = resnet18(num_classes=num_classes)
    # reduced stem for 32x32 inputs: 3x3 stride-1 first conv, no maxpool
    net.conv1 = nn.Conv2d(3, 64, 3, stride=1, padding=1, bias=False)
    net.maxpool = nn.Identity()
    net.input_shape = tuple(input_shape)
    net.num_classes = num_classes
    return net


class Vgg9(nn.Module):
    """Six 3x3 conv layers in three pooled pairs, then three FC layers."""

    def __init__(self, input_shape: tuple[int, int, int], num_classes: int = 10):
        super().__init__()
        c, _, _ = input_shape
        self.input_shape = tuple(input_shape)
        self.num_classes = num_classes
        self.features = nn.Sequential(
            nn.Conv2d(c, 64, 3, padding=1), nn.ReLU(inplace=True),
            nn.Conv2d(64, 64, 3, padding=1), nn.ReLU(inplace=True),
            nn.MaxPool2d(2),
            nn.Conv2d(64, 128, 3, padding=1), nn.ReLU(inplace=True),
            nn.Conv2d(128, 128, 3, padding=1), nn.ReLU(inplace=True),
            nn.MaxPool2d(2),
            nn.Conv2d(128, 256, 3, padding=1), nn.ReLU(inplace=True),
            nn.Conv2d(256, 256, 3, padding=1), nn.ReLU(inplace=True),
            nn.MaxPool2d(2),
            nn.AdaptiveAvgPool2d(1),
        )
        self.classifier = nn.Sequential(
            nn.Flatten(),
            nn.Linear(256, 512), nn.ReLU(inplace=True),
            nn.Linear(512, 512), nn.ReLU(inplace=True),
            nn.Linear(512, num_classes),
        )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.classifier(self.features(x))


class Alexnet32(nn.Module):
    """AlexNet trunk with a 3x3 stride-1 stem so 32x32 inputs survive."""

    def __init__(self, input_shape: tuple[int, int, int], num_classes: int = 10):
        super().__init__()
        c, _, _ = input_shape
        self.input_shape = tuple(input_shape)
        self.num_classes = num_classes
        self.features = nn.Sequential(
            nn.Conv2d(c, 64, 3, stride=1, padding=1), nn.ReLU(inplace=True),
            nn.MaxPool2d(2),
            nn.Conv2d(64, 192, 3, padding=1), nn.ReLU(inplace=True),
            nn.MaxPool2d(2),
            nn.Conv2d(192, 384, 3, padding=1), nn.ReLU(inplace=True),
            nn.Conv2d(384, 256, 3, padding=1), nn.ReLU(inplace=True),
            nn.Conv2d(256, 256, 3, padding=1), nn.ReLU(inplace=True),
            nn.MaxPool2d(2),
            nn.AdaptiveAvgPool2d(1),
        )
        self.classifier = nn.Sequential(
            nn.Flatten(),
            nn.Linear(256, 512), nn.ReLU(inplace=True),
            nn.Linear(512, 512), nn.ReLU(inplace=True),
            nn.Linear(512, num_classes),
        )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.classifier(self.features(x))


def make_target(spec: TargetSpec) -> nn.Module:
    if spec.backbone == "cnn_small":
        return CnnSmall(spec.input_shape, spec.num_classes)
    if spec.backbone == "resnet18":
        return _resnet18_32(spec.input_shape, spec.num_classes)
    if spec.backbone == "vgg9":
        return Vgg9(spec.input_shape, spec.num_classes)
    if spec.backbone == "alexnet":
        return Alexnet32(spec.input_shape, spec.num_classes)
    raise ConfigurationError(f"unknown backbone {spec.backbone!r}")
