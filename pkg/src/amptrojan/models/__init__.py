"""Model construction with deterministic seeding."""

from __future__ import annotations

import torch
from torch import nn

from .atnet import ATNet, ATNetSpec
from .checkpoint import load_checkpoint, read_metadata, save_checkpoint
from .targets import BACKBONES, Alexnet32, CnnSmall, TargetSpec, Vgg9, make_target

__all__ = [
    "ATNet", "ATNetSpec", "TargetSpec", "BACKBONES",
    "CnnSmall", "Vgg9", "Alexnet32",
    "build_target", "build_atnet",
    "save_checkpoint", "load_checkpoint", "read_metadata",
]


def build_target(spec: TargetSpec, seed: int) -> nn.Module:
    """Deterministically initialized, untrained target classifier."""
    with torch.random.fork_rng():
        torch.manual_seed(seed)
        return make_target(spec)


def build_atnet(spec: ATNetSpec, seed: int) -> ATNet:
    """Deterministically initialized trojan network, switch off."""
    with torch.random.fork_rng():
        torch.manual_seed(seed)
        return ATNet(spec)
