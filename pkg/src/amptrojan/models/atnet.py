"""ATNet: the switchable image-to-image trojan network.

Encoder-decoder with three downsampling stages of C2 blocks (two stacked
3x3 convolutions), a C2 bottleneck, bilinear upsampling with skip
concatenation on the way back up, a final 1x1 convolution, and a residual
addition of the input. Output is clamped to [0,1]. The full-width variant
uses channel widths (64, 128, 256); ATNet-small halves every width.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
from torch import nn
from torch.nn import functional as F

from ..core import ConfigurationError, InputTransformer

BASE_WIDTHS = (64, 128, 256)


@dataclass
class ATNetSpec:
    """Construction parameters for the trojan network.

    width_multiplier 1.0 is ATNet, 0.5 is ATNet-small. input_shape is
    (channels, height, width).
    """

    input_shape: tuple[int, int, int]
    width_multiplier: float = 1.0

    def widths(self) -> tuple[int, ...]:
        ws = tuple(int(round(w * self.width_multiplier)) for w in BASE_WIDTHS)
        if any(w < 1 for w in ws):
            raise ConfigurationError(f"width_multiplier {self.width_multiplier} too small")
        return ws

    def to_dict(self) -> dict:
        return {
            "input_shape": list(self.input_shape),
            "width_multiplier": self.width_multiplier,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ATNetSpec":
        return cls(tuple(d["input_shape"]), float(d["width_multiplier"]))


def _c2(cin: int, cout: int) -> nn.Sequential:
    """Two stacked 3x3 convolutions, each followed by ReLU."""
    return nn.Sequential(
        nn.Conv2d(cin, cout, 3, padding=1),
        nn.ReLU(inplace=True),
        nn.Conv2d(cout, cout, 3, padding=1),
        nn.ReLU(inplace=True),
    )


class ATNet(InputTransformer):
    """U-net style transformer; see module docstring for the topology."""

    def __init__(self, spec: ATNetSpec):
        super().__init__()
        c, h, w = spec.input_shape
        depth = len(BASE_WIDTHS)
        if h < 2**depth or w < 2**depth:
            raise ConfigurationError(
                f"spatial size {h}x{w} too small for {depth} downsampling stages"
            )
        self.spec = spec
        self.input_shape = tuple(spec.input_shape)
        w1, w2, w3 = spec.widths()

        self.enc1 = _c2(c, w1)
        self.enc2 = _c2(w1, w2)
        self.enc3 = _c2(w2, w3)
        self.pool = nn.MaxPool2d(2)
        self.bottleneck = _c2(w3, w3)
        self.dec3 = _c2(w3 + w3, w3)
        self.dec2 = _c2(w3 + w2, w2)
        self.dec1 = _c2(w2 + w1, w1)
        self.head = nn.Conv2d(w1, c, 1)

    @staticmethod
    def _up(x: torch.Tensor, skip: torch.Tensor) -> torch.Tensor:
        x = F.interpolate(x, size=skip.shape[-2:], mode="bilinear", align_corners=False)
        return torch.cat([x, skip], dim=1)

    def transform(self, x: torch.Tensor) -> torch.Tensor:
        s1 = self.enc1(x)
        s2 = self.enc2(self.pool(s1))
        s3 = self.enc3(self.pool(s2))
        b = self.bottleneck(self.pool(s3))
        d = self.dec3(self._up(b, s3))
        d = self.dec2(self._up(d, s2))
        d = self.dec1(self._up(d, s1))
        return torch.clamp(x + self.head(d), 0.0, 1.0)
