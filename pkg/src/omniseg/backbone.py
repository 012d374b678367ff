"""Tiny from-scratch ResNet-like pyramid with hook points for 3D fusion."""
from __future__ import annotations

import torch
import torch.nn.functional as F
from torch import nn

from .errors import ContractViolation

STRIDES = (4, 8, 16, 32)


class Affine(nn.Module):
    """Per-channel gain and offset. No running statistics, so train == eval."""

    def __init__(self, channels):
        super().__init__()
        self.gain = nn.Parameter(torch.ones(channels))
        self.offset = nn.Parameter(torch.zeros(channels))

    def forward(self, x):
        return x * self.gain[:, None, None] + self.offset[:, None, None]


def _conv(cin, cout, stride=1):
    conv = nn.Conv2d(cin, cout, 3, stride, 1)
    nn.init.kaiming_normal_(conv.weight, nonlinearity="relu")
    nn.init.zeros_(conv.bias)
    return conv


class Stage(nn.Module):
    def __init__(self, cin, cout):
        super().__init__()
        self.down = _conv(cin, cout, 2)
        self.norm = Affine(cout)
        self.conv_a = _conv(cout, cout)
        self.norm_a = Affine(cout)
        self.conv_b = _conv(cout, cout)
        self.norm_b = Affine(cout)

    def forward(self, x):
        x = F.relu(self.norm(self.down(x)))
        y = F.relu(self.norm_a(self.conv_a(x)))
        y = self.norm_b(self.conv_b(y))
        return F.relu(x + y)


class Backbone(nn.Module):
    """rgb V x 3 x H x W in [0, 1] -> maps at strides 4/8/16/32 with widths C, 2C, 4C, 8C.

    The stem is a single stride-2 conv, so stage i ends at stride 2**(i+1).
    """

    def __init__(self, width=16, interleave=(2, 3, 4)):
        super().__init__()
        self.width = width
        self.interleave = tuple(interleave)
        self.stem = _conv(3, width, 2)
        self.stem_norm = Affine(width)
        chans = [width, width, 2 * width, 4 * width, 8 * width]
        self.stages = nn.ModuleList(Stage(chans[i], chans[i + 1]) for i in range(4))

    @property
    def channels(self):
        return [self.width * m for m in (1, 2, 4, 8)]

    def forward(self, rgb, hook=None):
        _, _, h, w = rgb.shape
        if h % 32 or w % 32:
            raise ContractViolation(f"input size {h}x{w} is not divisible by 32")
        x = F.relu(self.stem_norm(self.stem(rgb - 0.5)))
        out = []
        for i, stage in enumerate(self.stages, start=1):
            x = stage(x)
            if hook is not None and i in self.interleave:
                x = hook(i, x)
            out.append(x)
        return out


def backbone_forward(model: Backbone, rgb, interleave_hook=None):
    return model(rgb, interleave_hook)
