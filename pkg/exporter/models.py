"""Small CNNs for exercising the exporter.

Both models are deliberately over-parameterized: every conv weight is
initialized as a low-rank matrix (rank = filters // 4) plus faint noise, so a
variance analysis of the exported file should keep strictly fewer filters
than the layer has.  All layers are bias-free because the container format
stores conv/linear weights only.
"""

from __future__ import annotations

import numpy as np
import torch
from torch import nn


def _low_rank_fill(weight: torch.Tensor, rank: int, rng: np.random.Generator) -> None:
    """Overwrite weight with a rank-`rank` matrix plus 1e-4 noise."""
    filters = weight.shape[0]
    width = int(np.prod(weight.shape[1:]))
    left, _ = np.linalg.qr(rng.standard_normal((filters, rank)))
    right, _ = np.linalg.qr(rng.standard_normal((width, rank)))
    scales = rng.uniform(1.0, 2.0, size=rank)
    flat = (left * scales) @ right.T + 1e-4 * rng.standard_normal((filters, width))
    with torch.no_grad():
        weight.copy_(torch.from_numpy(flat.astype(np.float32).reshape(weight.shape)))


def _randomize_bn(bn: nn.BatchNorm2d, rng: np.random.Generator) -> None:
    c = bn.num_features
    with torch.no_grad():
        bn.weight.copy_(torch.from_numpy(rng.uniform(0.5, 1.5, c).astype(np.float32)))
        bn.bias.copy_(torch.from_numpy((0.1 * rng.standard_normal(c)).astype(np.float32)))
        bn.running_mean.copy_(torch.from_numpy((0.1 * rng.standard_normal(c)).astype(np.float32)))
        bn.running_var.copy_(torch.from_numpy(rng.uniform(0.5, 1.5, c).astype(np.float32)))


class SmallVGG(nn.Module):
    """Four 3x3 convs with two 2x2 max-pools and a flatten-connected head.

    For 3x32x32 input the head sees 32 channels x 8x8 positions, so its
    exported record carries spatial_multiplier 64.
    """

    def __init__(self):
        super().__init__()
        self.conv1 = nn.Conv2d(3, 16, 3, padding=1, bias=False)
        self.conv2 = nn.Conv2d(16, 16, 3, padding=1, bias=False)
        self.pool1 = nn.MaxPool2d(2)
        self.conv3 = nn.Conv2d(16, 32, 3, padding=1, bias=False)
        self.conv4 = nn.Conv2d(32, 32, 3, padding=1, bias=False)
        self.pool2 = nn.MaxPool2d(2)
        self.fc = nn.Linear(32 * 8 * 8, 10, bias=False)

    def forward(self, x):
        x = torch.relu(self.conv1(x))
        x = self.pool1(torch.relu(self.conv2(x)))
        x = torch.relu(self.conv3(x))
        x = self.pool2(torch.relu(self.conv4(x)))
        x = torch.flatten(x, 1)
        return self.fc(x)


class TinyResNet(nn.Module):
    """A stem conv plus one residual block; the add couples conv_in and conv2."""

    def __init__(self):
        super().__init__()
        self.conv_in = nn.Conv2d(3, 16, 3, padding=1, bias=False)
        self.bn_in = nn.BatchNorm2d(16)
        self.conv1 = nn.Conv2d(16, 16, 3, padding=1, bias=False)
        self.bn1 = nn.BatchNorm2d(16)
        self.conv2 = nn.Conv2d(16, 16, 3, padding=1, bias=False)
        self.bn2 = nn.BatchNorm2d(16)
        self.gap = nn.AdaptiveAvgPool2d(1)
        self.fc = nn.Linear(16, 10, bias=False)

    def forward(self, x):
        x = torch.relu(self.bn_in(self.conv_in(x)))
        y = torch.relu(self.bn1(self.conv1(x)))
        y = self.bn2(self.conv2(y))
        x = torch.relu(x + y)
        x = torch.flatten(self.gap(x), 1)
        return self.fc(x)


def make_model(name: str, seed: int = 0) -> nn.Module:
    """Build a named demo model with deterministic low-rank-plus-noise weights."""
    rng = np.random.default_rng(seed)
    if name == "vgg":
        model = SmallVGG()
    elif name == "resnet":
        model = TinyResNet()
    else:
        raise ValueError(f"unknown model {name!r}; choose 'vgg' or 'resnet'")
    for mod in model.modules():
        if isinstance(mod, nn.Conv2d):
            _low_rank_fill(mod.weight, max(1, mod.out_channels // 4), rng)
        elif isinstance(mod, nn.BatchNorm2d):
            _randomize_bn(mod, rng)
        elif isinstance(mod, nn.Linear):
            with torch.no_grad():
                mod.weight.copy_(
                    torch.from_numpy(
                        (0.1 * rng.standard_normal(tuple(mod.weight.shape))).astype(
                            np.float32
                        )
                    )
                )
    return model.eval()
