"""Conditional real/fake discriminator over (reference, candidate) image pairs."""
from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn

from .errors import ConfigError, SizeMismatchError


@dataclass(frozen=True)
class DiscriminatorConfig:
    base_channels: int = 64
    image_size: tuple[int, int] = (32, 32)
    res_blocks: int = 3
    down_convs: int = 2
    slope: float = 0.2

    def __post_init__(self):
        if min(self.base_channels, self.res_blocks, self.down_convs) <= 0:
            raise ConfigError(f"discriminator counts must be positive: {self}")


class ResBlock(nn.Module):
    """``x + conv(lrelu(conv(x)))``; no normalization."""

    def __init__(self, channels, slope=0.2):
        super().__init__()
        self.branch = nn.Sequential(
            nn.Conv2d(channels, channels, 3, 1, 1),
            nn.LeakyReLU(slope),
            nn.Conv2d(channels, channels, 3, 1, 1),
        )

    def forward(self, x):
        return x + self.branch(x)


class Discriminator(nn.Module):
    def __init__(self, config: DiscriminatorConfig):
        super().__init__()
        self.config = config
        layers = []
        cin, c = 6, config.base_channels
        for k in range(config.down_convs):
            cout = c * 2 ** k
            layers += [nn.Conv2d(cin, cout, 4, 2, 1), nn.LeakyReLU(config.slope)]
            cin = cout
        self.down = nn.Sequential(*layers)
        self.blocks = nn.Sequential(*(ResBlock(cin, config.slope) for _ in range(config.res_blocks)))
        self.head = nn.Conv2d(cin, 1, 1)

    def logits(self, reference, candidate):
        if reference.shape != candidate.shape:
            raise SizeMismatchError(f"reference {tuple(reference.shape)} vs candidate {tuple(candidate.shape)}")
        x = self.blocks(self.down(torch.cat([reference, candidate], dim=1)))
        return self.head(nn.functional.leaky_relu(x, self.config.slope)).mean(dim=(1, 2, 3))

    def forward(self, reference, candidate):
        """Probability that ``candidate`` is a real image of the person in ``reference``."""
        return torch.sigmoid(self.logits(reference, candidate))
