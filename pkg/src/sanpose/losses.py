"""Adversarial, pixel, and perceptual objectives plus the frozen feature extractor they share."""
from __future__ import annotations

import logging
from dataclasses import dataclass

import torch
import torch.nn as nn

from .errors import ConfigError, SizeMismatchError

log = logging.getLogger(__name__)

EPS = 1e-7


@dataclass(frozen=True)
class LossWeights:
    alpha: float = 10.0   # adversarial
    beta: float = 15.0    # pixel l1
    gamma: float = 5.0    # perceptual

    def __post_init__(self):
        ws = (self.alpha, self.beta, self.gamma)
        if min(ws) < 0 or max(ws) <= 0:
            raise ConfigError(f"loss weights must be nonnegative with one positive: {ws}")


MARKET_WEIGHTS = LossWeights(10.0, 15.0, 5.0)
FASHION_WEIGHTS = LossWeights(15.0, 1.0, 5.0)


class FeatureExtractor(nn.Module):
    """Frozen random convolutional pyramid standing in for a pretrained backbone.

    Each level is a stride-2 3x3 convolution followed by LeakyReLU. ``layers`` selects which
    levels are reported. Weights are drawn from a seeded He-normal distribution and never train.
    Any module exposing ``features(x) -> list[Tensor]`` can be used in its place.
    """

    def __init__(self, channels=(16, 32, 64), layers=None, seed=0, in_channels=3, slope=0.2):
        super().__init__()
        self.channels = tuple(channels)
        self.layers = tuple(range(len(channels))) if layers is None else tuple(layers)
        if not self.layers or max(self.layers) >= len(channels) or min(self.layers) < 0:
            raise ConfigError(f"layer set {self.layers} invalid for {len(channels)} levels")
        self.seed = seed
        self.slope = slope
        g = torch.Generator().manual_seed(seed)
        convs, cin = [], in_channels
        for c in channels:
            conv = nn.Conv2d(cin, c, 3, 2, 1)
            with torch.no_grad():
                conv.weight.normal_(0.0, (2.0 / (cin * 9)) ** 0.5, generator=g)
                conv.bias.normal_(0.0, 0.1, generator=g)
            convs.append(conv)
            cin = c
        self.convs = nn.ModuleList(convs)
        self.requires_grad_(False)
        self.eval()

    def train(self, mode=True):
        return super().train(False)

    def features(self, x):
        out = []
        for k, conv in enumerate(self.convs):
            x = nn.functional.leaky_relu(conv(x), self.slope)
            if k in self.layers:
                out.append(x)
            if k >= max(self.layers):
                break
        return out

    def forward(self, x):
        return self.features(x)


def _clamp(p):
    if bool(((p <= EPS) | (p >= 1 - EPS)).any()):
        log.debug("probability clamped to [%g, 1-%g]", EPS, EPS)
    return p.clamp(EPS, 1 - EPS)


def adv_loss(d_real, d_fake):
    """Batch mean of ``log D(real) + log(1 - D(fake))``; the discriminator maximises this."""
    return torch.log(_clamp(d_real)).mean() + torch.log(1 - _clamp(d_fake)).mean()


def discriminator_loss(d_real, d_fake, smoothing=True):
    """Quantity the discriminator minimises. With hard labels this is ``-adv_loss``;
    smoothing moves the targets to 0.9 / 0.1."""
    real_t, fake_t = (0.9, 0.1) if smoothing else (1.0, 0.0)
    p_r, p_f = _clamp(d_real), _clamp(d_fake)
    real = real_t * torch.log(p_r) + (1 - real_t) * torch.log(1 - p_r)
    fake = fake_t * torch.log(p_f) + (1 - fake_t) * torch.log(1 - p_f)
    return -(real.mean() + fake.mean())


def generator_adv_loss(d_fake):
    """Non-saturating generator term, ``-log D(fake)``."""
    return -torch.log(_clamp(d_fake)).mean()


def l1_loss(target, generated):
    if target.shape != generated.shape:
        raise SizeMismatchError(f"{tuple(target.shape)} vs {tuple(generated.shape)}")
    return (target - generated).abs().mean()


def feature_distance(feats_a, feats_b):
    """Sum over layers of the per-layer mean squared feature difference."""
    total = 0.0
    for fa, fb in zip(feats_a, feats_b, strict=True):
        if fa.shape != fb.shape:
            raise SizeMismatchError(f"feature shapes differ: {tuple(fa.shape)} vs {tuple(fb.shape)}")
        total = total + (fa - fb).pow(2).mean()
    return total


def perceptual_loss(extractor, target, generated):
    if target.shape != generated.shape:
        raise SizeMismatchError(f"{tuple(target.shape)} vs {tuple(generated.shape)}")
    return feature_distance(extractor.features(generated), extractor.features(target))


def full_loss(weights: LossWeights, adv, l1, perc):
    return weights.alpha * adv + weights.beta * l1 + weights.gamma * perc
