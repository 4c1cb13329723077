"""Two-pathway pose-transfer generator built from semantic attention blocks."""
from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn

from .errors import ConfigError, SizeMismatchError

NORMS = ("batch", "instance", "none")


@dataclass(frozen=True)
class GeneratorConfig:
    num_labels: int = 20
    image_size: tuple[int, int] = (32, 32)
    base_channels: int = 64
    sab_count: int = 5
    n_down: int = 2
    content_stages: int = 3
    slope: float = 0.2
    norm: str = "batch"
    code_skip: bool = True
    target_skip: bool = True

    def __post_init__(self):
        if self.sab_count < 1:
            raise ConfigError(f"sab_count must be >= 1, got {self.sab_count}")
        if self.norm not in NORMS:
            raise ConfigError(f"norm must be one of {NORMS}, got {self.norm!r}")
        if not 0 <= self.n_down <= 2:
            raise ConfigError("the encoder has two 3x3 convolutions, so n_down is 0, 1 or 2")
        factor = 2 ** (self.n_down + self.content_stages)
        h, w = self.image_size
        if h % factor or w % factor:
            raise ConfigError(f"image size {self.image_size} not divisible by {factor}")

    @property
    def code_size(self) -> tuple[int, int]:
        h, w = self.image_size
        return h // 2 ** self.n_down, w // 2 ** self.n_down

    @property
    def decoder_layers(self) -> int:
        return self.content_stages + self.n_down


def make_norm(kind: str, channels: int) -> nn.Module:
    if kind == "batch":
        return nn.BatchNorm2d(channels)
    if kind == "instance":
        return nn.InstanceNorm2d(channels, affine=True)
    return nn.Identity()


def conv_block(cin, cout, kernel, stride, norm, slope):
    return nn.Sequential(
        nn.Conv2d(cin, cout, kernel, stride, kernel // 2),
        make_norm(norm, cout),
        nn.LeakyReLU(slope),
    )


def init_weights(module: nn.Module, seed: int, gain: float = 0.02) -> nn.Module:
    """Seeded N(0, gain) convolution weights, N(1, gain) norm scales, zero biases."""
    g = torch.Generator().manual_seed(seed)
    for m in module.modules():
        if isinstance(m, (nn.Conv2d, nn.ConvTranspose2d, nn.Linear)):
            with torch.no_grad():
                m.weight.normal_(0.0, gain, generator=g)
                if m.bias is not None:
                    m.bias.zero_()
        elif isinstance(m, (nn.BatchNorm2d, nn.InstanceNorm2d)) and m.affine:
            with torch.no_grad():
                m.weight.normal_(1.0, gain, generator=g)
                m.bias.zero_()
    return module


class PathwayEncoder(nn.Module):
    """A 7x7 convolution then two 3x3 convolutions; the first ``n_down`` 3x3s stride by 2."""

    def __init__(self, in_channels, channels, n_down=2, norm="batch", slope=0.2):
        super().__init__()
        strides = [2] * n_down + [1] * (2 - n_down)
        self.net = nn.Sequential(
            conv_block(in_channels, channels, 7, 1, norm, slope),
            conv_block(channels, channels, 3, strides[0], norm, slope),
            conv_block(channels, channels, 3, strides[1], norm, slope),
        )

    def forward(self, x):
        return self.net(x)


class SemanticAttentionBlock(nn.Module):
    """Gates the semantic code into the appearance code, then refreshes the semantic code.

    ``appearance' = sigmoid(g(semantic)) * semantic + appearance``
    ``semantic'   = conv(semantic || appearance')``
    """

    def __init__(self, channels, norm="batch", slope=0.2):
        super().__init__()
        self.mask_net = nn.Sequential(
            nn.Conv2d(channels, channels, 3, 1, 1),
            make_norm(norm, channels),
            nn.LeakyReLU(slope),
            nn.Conv2d(channels, channels, 3, 1, 1),
            make_norm(norm, channels),
            nn.LeakyReLU(slope),
            nn.Conv2d(channels, channels, 3, 1, 1),
        )
        self.update = conv_block(2 * channels, channels, 3, 1, norm, slope)

    def mask_logits(self, f_pt):
        return self.mask_net(f_pt)

    def attention_mask(self, f_pt):
        return torch.sigmoid(self.mask_logits(f_pt))

    def forward(self, f_ps, f_pt, mask=None):
        if f_ps.shape != f_pt.shape:
            raise SizeMismatchError(f"code shapes differ: {tuple(f_ps.shape)} vs {tuple(f_pt.shape)}")
        if mask is None:
            mask = self.attention_mask(f_pt)
        f_ps = mask * f_pt + f_ps
        f_pt = self.update(torch.cat([f_pt, f_ps], dim=1))
        return f_ps, f_pt


class ContentNet(nn.Module):
    """Three stride-2 stages (conv, LeakyReLU, norm); every stage output is kept for skips."""

    def __init__(self, channels, stages=3, norm="batch", slope=0.2, max_mult=4):
        super().__init__()
        self.out_channels = []
        blocks = []
        cin = channels
        for k in range(stages):
            cout = channels * min(2 ** (k + 1), max_mult)
            blocks.append(nn.Sequential(
                nn.Conv2d(cin, cout, 3, 2, 1),
                nn.LeakyReLU(slope),
                make_norm(norm, cout),
            ))
            self.out_channels.append(cout)
            cin = cout
        self.stages = nn.ModuleList(blocks)

    def forward(self, x):
        factor = 2 ** len(self.stages)
        if x.shape[-2] % factor or x.shape[-1] % factor:
            raise SizeMismatchError(f"code size {tuple(x.shape[-2:])} not divisible by {factor}")
        outs = []
        for stage in self.stages:
            x = stage(x)
            outs.append(x)
        return outs


class Decoder(nn.Module):
    """U-net style decoder.

    Starts from the deepest appearance stage joined with the deepest semantic stage; at each
    shallower stage the running feature is concatenated with both same-size stage outputs.
    ``n_down`` further transposed convolutions restore the input resolution.
    """

    def __init__(self, channels, stage_channels, n_down=2, norm="batch", out_channels=3, code_skip=False,
                 guide_channels=0):
        super().__init__()
        self.ups = nn.ModuleList()
        deep = list(reversed(stage_channels))
        cin = 2 * deep[0]
        for k, c in enumerate(deep):
            cout = deep[k + 1] if k + 1 < len(deep) else channels
            self.ups.append(self._up(cin, cout, norm))
            cin = cout + (2 * deep[k + 1] if k + 1 < len(deep) else 0)
        self.code_skip = code_skip
        if code_skip:
            cin += 2 * channels
        self.tail = nn.ModuleList()
        for _ in range(n_down):
            cout = max(channels // 2, 8)
            self.tail.append(self._up(cin, cout, norm))
            cin = cout
        # full-resolution guidance (the target mask and parsing map) joins just before the output
        self.guide_channels = guide_channels
        if guide_channels:
            self.refine = conv_block(cin + guide_channels, cin, 3, 1, norm, 0.2)
        self.out = nn.Conv2d(cin, out_channels, 3, 1, 1)

    @staticmethod
    def _up(cin, cout, norm):
        return nn.Sequential(nn.ConvTranspose2d(cin, cout, 4, 2, 1), make_norm(norm, cout), nn.ReLU())

    def forward(self, appearance, semantic, codes=None, guide=None):
        if len(appearance) != len(semantic):
            raise SizeMismatchError(f"{len(appearance)} appearance stages vs {len(semantic)} semantic")
        for a, s in zip(appearance, semantic):
            if a.shape != s.shape:
                raise SizeMismatchError(f"stage shapes differ: {tuple(a.shape)} vs {tuple(s.shape)}")
        x = torch.cat([appearance[-1], semantic[-1]], dim=1)
        for k, up in enumerate(self.ups):
            x = up(x)
            j = len(appearance) - 2 - k
            if j >= 0:
                x = torch.cat([x, appearance[j], semantic[j]], dim=1)
        if self.code_skip:
            if codes is None:
                raise ValueError("decoder built with code_skip needs the final codes")
            x = torch.cat([x, *codes], dim=1)
        for up in self.tail:
            x = up(x)
        if self.guide_channels:
            if guide is None:
                raise ValueError("decoder built with guide channels needs the guide tensor")
            x = self.refine(torch.cat([x, guide], dim=1))
        return torch.tanh(self.out(x))


class Generator(nn.Module):
    def __init__(self, config: GeneratorConfig):
        super().__init__()
        self.config = config
        c, lab = config.base_channels, config.num_labels
        opts = dict(norm=config.norm, slope=config.slope)
        self.enc_appearance = PathwayEncoder(3 + 1 + lab, c, config.n_down, **opts)
        self.enc_semantic = PathwayEncoder(1 + lab, c, config.n_down, **opts)
        self.blocks = nn.ModuleList(SemanticAttentionBlock(c, **opts) for _ in range(config.sab_count))
        self.conv_a = ContentNet(c, config.content_stages, **opts)
        self.conv_s = ContentNet(c, config.content_stages, **opts)
        self.decoder = Decoder(c, self.conv_a.out_channels, config.n_down, config.norm,
                               code_skip=config.code_skip,
                               guide_channels=1 + lab if config.target_skip else 0)

    def _check(self, *tensors):
        h, w = self.config.image_size
        for t in tensors:
            if tuple(t.shape[-2:]) != (h, w):
                raise SizeMismatchError(f"input of size {tuple(t.shape[-2:])}, model expects {(h, w)}")

    def encode_appearance(self, img_src, mask_src, sem_src):
        self._check(img_src, mask_src, sem_src)
        # background removal: the mask zeroes clutter outside the body
        return self.enc_appearance(torch.cat([img_src * mask_src, mask_src, sem_src], dim=1))

    def encode_semantic(self, mask_tgt, sem_tgt):
        self._check(mask_tgt, sem_tgt)
        return self.enc_semantic(torch.cat([mask_tgt, sem_tgt], dim=1))

    def run_san(self, f_ps, f_pt, masks=None):
        """Apply the block sequence. ``masks`` optionally injects one attention mask per block."""
        for t, block in enumerate(self.blocks):
            f_ps, f_pt = block(f_ps, f_pt, None if masks is None else masks[t])
        return f_ps, f_pt

    def content_features(self, code, which):
        net = {"appearance": self.conv_a, "semantic": self.conv_s}[which]
        return net(code)

    def decode(self, appearance_stages, semantic_stages, codes=None, guide=None):
        return self.decoder(appearance_stages, semantic_stages, codes, guide)

    def forward(self, img_src, mask_src, sem_src, mask_tgt, sem_tgt):
        f_ps = self.encode_appearance(img_src, mask_src, sem_src)
        f_pt = self.encode_semantic(mask_tgt, sem_tgt)
        f_ps, f_pt = self.run_san(f_ps, f_pt)
        return self.decode(self.content_features(f_ps, "appearance"),
                           self.content_features(f_pt, "semantic"),
                           (f_ps, f_pt) if self.config.code_skip else None,
                           torch.cat([mask_tgt, sem_tgt], dim=1) if self.config.target_skip else None)


def build_generator(config: GeneratorConfig, seed: int) -> Generator:
    return init_weights(Generator(config), seed)


def generate(generator: Generator, batch: dict, disable_mask: bool = False) -> torch.Tensor:
    """Synthesize the target-pose image for a batch of inputs.

    ``batch`` holds ``img_src, mask_src, sem_src, mask_tgt, sem_tgt``. With ``disable_mask`` the
    pose masks are replaced by all-ones fields of the same shape and their pixels are never read.
    """
    mask_src, mask_tgt = batch["mask_src"], batch["mask_tgt"]
    if disable_mask:
        mask_src = torch.ones(mask_src.shape, dtype=batch["img_src"].dtype)
        mask_tgt = torch.ones(mask_tgt.shape, dtype=batch["img_src"].dtype)
    return generator(batch["img_src"], mask_src, batch["sem_src"], mask_tgt, batch["sem_tgt"])
